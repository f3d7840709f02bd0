"""Train / evaluate drivers shared by the CLI and the end-to-end checks."""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .config import PipelineConfig
from .evaluation import (
    CountReport,
    EvalReport,
    count_by_detection,
    counting_metrics,
    evaluate,
    gt_counts,
)
from .geometry import Detection, iou_matrix
from .model import ForwardResult, ModelParams, forward, prepare_scene
from .scenes import Scene, SynthConfig, synth_scene
from .tensor import Tape
from .train import train_toy


def make_split(synth: SynthConfig, start: int, count: int) -> list[Scene]:
    return [synth_scene(synth, i) for i in range(start, start + count)]


def run_detector(params: ModelParams, cfg: PipelineConfig, scenes: Sequence[Scene]) -> list[ForwardResult]:
    return [forward(Tape(record=False), params, cfg, prepare_scene(s, cfg)) for s in scenes]


def detections_of(scenes: Sequence[Scene], results: Sequence[ForwardResult]) -> dict[str, list[Detection]]:
    return {s.id: r.detections for s, r in zip(scenes, results)}


def stage_matched_iou(scenes: Sequence[Scene], results: Sequence[ForwardResult], cfg: PipelineConfig,
                      iou_thresh: float = 0.25) -> list[float]:
    """Mean IoU per cascade stage over the final detections that hit a GT box.

    A final detection counts when its box overlaps a same-class GT box by at
    least ``iou_thresh``; the same proposal's box after every stage is then
    scored against that GT box.
    """
    per_stage: list[list[float]] = [[] for _ in cfg.stages]
    for s, r in zip(scenes, results):
        gt = s.gt_array
        if not len(gt):
            continue
        last = r.stages[-1]
        keep = kernels.nms(last.boxes, last.scores, last.labels, cfg.nms_iou)
        iou_last = iou_matrix(last.boxes[keep], gt)
        for row, i in enumerate(keep):
            j = int(np.argmax(iou_last[row]))
            if iou_last[row, j] < iou_thresh or s.classes[j] != last.labels[i]:
                continue
            for t, st in enumerate(r.stages):
                per_stage[t].append(float(iou_matrix(st.boxes[i : i + 1], gt[j : j + 1])[0, 0]))
    return [float(np.mean(v)) if v else 0.0 for v in per_stage]


@dataclass
class ToyResult:
    eval_report: EvalReport
    count_report: CountReport
    stage_iou: list[float]
    losses: list[float]
    train_seconds: float
    total_seconds: float


def toy_experiment(
    cfg: PipelineConfig,
    synth: SynthConfig,
    n_train: int = 200,
    n_eval: int = 50,
    conf: float = 0.95,
) -> ToyResult:
    """Train on scenes ``0..n_train-1`` and evaluate on the next ``n_eval``."""
    t0 = time.perf_counter()
    train = make_split(synth, 0, n_train)
    held = make_split(synth, n_train, n_eval)
    res = train_toy(train, cfg)
    results = run_detector(res.params, cfg, held)
    dets = detections_of(held, results)
    rep = evaluate(dets, held, cfg.num_classes)
    counts = counting_metrics(
        count_by_detection(dets, [s.id for s in held], cfg.num_classes, conf), gt_counts(held, cfg.num_classes)
    )
    return ToyResult(rep, counts, stage_matched_iou(held, results, cfg), res.losses, res.seconds,
                     time.perf_counter() - t0)


# -- context ablation -------------------------------------------------------------

ABLATION_FIELDS = ("gcm", "pcm", "hcm", "map_25", "map_50")


def context_combinations() -> list[tuple[bool, bool, bool]]:
    """All eight on/off settings, all-off first."""
    return [tuple(bool(b) for b in bits) for bits in itertools.product((False, True), repeat=3)]


def ablate(train: Sequence[Scene], held: Sequence[Scene], cfg: PipelineConfig) -> list[dict]:
    """Train and evaluate once per context combination, same seed and data each time."""
    rows = []
    for g, p, h in context_combinations():
        c = cfg.replace(enable_gcm=g, enable_pcm=p, enable_hcm=h)
        params = train_toy(train, c).params
        rep = evaluate(detections_of(held, run_detector(params, c, held)), held, c.num_classes)
        rows.append({"gcm": g, "pcm": p, "hcm": h, "map_25": rep.map_25, "map_50": rep.map_50})
    return rows


def ablation_json(rows: list[dict]) -> str:
    off = next(r for r in rows if not (r["gcm"] or r["pcm"] or r["hcm"]))
    on = next(r for r in rows if r["gcm"] and r["pcm"] and r["hcm"])
    doc = {
        "rows": rows,
        "context_delta_map_25": on["map_25"] - off["map_25"],
        "context_delta_map_50": on["map_50"] - off["map_50"],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def ablation_table(rows: list[dict]) -> str:
    mark = lambda b: "x" if b else ""
    header = ["GCM", "PCM", "HCM", "mAP@0.25", "mAP@0.5"]
    body = [[mark(r["gcm"]), mark(r["pcm"]), mark(r["hcm"]), f"{100 * r['map_25']:.2f}", f"{100 * r['map_50']:.2f}"]
            for r in rows]
    widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.center(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(x, widths)))
             for x in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    off, on = rows[0], rows[-1]
    lines.append(f"context on vs off: {100 * (on['map_25'] - off['map_25']):+.2f} mAP@0.25, "
                 f"{100 * (on['map_50'] - off['map_50']):+.2f} mAP@0.5 (informational)")
    return "\n".join(lines) + "\n"
