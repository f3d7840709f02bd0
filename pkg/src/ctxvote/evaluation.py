"""Detection AP/mAP and counting-by-detection errors."""

from __future__ import annotations

import json
import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import Detection, iou_matrix
from .scenes import Scene

DEFAULT_CLASS_NAMES = ("table", "chair", "bed", "cabinet")


class EvaluationError(ValueError):
    pass


def class_names(num_classes: int) -> list[str]:
    if num_classes <= len(DEFAULT_CLASS_NAMES):
        return list(DEFAULT_CLASS_NAMES[:num_classes])
    return [f"class{c}" for c in range(num_classes)]


@dataclass
class ClassMatches:
    """Ranked detections of one class: scores (descending) and TP flags."""

    scores: np.ndarray
    tp: np.ndarray
    gt_count: int


def _check_ids(dets: Mapping[str, list], scenes: Sequence[Scene]) -> None:
    known = {s.id for s in scenes}
    unknown = sorted(set(dets) - known)
    if unknown:
        raise EvaluationError(f"predictions reference unknown scene ids: {', '.join(unknown)}")


def match_detections(
    dets: Mapping[str, list[Detection]], scenes: Sequence[Scene], iou_thresh: float, num_classes: int
) -> dict[int, ClassMatches]:
    """Greedy score-ordered matching, each GT used at most once.

    Detections are visited by descending score, then scene id, then their
    index in the scene's list; each takes the unmatched same-class GT with
    the highest IoU at or above ``iou_thresh`` (lowest GT index on ties).
    """
    _check_ids(dets, scenes)
    gt = {s.id: (s.gt_array, np.asarray(s.classes, dtype=np.int64)) for s in scenes}
    out = {}
    for c in range(num_classes):
        items = []
        for sid, dl in dets.items():
            for i, d in enumerate(dl):
                if d.class_id == c:
                    items.append((-d.objectness, sid, i, d))
        items.sort(key=lambda t: t[:3])
        used = {sid: np.zeros(len(g[1]), dtype=bool) for sid, g in gt.items()}
        ious = {}
        for sid, dl in dets.items():
            boxes, cls = gt[sid]
            if len(dl) and len(cls):
                ious[sid] = iou_matrix(np.stack([d.box.to_array() for d in dl]), boxes)
        tp = np.zeros(len(items), dtype=bool)
        for r, (_, sid, i, _d) in enumerate(items):
            boxes, cls = gt[sid]
            if sid not in ious:
                continue
            cand = ious[sid][i].copy()
            cand[(cls != c) | used[sid]] = -1.0
            j = int(np.argmax(cand)) if len(cand) else -1
            if j >= 0 and cand[j] >= iou_thresh:
                used[sid][j] = True
                tp[r] = True
        gcount = int(sum(int((g[1] == c).sum()) for g in gt.values()))
        out[c] = ClassMatches(np.array([-t[0] for t in items]), tp, gcount)
    return out


def pr_curve(tp: np.ndarray, gt_count: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.asarray(tp, dtype=bool)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / gt_count if gt_count > 0 else np.zeros(len(tp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def average_precision(tp: Sequence[bool], gt_count: int) -> float:
    """Area under the precision envelope of a ranked TP/FP list.

    Recall rises by ``1/gt_count`` at every TP, so the area is the mean of
    the envelope over TP ranks. The sum is formed in exact rationals and
    rounded once. Returns NaN when ``gt_count`` is zero (the class is left
    out of mAP).
    """
    if gt_count < 0:
        raise ValueError("gt_count must be non-negative")
    if gt_count == 0:
        return math.nan
    flags = [bool(f) for f in tp]
    prec = []
    hits = 0
    for rank, f in enumerate(flags, 1):
        hits += f
        prec.append(Fraction(hits, rank))
    area = Fraction(0)
    best = Fraction(0)
    for p, f in zip(reversed(prec), reversed(flags)):
        best = max(best, p)
        if f:
            area += best
    return float(area / gt_count)


@dataclass
class EvalReport:
    per_class_ap: dict[str, dict[int, float]]
    map_25: float
    map_50: float
    pr_curves: dict[str, dict[int, list[tuple[float, float]]]]
    num_classes: int
    excluded_classes: dict[str, list[int]] = field(default_factory=dict)

    def to_json(self) -> str:
        names = class_names(self.num_classes)
        doc = {
            "map_25": self.map_25,
            "map_50": self.map_50,
            "per_class_ap": {
                t: {names[c]: (None if math.isnan(v) else v) for c, v in aps.items()}
                for t, aps in self.per_class_ap.items()
            },
            "excluded_classes": {t: [names[c] for c in cs] for t, cs in self.excluded_classes.items()},
            "pr_curves": {
                t: {names[c]: [[r, p] for r, p in pts] for c, pts in curves.items()}
                for t, curves in self.pr_curves.items()
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _mean(values: list[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else 0.0


def evaluate(
    dets: Mapping[str, list[Detection]],
    scenes: Sequence[Scene],
    num_classes: int,
    thresholds: Sequence[float] = (0.25, 0.5),
) -> EvalReport:
    per, curves, excluded = {}, {}, {}
    for t in thresholds:
        key = f"{t:g}"
        m = match_detections(dets, scenes, t, num_classes)
        per[key] = {c: average_precision(cm.tp, cm.gt_count) for c, cm in m.items()}
        excluded[key] = [c for c, v in per[key].items() if math.isnan(v)]
        curves[key] = {}
        for c, cm in m.items():
            r, p = pr_curve(cm.tp, cm.gt_count)
            curves[key][c] = [(float(a), float(b)) for a, b in zip(r, p)]
    maps = {k: _mean(list(v.values())) for k, v in per.items()}
    return EvalReport(per, maps.get("0.25", math.nan), maps.get("0.5", math.nan), curves, num_classes, excluded)


# -- counting -------------------------------------------------------------------


def count_by_detection(
    dets: Mapping[str, list[Detection]], scene_ids: Sequence[str], num_classes: int, conf: float = 0.95
) -> np.ndarray:
    """``(scenes, classes)`` counts of detections with objectness >= ``conf``."""
    if not 0.0 < conf < 1.0:
        raise ValueError(f"conf must lie in (0, 1), got {conf}")
    unknown = sorted(set(dets) - set(scene_ids))
    if unknown:
        raise EvaluationError(f"predictions reference unknown scene ids: {', '.join(unknown)}")
    p = np.zeros((len(scene_ids), num_classes), dtype=np.int64)
    for i, sid in enumerate(scene_ids):
        for d in dets.get(sid, []):
            if d.objectness >= conf:
                p[i, d.class_id] += 1
    return p


def gt_counts(scenes: Sequence[Scene], num_classes: int) -> np.ndarray:
    g = np.zeros((len(scenes), num_classes), dtype=np.int64)
    for i, s in enumerate(scenes):
        for c in s.classes:
            g[i, c] += 1
    return g


@dataclass
class CountReport:
    per_class: dict[int, tuple[float, float, float, float]]  # rmse, nz_rmse, rrmse, nz_rrmse
    m_rmse: float
    m_nz_rmse: float
    m_rrmse: float
    m_nz_rrmse: float

    def to_json(self, num_classes: int | None = None) -> str:
        names = class_names(num_classes or len(self.per_class))
        doc = {
            "m_rmse": self.m_rmse,
            "m_nz_rmse": self.m_nz_rmse,
            "m_rrmse": self.m_rrmse,
            "m_nz_rrmse": self.m_nz_rrmse,
            "per_class": {
                names[c]: dict(zip(("rmse", "nz_rmse", "rrmse", "nz_rrmse"), v)) for c, v in self.per_class.items()
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _rms(x: np.ndarray) -> float:
    return math.sqrt(math.fsum(x.tolist()) / len(x)) if len(x) else 0.0


def counting_metrics(p: np.ndarray, g: np.ndarray) -> CountReport:
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2:
        raise ValueError(f"count grids must share a 2-D shape, got {p.shape} and {g.shape}")
    if (g < 0).any():
        raise ValueError("ground-truth counts must be non-negative")
    per = {}
    for c in range(p.shape[1]):
        sq = (p[:, c] - g[:, c]) ** 2
        rel = sq / (g[:, c] + 1.0)
        nz = g[:, c] > 0
        per[c] = (_rms(sq), _rms(sq[nz]), _rms(rel), _rms(rel[nz]))
    cols = list(zip(*per.values())) if per else [(), (), (), ()]
    m = [math.fsum(col) / len(col) if col else 0.0 for col in cols]
    return CountReport(per, *m)


# -- text tables ----------------------------------------------------------------


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]) + "\n"


def _pct(v: float) -> str:
    return "-" if math.isnan(v) else f"{100 * v:.2f}"


def ap_table(reports: Mapping[str, EvalReport], threshold: str = "0.25") -> str:
    """Classes as columns, methods as rows, mAP last."""
    first = next(iter(reports.values()))
    names = class_names(first.num_classes)
    rows = []
    for method, rep in reports.items():
        aps = rep.per_class_ap[threshold]
        m = rep.map_25 if threshold == "0.25" else rep.map_50
        rows.append([method] + [_pct(aps[c]) for c in range(len(names))] + [_pct(m)])
    return f"AP @ IoU {threshold}\n" + _table(["Method"] + names + ["mAP"], rows)


def count_table(reports: Mapping[str, CountReport]) -> str:
    rows = [
        [m, f"{r.m_rmse:.4f}", f"{r.m_nz_rmse:.4f}", f"{r.m_rrmse:.4f}", f"{r.m_nz_rrmse:.4f}"]
        for m, r in reports.items()
    ]
    return _table(["Method", "m-RMSE", "m-nz-RMSE", "m-rRMSE", "m-nz-rRMSE"], rows)
