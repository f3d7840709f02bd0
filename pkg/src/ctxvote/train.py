"""Losses, Adam and the toy training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import PipelineConfig
from .geometry import Box3
from .model import (
    ForwardResult,
    ModelParams,
    PreparedScene,
    assign_targets,
    forward,
    init_params,
    prepare_scene,
)
from .sampling import KINDS, Kind
from .scenes import Scene
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, msg: str):
        super().__init__(f"epoch {epoch}: {msg}")
        self.epoch = epoch


def _size_targets(centers: np.ndarray, gt: np.ndarray, anchor: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """GT log-size for proposals whose center falls inside a GT box (grown by 25%)."""
    w = np.zeros(len(centers))
    t = np.zeros((len(centers), 3))
    for j in range(len(gt)):
        inside = (np.abs(centers - gt[j, :3]) <= 0.625 * gt[j, 3:]).all(axis=1) & (w == 0)
        w[inside] = 1.0
        t[inside] = np.log(gt[j, 3:] / anchor)
    return t, w


def jitter_boxes(rng: np.random.Generator, gt: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """``cfg.gt_jitter_copies`` perturbed copies of every GT box."""
    k = cfg.gt_jitter_copies
    if k <= 0 or len(gt) == 0:
        return np.zeros((0, 6))
    base = np.repeat(gt, k, axis=0)
    out = base.copy()
    out[:, :3] += rng.normal(0.0, cfg.gt_jitter_center, size=(len(base), 3)) * base[:, 3:]
    out[:, 3:] *= np.exp(rng.normal(0.0, cfg.gt_jitter_log_size, size=(len(base), 3)))
    return out


def scene_loss(
    tape: Tape,
    params: ModelParams,
    cfg: PipelineConfig,
    prep: PreparedScene,
    extra_boxes: np.ndarray | None = None,
) -> tuple[Tensor, dict[str, float], ForwardResult]:
    """Total loss of one scene and its named parts."""
    res = forward(tape, params, cfg, prep, extra_boxes)
    beta = cfg.huber_beta
    parts: dict[str, Tensor] = {}
    on_object = (prep.seed_object >= 0).astype(np.float64)
    vote_terms = [
        tape.smooth_l1(res.votes[k.value].votes, prep.vote_targets[k.value], on_object, beta) for k in KINDS
    ]
    parts["vote"] = tape.scale(_total(tape, vote_terms), cfg.w_vote)

    anchor = np.asarray(cfg.anchor_size)
    t, w = _size_targets(res.clusters[Kind.CENTER.value].centers, prep.gt_boxes, anchor)
    parts["size"] = tape.scale(tape.smooth_l1(res.proposals.log_size, t, w, beta), cfg.w_size)

    for s, (u, st) in enumerate(zip(cfg.stages, res.stages)):
        a = assign_targets(st.input_boxes, prep.gt_boxes, u, prep.gt_classes)
        pos = a.positive.astype(np.float64)
        obj = tape.bce_with_logits(st.objectness, pos[:, None], np.where(pos, cfg.obj_pos_weight, 1.0)[:, None])
        cls = tape.cross_entropy(st.class_logits, np.maximum(a.labels, 0), pos)
        reg = tape.smooth_l1(st.residual, a.targets, pos, beta)
        parts[f"stage{s}"] = _total(
            tape, [tape.scale(obj, cfg.w_obj), tape.scale(cls, cfg.w_cls), tape.scale(reg, cfg.w_reg)]
        )
    total = _total(tape, list(parts.values()))
    return total, {k: float(v.data) for k, v in parts.items()}, res


def _total(tape: Tape, terms: Sequence[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = tape.add(acc, t)
    return acc


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)

    def step(self, tensors: Sequence[Tensor], scale: float = 1.0) -> None:
        """Update every tensor that holds a gradient; ``scale`` multiplies the gradient."""
        self.step_count += 1
        b1t = 1.0 - self.beta1**self.step_count
        b2t = 1.0 - self.beta2**self.step_count
        for i, t in enumerate(tensors):
            if t.grad is None:
                continue
            g = t.grad * scale
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            m = self.m.get(i)
            if m is None:
                m = self.m[i] = np.zeros_like(t.data)
                self.v[i] = np.zeros_like(t.data)
            v = self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data = t.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]
    parts: list[dict[str, float]]
    seconds: float


def learning_rate(cfg: PipelineConfig, epoch: int) -> float:
    lr = cfg.lr
    for e in cfg.lr_decay_epochs:
        if epoch >= e:
            lr *= cfg.lr_decay_rate
    return lr


def train_toy(
    scenes: Sequence[Scene],
    cfg: PipelineConfig,
    params: ModelParams | None = None,
    progress: Callable[[int, float, dict], None] | None = None,
) -> TrainResult:
    """Minimise the summed detection losses with Adam over mini-batches of scenes.

    Deterministic for a given ``cfg.seed``: initialisation and the per-epoch
    scene order both derive from it.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    t0 = time.perf_counter()
    params = params or init_params(cfg)
    tensors = list(params.named_tensors().values())
    preps = [prepare_scene(s, cfg) for s in scenes]
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(cfg.lr, weight_decay=cfg.weight_decay)
    losses, parts_log = [], []
    for epoch in range(cfg.epochs):
        opt.lr = learning_rate(cfg, epoch)
        order = rng.permutation(len(preps))
        total, count = 0.0, 0
        acc: dict[str, float] = {}
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0 : b0 + cfg.batch_size]
            for t in tensors:
                t.grad = None
            for i in batch:
                tape = Tape()
                extra = jitter_boxes(rng, preps[i].gt_boxes, cfg)
                loss, parts, _ = scene_loss(tape, params, cfg, preps[i], extra)
                if not np.isfinite(loss.data):
                    raise TrainingError(epoch, f"non-finite loss on scene {scenes[i].id}")
                tape.backward(loss)
                total += float(loss.data)
                count += 1
                for k, v in parts.items():
                    acc[k] = acc.get(k, 0.0) + v
            opt.step(tensors, 1.0 / len(batch))
        mean = total / count
        losses.append(mean)
        parts_log.append({k: v / count for k, v in acc.items()})
        log.info("epoch %d loss %.4f %s", epoch, mean, parts_log[-1])
        if progress is not None:
            progress(epoch, mean, parts_log[-1])
    for t in tensors:
        t.grad = None
    return TrainResult(params, losses, parts_log, time.perf_counter() - t0)
