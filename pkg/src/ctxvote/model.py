"""End-to-end detector: seed encoder, primitive voting, context, proposals, cascade."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .checkpoint import load_arrays, save_arrays
from .config import PipelineConfig, format_config, parse_config
from .context import (
    AttentionParams,
    ContextParams,
    cluster_context,
    geometric_context,
    init_attention,
)
from .geometry import (
    Box3,
    Detection,
    decode_residual_array,
    edge_centers_array,
    encode_residual_array,
    face_centers_array,
    iou_matrix,
)
from .sampling import KINDS, ClusterSet, Kind, PointSet, VoteSet, cluster_votes, farthest_point_sample, generate_votes
from .scenes import Scene
from .tensor import LayerNormParams, LinearParams, Tape, Tensor, init_mlp, mlp_forward

MAX_LOG_SIZE_STEP = 3.0


class InputError(ValueError):
    pass


# -- parameters --------------------------------------------------------------


@dataclass
class StageParams:
    roi: list[LinearParams]
    head: list[LinearParams]


@dataclass
class ModelParams:
    encoder: list[list[LinearParams]]
    seed_mlp: list[LinearParams]
    vote: dict[str, list[LinearParams]]
    gcm: dict[str, AttentionParams]
    cluster_mlp: dict[str, list[LinearParams]]
    pcm: dict[str, AttentionParams]
    hcm: dict[str, list[LinearParams]]
    size_head: list[LinearParams]
    stages: list[StageParams]

    @property
    def context(self) -> ContextParams:
        return ContextParams(self.gcm, self.pcm, self.hcm)

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        _flatten(self, "", out)
        return out

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named_tensors().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.named_tensors()
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ValueError(f"checkpoint mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
        for k, t in own.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"checkpoint array {k} has shape {arrays[k].shape}, expected {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def copy(self) -> "ModelParams":
        clone = _clone(self)
        return clone


def _flatten(obj, prefix: str, out: dict) -> None:
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif isinstance(obj, LayerNormParams):
        _flatten(obj.gain, f"{prefix}.gain", out)
        _flatten(obj.bias, f"{prefix}.bias", out)
    elif isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(v, f"{prefix}.{k}" if prefix else str(k), out)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _flatten(v, f"{prefix}.{i}", out)
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            _flatten(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name, out)


def _clone(obj):
    if isinstance(obj, Tensor):
        return Tensor(obj.data.copy(), obj.requires_grad)
    if isinstance(obj, dict):
        return {k: _clone(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clone(v) for v in obj]
    if dataclasses.is_dataclass(obj):
        return type(obj)(**{f.name: _clone(getattr(obj, f.name)) for f in dataclasses.fields(obj)})
    return obj


def init_params(cfg: PipelineConfig, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d = cfg.feature_dim
    c = cfg.num_classes
    w = cfg.encoder_width
    encoder = [init_mlp(rng, [3, w, w]) for _ in cfg.encoder_radii]
    seed_mlp = init_mlp(rng, [d + 3, d, d]) if cfg.seed_max_pts > 0 else []
    vote = {k.value: init_mlp(rng, [d, cfg.vote_hidden, 3 + d], last_scale=0.1) for k in KINDS}
    gcm = {k.value: init_attention(rng, d, d) for k in KINDS}
    cluster_mlp = {k.value: init_mlp(rng, [d + 3, d, d]) for k in KINDS}
    pcm = {k.value: init_attention(rng, d, d) for k in KINDS}
    hcm = {k.value: init_mlp(rng, [2 * d, d, d], last_scale=0.1) for k in KINDS}
    size_head = init_mlp(rng, [3 * d, cfg.head_hidden, 3], last_scale=0.1)
    stages = [
        StageParams(
            init_mlp(rng, [3, cfg.roi_width, cfg.roi_width]),
            init_mlp(rng, [3 * d + cfg.roi_width + 3, cfg.head_hidden, cfg.head_hidden, 1 + c + 6], last_scale=0.1),
        )
        for _ in cfg.stages
    ]
    return ModelParams(encoder, seed_mlp, vote, gcm, cluster_mlp, pcm, hcm, size_head, stages)


def save_model(path, params: ModelParams, cfg: PipelineConfig) -> None:
    meta = {}
    for line in format_config(cfg).splitlines():
        k, v = (s.strip() for s in line.split("=", 1))
        meta[f"config.{k}"] = v.replace(" ", "")
    save_arrays(path, params.to_arrays(), meta)


def load_model(path, cfg: PipelineConfig | None = None) -> tuple[ModelParams, PipelineConfig]:
    """Load a checkpoint; without ``cfg`` the embedded configuration is used."""
    arrays, meta = load_arrays(path)
    if cfg is None:
        text = "\n".join(f"{k[7:]} = {v}" for k, v in meta.items() if k.startswith("config."))
        cfg = parse_config(text)
    params = init_params(cfg)
    params.load_arrays(arrays)
    return params, cfg


# -- per-scene preparation ----------------------------------------------------


@dataclass
class PreparedScene:
    """Parameter-independent inputs and targets for one scene."""

    scene: Scene
    points: np.ndarray
    seed_xyz: np.ndarray
    neighbourhoods: list[np.ndarray]
    seed_groups: np.ndarray | None  # (S, m) seed indices, nearest first
    seed_offsets: np.ndarray | None  # (S, m, 3) relative positions / radius
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    seed_object: np.ndarray
    vote_targets: dict[str, np.ndarray]


def _seed_objects(seed_xyz: np.ndarray, gt: np.ndarray, margin: float) -> np.ndarray:
    obj = np.full(len(seed_xyz), -1, dtype=np.int64)
    for j in range(len(gt)):
        half = 0.5 * gt[j, 3:] + margin
        inside = (np.abs(seed_xyz - gt[j, :3]) <= half).all(axis=1) & (obj < 0)
        obj[inside] = j
    return obj


def prepare_scene(scene: Scene, cfg: PipelineConfig) -> PreparedScene:
    pts = scene.points
    if len(pts) < cfg.n_seeds:
        raise InputError(f"scene {scene.id} has {len(pts)} points, need at least {cfg.n_seeds}")
    seed_idx = farthest_point_sample(pts, cfg.n_seeds)
    seed_xyz = pts[seed_idx]
    neigh = []
    for r, m in zip(cfg.encoder_radii, cfg.encoder_max_pts):
        idx, cnt = kernels.ball_query(pts, seed_xyz, r, m)
        # every seed is its own neighbour; pad by repeating the nearest point
        idx = np.where(idx >= 0, idx, idx[:, :1])
        neigh.append((pts[idx] - seed_xyz[:, None, :]) / r)
    groups = offsets = None
    if cfg.seed_max_pts > 0:
        groups, _ = kernels.ball_query(seed_xyz, seed_xyz, cfg.seed_radius, cfg.seed_max_pts)
        groups = np.where(groups >= 0, groups, groups[:, :1])
        offsets = (seed_xyz[groups] - seed_xyz[:, None, :]) / cfg.seed_radius
    gt = scene.gt_array
    cls = np.asarray(scene.classes, dtype=np.int64)
    obj = _seed_objects(seed_xyz, gt, cfg.seed_object_margin)
    targets = {k.value: np.zeros_like(seed_xyz) for k in KINDS}
    if len(gt):
        owner = np.maximum(obj, 0)
        targets[Kind.CENTER.value] = gt[owner, :3]
        for kind, prims in ((Kind.FACE, face_centers_array(gt)), (Kind.EDGE, edge_centers_array(gt))):
            cand = prims[owner]  # (S, P, 3)
            d = ((cand - seed_xyz[:, None, :]) ** 2).sum(-1)
            targets[kind.value] = cand[np.arange(len(seed_xyz)), np.argmin(d, axis=1)]
    return PreparedScene(scene, pts, seed_xyz, neigh, groups, offsets, gt, cls, obj, targets)


# -- forward pieces -------------------------------------------------------------


def encode_seeds(tape: Tape, params: ModelParams, prep: PreparedScene) -> PointSet:
    """Per-scale point MLP on relative coordinates, max-pooled, then the same
    grouping once more over neighbouring seeds and their features."""
    parts = []
    for layers, rel in zip(params.encoder, prep.neighbourhoods):
        h = mlp_forward(tape, Tensor(rel), layers)
        pooled, _ = tape.max_pool(h)
        parts.append(pooled)
    feats = parts[0] if len(parts) == 1 else tape.concat(parts)
    if params.seed_mlp:
        grouped = tape.concat([tape.gather(feats, prep.seed_groups), Tensor(prep.seed_offsets)])
        feats, _ = tape.max_pool(mlp_forward(tape, grouped, params.seed_mlp))
    return PointSet(prep.seed_xyz, feats)


@dataclass
class Proposal:
    box: Box3
    features: np.ndarray
    objectness_logit: float
    class_logits: np.ndarray


@dataclass
class ProposalBatch:
    boxes: np.ndarray  # (N, 6) initial boxes
    features: Tensor  # (N, 3 D')
    log_size: Tensor  # (N, 3) size-head output

    def __len__(self) -> int:
        return len(self.boxes)

    def to_list(self, stage: "StageOutput | None" = None) -> list[Proposal]:
        n = len(self.boxes)
        c = stage.class_logits.shape[1] if stage is not None else 0
        boxes = self.boxes if stage is None else stage.boxes
        return [
            Proposal(
                Box3.from_array(boxes[i]),
                self.features.data[i].copy(),
                float(stage.objectness.data[i, 0]) if stage is not None else 0.0,
                stage.class_logits.data[i].copy() if stage is not None else np.zeros(c),
            )
            for i in range(n)
        ]


def nearest_cluster_index(src: np.ndarray, dst: np.ndarray, k: int) -> np.ndarray:
    d = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(-1)
    k = min(k, len(dst))
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def propose(
    tape: Tape,
    clusters: dict[str, ClusterSet],
    context_out: dict[str, Tensor],
    size_head: list[LinearParams],
    cfg: PipelineConfig,
) -> ProposalBatch:
    """One proposal per center cluster, fed by its own and nearby face/edge cluster features."""
    cc = clusters[Kind.CENTER.value]
    feats = [context_out[Kind.CENTER.value]]
    for kind in (Kind.FACE.value, Kind.EDGE.value):
        idx = nearest_cluster_index(cc.centers, clusters[kind].centers, cfg.pool_k)
        pooled, _ = tape.max_pool(tape.gather(context_out[kind], idx))
        feats.append(pooled)
    x = tape.concat(feats)
    log_size = mlp_forward(tape, x, size_head)
    step = np.clip(log_size.data, -MAX_LOG_SIZE_STEP, MAX_LOG_SIZE_STEP)
    size = np.asarray(cfg.anchor_size) * np.exp(step)
    boxes = np.concatenate([cc.centers, size], axis=1)
    return ProposalBatch(boxes, x, log_size)


@dataclass
class StageOutput:
    input_boxes: np.ndarray
    objectness: Tensor  # (N, 1) logits
    class_logits: Tensor  # (N, C)
    residual: Tensor  # (N, 6)
    boxes: np.ndarray  # refined boxes

    @property
    def scores(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.objectness.data[:, 0]))

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.class_logits.data, axis=1)


def roi_inputs(points: np.ndarray, boxes: np.ndarray, expand: float, max_pts: int) -> tuple[np.ndarray, np.ndarray]:
    """Points around each box in box-normalised coordinates, with a validity mask."""
    idx, cnt = kernels.points_in_boxes(points, boxes, expand, max_pts)
    mask = np.arange(max_pts)[None, :] < cnt[:, None]
    rel = (points[np.maximum(idx, 0)] - boxes[:, None, :3]) / boxes[:, None, 3:]
    return np.where(mask[..., None], rel, 0.0), mask


def run_stage(
    tape: Tape, sp: StageParams, features: Tensor, boxes: np.ndarray, points: np.ndarray, cfg: PipelineConfig
) -> StageOutput:
    rel, mask = roi_inputs(points, boxes, cfg.roi_expand, cfg.roi_max_pts)
    h = mlp_forward(tape, Tensor(rel), sp.roi)
    roi, _ = tape.max_pool(h, mask)
    # RoI coordinates are size-normalised, so the box's own log-size rides along
    log_size = Tensor(np.log(boxes[:, 3:]))
    out = mlp_forward(tape, tape.concat([features, roi, log_size]), sp.head)
    c = cfg.num_classes
    obj = tape.slice(out, 0, 1)
    cls = tape.slice(out, 1, 1 + c)
    res = tape.slice(out, 1 + c, 7 + c)
    r = res.data.copy()
    r[:, 3:] = np.clip(r[:, 3:], -MAX_LOG_SIZE_STEP, MAX_LOG_SIZE_STEP)
    return StageOutput(boxes, obj, cls, res, decode_residual_array(r, boxes))


def stage_detections(stage: StageOutput, nms_iou: float) -> list[Detection]:
    scores = stage.scores
    labels = stage.labels
    keep = kernels.nms(stage.boxes, scores, labels, nms_iou)
    return [Detection(Box3.from_array(stage.boxes[i]), int(labels[i]), float(scores[i])) for i in keep]


def baseline_head(
    tape: Tape, props: ProposalBatch, sp: StageParams, points: np.ndarray, cfg: PipelineConfig
) -> tuple[list[Detection], StageOutput]:
    """Single classification + refinement step, no cascade."""
    out = run_stage(tape, sp, props.features, props.boxes, points, cfg)
    return stage_detections(out, cfg.nms_iou), out


def refine_cascade(
    tape: Tape,
    props: ProposalBatch,
    stages: list[StageParams],
    points: np.ndarray,
    cfg: PipelineConfig,
) -> tuple[list[Detection], list[StageOutput]]:
    """Each stage re-pools points around the previous stage's boxes and refines them."""
    if len(stages) != len(cfg.stages):
        raise ValueError(f"{len(stages)} stage heads for {len(cfg.stages)} thresholds")
    boxes = props.boxes
    outs = []
    for sp in stages:
        o = run_stage(tape, sp, props.features, boxes, points, cfg)
        outs.append(o)
        boxes = o.boxes
    return stage_detections(outs[-1], cfg.nms_iou), outs


@dataclass
class Assignment:
    positive: np.ndarray  # bool (N,)
    gt_index: np.ndarray  # (N,), -1 where no GT overlaps
    max_iou: np.ndarray
    labels: np.ndarray  # class of the assigned GT, -1 for negatives
    targets: np.ndarray  # (N, 6) encoded residual, zeros for negatives


def assign_targets(
    boxes: np.ndarray, gt_boxes: np.ndarray, u: float, gt_classes: np.ndarray | None = None
) -> Assignment:
    """Positive iff best IoU with any GT is >= ``u``; ties go to the lowest GT index."""
    if not 0.0 < u < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {u}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    n = len(boxes)
    if len(gt_boxes) == 0:
        return Assignment(
            np.zeros(n, bool), np.full(n, -1), np.zeros(n), np.full(n, -1), np.zeros((n, 6))
        )
    iou = iou_matrix(boxes, gt_boxes)
    gi = np.argmax(iou, axis=1)
    best = iou[np.arange(n), gi]
    pos = best >= u
    gi = np.where(best > 0, gi, -1)
    cls = np.zeros(len(gt_boxes), dtype=np.int64) if gt_classes is None else np.asarray(gt_classes)
    labels = np.where(pos, cls[np.maximum(gi, 0)], -1)
    targets = np.zeros((n, 6))
    if pos.any():
        targets[pos] = encode_residual_array(gt_boxes[gi[pos]], boxes[pos])
    return Assignment(pos, gi, best, labels, targets)


# -- whole forward pass --------------------------------------------------------


@dataclass
class ForwardResult:
    seeds: PointSet
    votes: dict[str, VoteSet]
    clusters: dict[str, ClusterSet]
    context: dict[str, Tensor]
    proposals: ProposalBatch
    stages: list[StageOutput]
    detections: list[Detection] = field(default_factory=list)


def cluster_members(tape: Tape, votes: VoteSet, clusters: ClusterSet, radius: float, width: int) -> tuple[Tensor, np.ndarray]:
    """Per-vote inputs ``[feature; (vote - center) / radius]`` as ``(N, width, D + 3)``."""
    idx, mask = clusters.padded(width)
    f = tape.gather(votes.features, idx)
    rel = tape.scale(tape.sub(tape.gather(votes.votes, idx), Tensor(clusters.centers[:, None, :])), 1.0 / radius)
    return tape.concat([f, rel]), mask


def forward(
    tape: Tape,
    params: ModelParams,
    cfg: PipelineConfig,
    prep: PreparedScene,
    extra_boxes: np.ndarray | None = None,
) -> ForwardResult:
    """Full detector pass.

    ``extra_boxes`` (training only) are appended to the proposals before the
    cascade, each borrowing the features of the nearest proposal; their stage
    outputs follow the regular rows.
    """
    ccfg = cfg.context()
    seeds = encode_seeds(tape, params, prep)
    votes, clusters, ctx = {}, {}, {}
    for kind in KINDS:
        k = kind.value
        raw = generate_votes(tape, seeds, params.vote[k], kind)
        # GCM acts on the primitive feature map; vote positions come from the raw head
        v = VoteSet(raw.origins, raw.votes, geometric_context(tape, raw.features, params.gcm[k], ccfg), kind)
        cl = cluster_votes(v, cfg.n_clusters, cfg.cluster_radius, cfg.cluster_max_pts)
        members, mask = cluster_members(tape, v, cl, cfg.cluster_radius, cfg.cluster_max_pts)
        emb = mlp_forward(tape, members, params.cluster_mlp[k])
        ctx[k] = cluster_context(tape, emb, mask, raw.features, k, params.context, ccfg)
        cl.features = ctx[k]
        votes[k], clusters[k] = v, cl
    props = propose(tape, clusters, ctx, params.size_head, cfg)
    run = props
    if extra_boxes is not None and len(extra_boxes):
        near = nearest_cluster_index(extra_boxes[:, :3], props.boxes[:, :3], 1)[:, 0]
        feats = tape.concat([props.features, tape.gather(props.features, near)], axis=0)
        run = ProposalBatch(np.concatenate([props.boxes, extra_boxes]), feats, props.log_size)
    dets, stages = refine_cascade(tape, run, params.stages, prep.points, cfg)
    return ForwardResult(seeds, votes, clusters, ctx, props, stages, dets)


def detect(params: ModelParams, cfg: PipelineConfig, scene: Scene) -> list[Detection]:
    return forward(Tape(record=False), params, cfg, prepare_scene(scene, cfg)).detections
