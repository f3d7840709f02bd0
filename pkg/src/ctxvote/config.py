"""Flat ``key = value`` configuration for the detector and its training.

Unknown keys are rejected. Lists are comma separated; booleans accept
``true/false/1/0/yes/no``. ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .context import ContextConfig


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    seed: int = 0
    num_classes: int = 4

    # seeds and backbone encoder
    n_seeds: int = 256
    encoder_radii: tuple[float, ...] = (0.3, 0.8)
    encoder_max_pts: tuple[int, ...] = (16, 32)
    encoder_width: int = 32  # per scale; feature dim = width * number of scales
    seed_radius: float = 1.2  # second grouping over the seeds themselves
    seed_max_pts: int = 16  # 0 disables it

    # voting and clustering
    vote_hidden: int = 64
    n_clusters: int = 32
    cluster_radius: float = 0.3
    cluster_max_pts: int = 16
    pool_k: int = 4  # nearest face / edge clusters pooled into each proposal

    # context modules
    enable_gcm: bool = True
    enable_pcm: bool = True
    enable_hcm: bool = True
    attention_scale: float = 0.0  # 0 -> 1/sqrt(D')
    pcm_across_clusters: bool = False

    # proposals and cascade
    anchor_size: tuple[float, ...] = (1.0, 1.0, 1.0)
    stages: tuple[float, ...] = (0.5, 0.55, 0.6)
    roi_expand: float = 1.4
    roi_max_pts: int = 48
    roi_width: int = 64
    head_hidden: int = 128
    nms_iou: float = 0.25

    # training
    epochs: int = 15
    batch_size: int = 4
    lr: float = 2e-3
    lr_decay_epochs: tuple[int, ...] = (10, 13)
    lr_decay_rate: float = 0.1
    weight_decay: float = 0.0
    huber_beta: float = 0.1
    w_vote: float = 1.0
    w_size: float = 1.0
    w_obj: float = 1.0
    obj_pos_weight: float = 10.0  # weight of positive rows in the objectness loss
    w_cls: float = 0.5
    w_reg: float = 1.0
    seed_object_margin: float = 0.05
    # jittered copies of each GT box added to the cascade's training proposals
    gt_jitter_copies: int = 4
    gt_jitter_center: float = 0.1  # std, as a fraction of the box size
    gt_jitter_log_size: float = 0.15

    def __post_init__(self):
        if len(self.encoder_radii) != len(self.encoder_max_pts) or not self.encoder_radii:
            raise ConfigError("encoder_radii and encoder_max_pts must be non-empty and of equal length")
        u = list(self.stages)
        if not u or any(not 0.0 < x < 1.0 for x in u) or any(b <= a for a, b in zip(u, u[1:])):
            raise ConfigError(f"stages must be strictly ascending values in (0, 1), got {u}")
        if len(self.anchor_size) != 3 or min(self.anchor_size) <= 0:
            raise ConfigError("anchor_size needs three positive values")
        if self.n_clusters < 1 or self.n_seeds < 1 or self.num_classes < 1:
            raise ConfigError("n_clusters, n_seeds and num_classes must be positive")
        if self.n_clusters > self.n_seeds:
            raise ConfigError("n_clusters cannot exceed n_seeds")

    @property
    def feature_dim(self) -> int:
        return self.encoder_width * len(self.encoder_radii)

    def context(self) -> ContextConfig:
        return ContextConfig(
            self.enable_gcm,
            self.enable_pcm,
            self.enable_hcm,
            self.attention_scale if self.attention_scale > 0 else None,
            self.pcm_across_clusters,
        )

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


def _coerce(tp, raw: str, key: str):
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            inner = typing.get_args(tp)[0]
            return tuple(_coerce(inner, r.strip(), key) for r in raw.split(",") if r.strip())
        if tp is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return tp(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


NAMESPACES = ("synth",)


def parse_config(text: str, cls=None, base=None, namespace: str = ""):
    """Parse ``key = value`` lines into ``cls`` (default :class:`PipelineConfig`).

    Keys of the form ``ns.key`` belong to namespace ``ns`` and are skipped
    unless ``namespace == ns``; plain keys belong to the empty namespace.
    """
    cls = cls or PipelineConfig
    types = _types(cls)
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        ns, _, bare = key.rpartition(".")
        if ns and ns not in NAMESPACES:
            raise ConfigError(f"line {lineno}: unknown namespace {ns!r}")
        if ns != namespace:
            continue
        key = bare
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(types[key], raw, key)
    if base is not None:
        return dataclasses.replace(base, **values)
    return cls(**values)


def load_config(path, cls=None, namespace: str = ""):
    return parse_config(Path(path).read_text(encoding="utf-8"), cls, namespace=namespace)


def format_config(cfg, namespace: str = "") -> str:
    pre = f"{namespace}." if namespace else ""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            s = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, float):
            s = repr(v)
        else:
            s = str(v)
        lines.append(f"{pre}{f.name} = {s}")
    return "\n".join(lines) + "\n"
