"""Point-set sampling, neighbourhoods, voting and vote clustering."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import kernels
from .tensor import LinearParams, Tape, Tensor, mlp_forward


class Kind(str, Enum):
    CENTER = "center"
    FACE = "face"
    EDGE = "edge"


KINDS = (Kind.CENTER, Kind.FACE, Kind.EDGE)


@dataclass
class PointSet:
    positions: np.ndarray  # (n, 3)
    features: Tensor | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) < 1:
            raise ValueError("PointSet needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("PointSet positions must be finite")
        if self.features is not None and self.features.shape[0] != len(self.positions):
            raise ValueError(
                f"feature rows ({self.features.shape[0]}) must equal point count ({len(self.positions)})"
            )

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class VoteSet:
    origins: np.ndarray  # (m, 3)
    votes: Tensor  # (m, 3), differentiable in the head
    features: Tensor  # (m, D)
    kind: Kind

    @property
    def positions(self) -> np.ndarray:
        return self.votes.data

    def __len__(self) -> int:
        return len(self.origins)


@dataclass
class ClusterSet:
    centers: np.ndarray  # (N, 3)
    member_indices: list[np.ndarray]
    center_indices: np.ndarray  # vote index chosen as each center
    features: Tensor | None = None

    def __post_init__(self):
        if len(self.member_indices) < 1:
            raise ValueError("ClusterSet needs at least one cluster")
        if any(len(m) == 0 for m in self.member_indices):
            raise ValueError("every cluster must have at least one member")

    def __len__(self) -> int:
        return len(self.member_indices)

    def padded(self, width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Members as a dense ``(N, width)`` index array plus validity mask.

        Membership has set semantics: a repeated index counts once, keeping
        its first position. Padding slots point at the cluster's first member.
        """
        uniq = []
        for m in self.member_indices:
            _, first = np.unique(m, return_index=True)
            uniq.append(np.asarray(m)[np.sort(first)])
        width = width or max(len(u) for u in uniq)
        idx = np.empty((len(uniq), width), dtype=np.int64)
        mask = np.zeros((len(uniq), width), dtype=bool)
        for i, u in enumerate(uniq):
            u = u[:width]
            idx[i, : len(u)] = u
            idx[i, len(u):] = u[0]
            mask[i, : len(u)] = True
        return idx, mask


def farthest_point_sample(p: PointSet | np.ndarray, k: int) -> np.ndarray:
    """Greedy max-min subset starting at index 0, in selection order."""
    pos = p.positions if isinstance(p, PointSet) else np.asarray(p, dtype=np.float64).reshape(-1, 3)
    n = len(pos)
    if not 1 <= k <= n:
        raise ValueError(f"farthest_point_sample needs 1 <= k <= n, got k={k}, n={n}")
    return kernels.farthest_point_sample(pos, k)


def ball_query_padded(
    p: PointSet | np.ndarray, centers: np.ndarray, radius: float, max_pts: int
) -> tuple[np.ndarray, np.ndarray]:
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if max_pts < 1:
        raise ValueError(f"max_pts must be >= 1, got {max_pts}")
    pos = p.positions if isinstance(p, PointSet) else np.asarray(p, dtype=np.float64).reshape(-1, 3)
    return kernels.ball_query(pos, np.asarray(centers, dtype=np.float64).reshape(-1, 3), radius, max_pts)


def ball_query(p: PointSet | np.ndarray, centers: np.ndarray, radius: float, max_pts: int) -> list[np.ndarray]:
    """Per center, up to ``max_pts`` indices within ``radius``, nearest first (ties by index)."""
    idx, cnt = ball_query_padded(p, centers, radius, max_pts)
    return [idx[j, : cnt[j]].copy() for j in range(len(cnt))]


def generate_votes(tape: Tape, seeds: PointSet, head: Sequence[LinearParams], kind: Kind) -> VoteSet:
    """Offsets from the first three head outputs; remaining outputs add to the features.

    With a head of width exactly 3 the seed features pass through unchanged.
    """
    if seeds.features is None:
        raise RuntimeError("generate_votes needs seed features")
    out = mlp_forward(tape, seeds.features, head)
    d = seeds.features.shape[1]
    offset = tape.slice(out, 0, 3)
    votes = tape.add(offset, Tensor(seeds.positions))
    width = out.shape[1]
    if width == 3:
        feats = seeds.features
    elif width == 3 + d:
        feats = tape.add(seeds.features, tape.slice(out, 3, 3 + d))
    else:
        raise ValueError(f"vote head must output 3 or 3+{d} columns, got {width}")
    return VoteSet(seeds.positions, votes, feats, kind)


def cluster_votes(v: VoteSet | np.ndarray, n_clusters: int, radius: float, max_pts: int = 16) -> ClusterSet:
    """FPS over vote positions picks centers; a ball query collects members.

    The center vote is always a member and listed first.
    """
    pos = v.positions if isinstance(v, VoteSet) else np.asarray(v, dtype=np.float64).reshape(-1, 3)
    if n_clusters > len(pos):
        raise ValueError(f"cannot form {n_clusters} clusters from {len(pos)} votes")
    centers_idx = farthest_point_sample(pos, n_clusters)
    centers = pos[centers_idx]
    idx, cnt = ball_query_padded(pos, centers, radius, max_pts)
    members = []
    for j, c in enumerate(centers_idx):
        row = idx[j, : cnt[j]]
        row = row[row != c]
        members.append(np.concatenate([[c], row])[:max_pts].astype(np.int64))
    return ClusterSet(centers.copy(), members, centers_idx)
