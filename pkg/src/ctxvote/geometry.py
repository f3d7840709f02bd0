"""Axis-aligned 3D boxes: primitive targets, IoU, NMS and residual coding.

Boxes are stored as ``center`` + ``size`` (``w`` along x, ``l`` along y,
``h`` along z). Array helpers use ``(n, 6)`` rows ``cx cy cz w l h``.

Edge-center order: the four edges parallel to x, then y, then z. Within one
axis the two remaining axes ``(b, c)`` (in x, y, z order) take the sign
pairs ``(-,-) (+,-) (-,+) (+,+)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class Box3:
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise ValueError("Box3 needs 3 center and 3 size components")
        if not all(math.isfinite(v) for v in c + s):
            raise ValueError(f"Box3 has non-finite coordinates: {c}, {s}")
        if not all(v > 0 for v in s):
            raise ValueError(f"Box3 size components must be positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)

    @classmethod
    def from_array(cls, row) -> "Box3":
        return cls(tuple(row[:3]), tuple(row[3:6]))

    def to_array(self) -> np.ndarray:
        return np.array(self.center + self.size)

    @property
    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    def corners(self) -> np.ndarray:
        """The 8 corners; corner ``k`` has sign ``+`` on axis ``a`` iff bit ``a`` of ``k`` is set."""
        c = np.array(self.center)
        half = 0.5 * np.array(self.size)
        signs = np.array([[1 if (k >> a) & 1 else -1 for a in range(3)] for k in range(8)])
        return c + signs * half


@dataclass(frozen=True)
class BoxResidual:
    d_center: tuple[float, float, float]
    d_size: tuple[float, float, float]

    def to_array(self) -> np.ndarray:
        return np.array(self.d_center + self.d_size)


@dataclass(frozen=True)
class Detection:
    box: Box3
    class_id: int
    objectness: float

    def __post_init__(self):
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness must lie in [0, 1], got {self.objectness}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")


_FACE_DIRS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64
)


def _edge_dirs() -> np.ndarray:
    rows = []
    for axis in range(3):
        b, c = [a for a in range(3) if a != axis]
        for sc in (-1, 1):
            for sb in (-1, 1):
                r = [0.0, 0.0, 0.0]
                r[b], r[c] = sb, sc
                rows.append(r)
    return np.array(rows)


_EDGE_DIRS = _edge_dirs()


def face_centers(b: Box3) -> np.ndarray:
    """``(6, 3)`` face centroids in order +x, -x, +y, -y, +z, -z."""
    return np.array(b.center) + _FACE_DIRS * (0.5 * np.array(b.size))


def edge_centers(b: Box3) -> np.ndarray:
    """``(12, 3)`` edge midpoints in the module's canonical order."""
    return np.array(b.center) + _EDGE_DIRS * (0.5 * np.array(b.size))


def face_centers_array(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    return boxes[:, None, :3] + _FACE_DIRS[None] * (0.5 * boxes[:, None, 3:])


def edge_centers_array(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    return boxes[:, None, :3] + _EDGE_DIRS[None] * (0.5 * boxes[:, None, 3:])


def iou3d(a: Box3, b: Box3) -> float:
    return float(kernels.iou_matrix(a.to_array(), b.to_array())[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return kernels.iou_matrix(a, b)


def boxes_to_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 6))
    return np.stack([b.to_array() for b in boxes])


def nms(dets: list[Detection], iou_thresh: float = 0.25) -> list[Detection]:
    """Greedy per-class suppression in (objectness desc, input index asc) order."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1], got {iou_thresh}")
    if not dets:
        return []
    keep = kernels.nms(
        boxes_to_array([d.box for d in dets]),
        np.array([d.objectness for d in dets]),
        np.array([d.class_id for d in dets]),
        iou_thresh,
    )
    return [dets[i] for i in keep]


def encode_residual(gt: Box3, anchor: Box3) -> BoxResidual:
    r = encode_residual_array(gt.to_array(), anchor.to_array())
    return BoxResidual(tuple(r[:3]), tuple(r[3:]))


def decode_residual(r: BoxResidual, anchor: Box3) -> Box3:
    return Box3.from_array(decode_residual_array(r.to_array(), anchor.to_array()))


def encode_residual_array(gt: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    d_center = (gt[..., :3] - anchor[..., :3]) / anchor[..., 3:]
    d_size = np.log(gt[..., 3:] / anchor[..., 3:])
    return np.concatenate([d_center, d_size], axis=-1)


def decode_residual_array(r: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    center = anchor[..., :3] + r[..., :3] * anchor[..., 3:]
    size = anchor[..., 3:] * np.exp(r[..., 3:])
    return np.concatenate([center, size], axis=-1)
