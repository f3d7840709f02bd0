"""Hot point-set and box kernels, compiled when available.

The Cython extension ``ctxvote._kernels`` is used if it was built; otherwise
the numpy implementations in ``ctxvote._fallback`` are used. Setting the
environment variable ``CTXVOTE_PURE_PYTHON=1`` forces the fallback.

Both backends return identical arrays for identical inputs.
"""

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("CTXVOTE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def farthest_point_sample(pts, k, impl=None):
    return (impl or _impl).farthest_point_sample(_f64(pts), int(k))


def ball_query(pts, centers, radius, max_pts, impl=None):
    """Return ``(idx, counts)``; ``idx`` is ``(q, max_pts)`` padded with -1."""
    return (impl or _impl).ball_query(_f64(pts), _f64(centers), float(radius), int(max_pts))


def iou_matrix(a, b, impl=None):
    """Pairwise IoU of axis-aligned boxes given as ``(n, 6)`` center+size rows."""
    a = _f64(a).reshape(-1, 6)
    b = _f64(b).reshape(-1, 6)
    return (impl or _impl).iou_matrix(a, b)


def nms(boxes, scores, classes, thresh, impl=None):
    """Greedy per-class NMS; returns kept indices in (score desc, index asc) order."""
    return (impl or _impl).nms(
        _f64(boxes).reshape(-1, 6),
        _f64(scores).reshape(-1),
        np.ascontiguousarray(classes, dtype=np.int64).reshape(-1),
        float(thresh),
    )


def points_in_boxes(pts, boxes, expand, max_pts, impl=None):
    """Indices of points inside each (scaled) box, strided down to ``max_pts``."""
    return (impl or _impl).points_in_boxes(
        _f64(pts), _f64(boxes).reshape(-1, 6), float(expand), int(max_pts)
    )
