"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Results must match the compiled kernels bit for bit, so distance arithmetic
and tie-breaking mirror the Cython loops exactly.
"""

import numpy as np


def _sqdist(pts, c):
    dx = pts[..., 0] - c[..., 0]
    dy = pts[..., 1] - c[..., 1]
    dz = pts[..., 2] - c[..., 2]
    return dx * dx + dy * dy + dz * dz


def farthest_point_sample(pts, k):
    n = pts.shape[0]
    out = np.empty(k, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = 0
    for s in range(k):
        out[s] = cur
        mind[cur] = -1.0
        if s == k - 1:
            break
        live = mind >= 0.0
        d = _sqdist(pts, pts[cur])
        np.minimum(mind, d, out=mind, where=live)
        cur = int(np.argmax(mind))
    return out


def ball_query(pts, centers, radius, max_pts):
    q = centers.shape[0]
    idx = np.full((q, max_pts), -1, dtype=np.int64)
    cnt = np.zeros(q, dtype=np.int64)
    r2 = radius * radius
    d = _sqdist(pts[None, :, :], centers[:, None, :])
    for j in range(q):
        cand = np.flatnonzero(d[j] <= r2)
        if cand.size:
            order = cand[np.lexsort((cand, d[j, cand]))][:max_pts]
            idx[j, : order.size] = order
            cnt[j] = order.size
    return idx, cnt


def iou_matrix(a, b):
    lo = np.maximum(a[:, None, :3] - 0.5 * a[:, None, 3:], b[None, :, :3] - 0.5 * b[None, :, 3:])
    hi = np.minimum(a[:, None, :3] + 0.5 * a[:, None, 3:], b[None, :, :3] + 0.5 * b[None, :, 3:])
    ext = np.minimum(hi - lo, np.minimum(a[:, None, 3:], b[None, :, 3:]))
    disjoint = (ext <= 0.0).any(axis=-1)
    inter = ext[..., 0] * ext[..., 1] * ext[..., 2]
    va = a[:, 3] * a[:, 4] * a[:, 5]
    vb = b[:, 3] * b[:, 4] * b[:, 5]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = inter / (va[:, None] + vb[None, :] - inter)
    out[disjoint] = 0.0
    return out


def nms(boxes, scores, classes, thresh):
    n = boxes.shape[0]
    order = np.lexsort((np.arange(n), -np.asarray(scores)))
    iou = iou_matrix(boxes, boxes)
    keep = []
    for ia in order:
        if not any(classes[ib] == classes[ia] and iou[ia, ib] >= thresh for ib in keep):
            keep.append(int(ia))
    return np.asarray(keep, dtype=np.int64)


def points_in_boxes(pts, boxes, expand, max_pts):
    q = boxes.shape[0]
    idx = np.full((q, max_pts), -1, dtype=np.int64)
    cnt = np.zeros(q, dtype=np.int64)
    for j in range(q):
        half = 0.5 * expand * boxes[j, 3:]
        inside = (np.abs(pts - boxes[j, :3]) <= half).all(axis=1)
        hits = np.flatnonzero(inside)
        c = hits.size
        if c > max_pts:
            hits = hits[(np.arange(max_pts) * c) // max_pts]
        idx[j, : hits.size] = hits
        cnt[j] = hits.size
    return idx, cnt
