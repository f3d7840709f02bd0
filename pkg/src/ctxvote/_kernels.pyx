# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled point-set and box kernels.

Every routine here has a numpy twin in ``_fallback.py`` and must return
bitwise-identical results: distances are accumulated as dx*dx + dy*dy + dz*dz
in that order and ties always resolve to the lowest index.
"""
import numpy as np

from libc.math cimport INFINITY


def farthest_point_sample(const double[:, ::1] pts, Py_ssize_t k):
    cdef Py_ssize_t n = pts.shape[0]
    out = np.empty(k, dtype=np.int64)
    mind_arr = np.full(n, INFINITY)
    cdef long long[::1] o = out
    cdef double[::1] mind = mind_arr
    cdef Py_ssize_t s, i, cur = 0, besti
    cdef double dx, dy, dz, d, best
    for s in range(k):
        o[s] = cur
        mind[cur] = -1.0
        if s == k - 1:
            break
        best = -INFINITY
        besti = 0
        for i in range(n):
            if mind[i] >= 0.0:
                dx = pts[i, 0] - pts[cur, 0]
                dy = pts[i, 1] - pts[cur, 1]
                dz = pts[i, 2] - pts[cur, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < mind[i]:
                    mind[i] = d
            if mind[i] > best:
                best = mind[i]
                besti = i
        cur = besti
    return out


def ball_query(const double[:, ::1] pts, const double[:, ::1] centers,
               double radius, Py_ssize_t max_pts):
    cdef Py_ssize_t n = pts.shape[0], q = centers.shape[0]
    idx_arr = np.full((q, max_pts), -1, dtype=np.int64)
    cnt_arr = np.zeros(q, dtype=np.int64)
    buf_d_arr = np.empty(max_pts + 1)
    buf_i_arr = np.empty(max_pts + 1, dtype=np.int64)
    cdef long long[:, ::1] idx = idx_arr
    cdef long long[::1] cnt = cnt_arr
    cdef double[::1] bd = buf_d_arr
    cdef long long[::1] bi = buf_i_arr
    cdef double r2 = radius * radius
    cdef double dx, dy, dz, d
    cdef Py_ssize_t j, i, m, p
    for j in range(q):
        m = 0
        for i in range(n):
            dx = pts[i, 0] - centers[j, 0]
            dy = pts[i, 1] - centers[j, 1]
            dz = pts[i, 2] - centers[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d > r2:
                continue
            if m == max_pts and d >= bd[m - 1]:
                # equal distance loses to the earlier (lower) index already held
                continue
            # insertion keeps (distance, index) ascending; i grows so ties stay ordered
            p = m if m < max_pts else max_pts - 1
            while p > 0 and bd[p - 1] > d:
                bd[p] = bd[p - 1]
                bi[p] = bi[p - 1]
                p -= 1
            bd[p] = d
            bi[p] = i
            if m < max_pts:
                m += 1
        for p in range(m):
            idx[j, p] = bi[p]
        cnt[j] = m
    return idx_arr, cnt_arr


def iou_matrix(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j, ax
    out = np.zeros((n, m))
    cdef double[:, ::1] o = out
    cdef double inter, lo, hi, va, vb
    for i in range(n):
        va = a[i, 3] * a[i, 4] * a[i, 5]
        for j in range(m):
            inter = 1.0
            for ax in range(3):
                hi = min(a[i, ax] + 0.5 * a[i, ax + 3], b[j, ax] + 0.5 * b[j, ax + 3])
                lo = max(a[i, ax] - 0.5 * a[i, ax + 3], b[j, ax] - 0.5 * b[j, ax + 3])
                if hi <= lo:
                    inter = 0.0
                    break
                # capping by both extents keeps inter <= each volume, so IoU <= 1 after rounding
                inter = inter * min(hi - lo, min(a[i, ax + 3], b[j, ax + 3]))
            if inter > 0.0:
                vb = b[j, 3] * b[j, 4] * b[j, 5]
                o[i, j] = inter / (va + vb - inter)
    return out


def nms(const double[:, ::1] boxes, const double[::1] scores,
        const long long[::1] classes, double thresh):
    cdef Py_ssize_t n = boxes.shape[0]
    order = np.lexsort((np.arange(n), -np.asarray(scores)))
    iou = iou_matrix(boxes, boxes)
    cdef double[:, ::1] io = iou
    cdef long long[::1] od = order.astype(np.int64)
    keep_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] keep = keep_arr
    cdef Py_ssize_t nk = 0, a, b, ia, ib
    cdef bint ok
    for a in range(n):
        ia = od[a]
        ok = True
        for b in range(nk):
            ib = keep[b]
            if classes[ib] == classes[ia] and io[ia, ib] >= thresh:
                ok = False
                break
        if ok:
            keep[nk] = ia
            nk += 1
    return keep_arr[:nk].copy()


def points_in_boxes(const double[:, ::1] pts, const double[:, ::1] boxes,
                    double expand, Py_ssize_t max_pts):
    cdef Py_ssize_t n = pts.shape[0], q = boxes.shape[0], j, i, c, s
    idx_arr = np.full((q, max_pts), -1, dtype=np.int64)
    cnt_arr = np.zeros(q, dtype=np.int64)
    hits_arr = np.empty(n, dtype=np.int64)
    cdef long long[:, ::1] idx = idx_arr
    cdef long long[::1] cnt = cnt_arr
    cdef long long[::1] hits = hits_arr
    cdef double hx, hy, hz
    for j in range(q):
        hx = 0.5 * expand * boxes[j, 3]
        hy = 0.5 * expand * boxes[j, 4]
        hz = 0.5 * expand * boxes[j, 5]
        c = 0
        for i in range(n):
            if (abs(pts[i, 0] - boxes[j, 0]) <= hx and abs(pts[i, 1] - boxes[j, 1]) <= hy
                    and abs(pts[i, 2] - boxes[j, 2]) <= hz):
                hits[c] = i
                c += 1
        if c <= max_pts:
            for s in range(c):
                idx[j, s] = hits[s]
            cnt[j] = c
        else:
            for s in range(max_pts):
                idx[j, s] = hits[(s * c) // max_pts]
            cnt[j] = max_pts
    return idx_arr, cnt_arr
