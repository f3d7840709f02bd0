"""Compiled and numpy kernels must agree exactly; both are checked against
brute-force scans."""

import numpy as np
import pytest

from ctxvote import _fallback, kernels

try:
    from ctxvote import _kernels
except ImportError:  # extension not built
    _kernels = None

IMPLS = [pytest.param(_fallback, id="python")]
if _kernels is not None:
    IMPLS.append(pytest.param(_kernels, id="cython"))

needs_ext = pytest.mark.skipif(_kernels is None, reason="compiled kernels not built")


def random_boxes(rng, n):
    return np.concatenate([rng.uniform(-2, 2, (n, 3)), rng.uniform(0.2, 2.0, (n, 3))], axis=1)


def brute_iou(a, b):
    lo = np.maximum(a[:3] - a[3:] / 2, b[:3] - b[3:] / 2)
    hi = np.minimum(a[:3] + a[3:] / 2, b[:3] + b[3:] / 2)
    inter = np.prod(np.clip(hi - lo, 0, None))
    return inter / (np.prod(a[3:]) + np.prod(b[3:]) - inter)


@pytest.mark.parametrize("impl", IMPLS)
def test_fps_greedy_rule(impl):
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((60, 3))
    idx = kernels.farthest_point_sample(pts, 12, impl=impl)
    assert idx[0] == 0 and len(set(idx.tolist())) == 12
    for k in range(1, 12):
        d = np.min(((pts[:, None] - pts[idx[:k]][None]) ** 2).sum(-1), axis=1)
        assert d[idx[k]] == d.max()


@pytest.mark.parametrize("impl", IMPLS)
def test_ball_query_brute_force(impl):
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 2, (80, 3))
    centers = rng.uniform(0, 2, (10, 3))
    idx, cnt = kernels.ball_query(pts, centers, 0.6, 8, impl=impl)
    for j, c in enumerate(centers):
        d = ((pts - c) ** 2).sum(1)
        order = sorted((float(d[i]), i) for i in range(len(pts)) if d[i] <= 0.36)
        expect = [i for _, i in order][:8]
        assert idx[j, : cnt[j]].tolist() == expect
        assert np.all(idx[j, cnt[j]:] == -1)


@pytest.mark.parametrize("impl", IMPLS)
def test_iou_matrix_brute_force(impl):
    rng = np.random.default_rng(2)
    a, b = random_boxes(rng, 7), random_boxes(rng, 5)
    m = kernels.iou_matrix(a, b, impl=impl)
    for i in range(7):
        for j in range(5):
            assert abs(m[i, j] - brute_iou(a[i], b[j])) < 1e-14


@pytest.mark.parametrize("impl", IMPLS)
def test_nms_rule(impl):
    rng = np.random.default_rng(3)
    boxes = random_boxes(rng, 40)
    scores = rng.random(40)
    classes = rng.integers(0, 3, 40)
    keep = kernels.nms(boxes, scores, classes, 0.2, impl=impl)
    # replay the greedy rule directly
    order = sorted(range(40), key=lambda i: (-scores[i], i))
    expect = []
    for i in order:
        if all(classes[k] != classes[i] or brute_iou(boxes[k], boxes[i]) < 0.2 for k in expect):
            expect.append(i)
    assert keep.tolist() == expect


@pytest.mark.parametrize("impl", IMPLS)
def test_points_in_boxes(impl):
    rng = np.random.default_rng(4)
    pts = rng.uniform(-2, 2, (300, 3))
    boxes = random_boxes(rng, 6)
    idx, cnt = kernels.points_in_boxes(pts, boxes, 1.2, 16, impl=impl)
    for j, b in enumerate(boxes):
        inside = np.nonzero((np.abs(pts - b[:3]) <= 0.6 * b[3:]).all(axis=1))[0]
        got = idx[j, : cnt[j]]
        assert set(got.tolist()) <= set(inside.tolist())
        assert cnt[j] == min(16, len(inside))
        assert len(set(got.tolist())) == cnt[j]


@needs_ext
def test_backends_identical():
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 3, (400, 3))
    for k in (1, 17, 400):
        assert np.array_equal(
            kernels.farthest_point_sample(pts, k, impl=_fallback), kernels.farthest_point_sample(pts, k, impl=_kernels)
        )
    centers = pts[:30]
    for a, b in zip(kernels.ball_query(pts, centers, 0.5, 16, impl=_fallback),
                    kernels.ball_query(pts, centers, 0.5, 16, impl=_kernels)):
        assert np.array_equal(a, b)
    boxes = random_boxes(rng, 50)
    assert np.array_equal(kernels.iou_matrix(boxes, boxes, impl=_fallback), kernels.iou_matrix(boxes, boxes, impl=_kernels))
    scores = np.round(rng.random(50), 1)  # plenty of score ties
    classes = rng.integers(0, 2, 50)
    assert np.array_equal(
        kernels.nms(boxes, scores, classes, 0.1, impl=_fallback), kernels.nms(boxes, scores, classes, 0.1, impl=_kernels)
    )
    for a, b in zip(kernels.points_in_boxes(pts, boxes, 1.3, 32, impl=_fallback),
                    kernels.points_in_boxes(pts, boxes, 1.3, 32, impl=_kernels)):
        assert np.array_equal(a, b)


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")
