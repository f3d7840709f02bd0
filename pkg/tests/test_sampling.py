import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ctxvote.sampling import (
    ClusterSet,
    Kind,
    PointSet,
    ball_query,
    cluster_votes,
    farthest_point_sample,
    generate_votes,
)
from ctxvote.tensor import LinearParams, Tape, Tensor

points = arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)), elements=st.floats(-5, 5))


def test_fps_examples():
    pts = np.array([[0, 0, 0], [10, 0, 0], [5, 0, 0]], float)
    assert farthest_point_sample(pts, 2).tolist() == [0, 1]
    assert farthest_point_sample(pts, 1).tolist() == [0]
    assert farthest_point_sample(pts, 3).tolist()[0] == 0
    assert sorted(farthest_point_sample(pts, 3).tolist()) == [0, 1, 2]


def test_fps_argument_errors():
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((3, 3)), 4)
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((3, 3)), 0)


@given(points, st.data())
def test_fps_deterministic_and_distinct(pts, data):
    k = data.draw(st.integers(1, len(pts)))
    a = farthest_point_sample(pts, k)
    assert np.array_equal(a, farthest_point_sample(pts, k))
    assert a[0] == 0 and len(set(a.tolist())) == k


def brute_ball(pts, c, r, m):
    d = ((pts - c) ** 2).sum(1)
    return [i for _, i in sorted((d[i], i) for i in range(len(pts)) if d[i] <= r * r)][:m]


def test_ball_query_five_points():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [1, 1, 1], [-1, 0, 0]], float)
    centers = np.array([[0, 0, 0], [1, 1, 0]], float)
    got = ball_query(pts, centers, 1.5, 10)
    assert [g.tolist() for g in got] == [brute_ball(pts, c, 1.5, 10) for c in centers]
    assert got[0].tolist() == [0, 1, 4]


def test_ball_query_large_radius_and_single_point():
    pts = np.random.default_rng(0).uniform(0, 1, (20, 3))
    assert all(len(g) == 7 for g in ball_query(pts, pts[:4], 100.0, 7))
    assert ball_query(pts, pts[3:4], 1e-9, 5)[0].tolist() == [3]


@given(points, st.floats(0.1, 4), st.integers(1, 8))
def test_ball_query_radius_predicate(pts, r, m):
    centers = pts[: min(4, len(pts))]
    for c, g in zip(centers, ball_query(pts, centers, r, m)):
        assert g.tolist() == brute_ball(pts, c, r, m)


def head(w, b):
    return [LinearParams(Tensor(np.asarray(w, float)), Tensor(np.asarray(b, float)))]


def test_votes_zero_and_constant_head():
    pos = np.random.default_rng(1).standard_normal((6, 3))
    seeds = PointSet(pos, Tensor(np.ones((6, 4))))
    v = generate_votes(Tape(), seeds, head(np.zeros((4, 3)), np.zeros(3)), Kind.CENTER)
    assert np.array_equal(v.positions, pos)
    v = generate_votes(Tape(), seeds, head(np.zeros((4, 3)), [1, 0, 0]), Kind.FACE)
    assert np.array_equal(v.positions, pos + [1, 0, 0])
    assert len(v) == 6 and v.kind is Kind.FACE
    assert v.features is seeds.features


def test_votes_need_features():
    with pytest.raises(RuntimeError):
        generate_votes(Tape(), PointSet(np.zeros((2, 3))), head(np.zeros((4, 3)), np.zeros(3)), Kind.EDGE)


def test_cluster_coincident_votes():
    cl = cluster_votes(np.zeros((10, 3)), 1, 0.1, max_pts=16)
    assert len(cl) == 1 and sorted(cl.member_indices[0].tolist()) == list(range(10))


def test_cluster_two_blobs():
    rng = np.random.default_rng(2)
    a = rng.normal(0, 0.01, (8, 3))
    b = rng.normal(5, 0.01, (8, 3))
    cl = cluster_votes(np.concatenate([a, b]), 2, 0.2)
    groups = sorted(sorted(m.tolist()) for m in cl.member_indices)
    assert groups == [list(range(8)), list(range(8, 16))]


def test_cluster_singletons():
    pts = np.random.default_rng(3).uniform(0, 10, (9, 3))
    cl = cluster_votes(pts, 9, 1e-9)
    assert sorted(m.tolist() for m in cl.member_indices) == [[i] for i in range(9)]


@given(points, st.data())
def test_cluster_members_within_radius(pts, data):
    n = data.draw(st.integers(1, len(pts)))
    r = data.draw(st.floats(0.05, 3))
    cl = cluster_votes(pts, n, r, max_pts=6)
    for c, ci, m in zip(cl.centers, cl.center_indices, cl.member_indices):
        assert m[0] == ci and 1 <= len(m) <= 6
        assert np.all(((pts[m] - c) ** 2).sum(1) <= r * r)


def test_cluster_count_error():
    with pytest.raises(ValueError):
        cluster_votes(np.zeros((3, 3)), 4, 1.0)


def test_padded_has_set_semantics():
    cl = ClusterSet(np.zeros((1, 3)), [np.array([4, 2, 4, 7])], np.array([4]))
    idx, mask = cl.padded(6)
    assert idx[0].tolist() == [4, 2, 7, 4, 4, 4]
    assert mask[0].tolist() == [True, True, True, False, False, False]


def test_empty_cluster_rejected():
    with pytest.raises(ValueError):
        ClusterSet(np.zeros((1, 3)), [np.array([], dtype=int)], np.array([0]))
