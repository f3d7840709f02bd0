import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ctxvote.tensor import (
    ConfigurationError,
    DimensionError,
    EmptyInputError,
    LayerNormParams,
    LinearParams,
    Tape,
    Tensor,
    init_layer_norm,
    layer_norm,
    matmul,
    max_pool_set,
    mlp_forward,
    row_softmax,
)
from ctxvote.gradcheck import grad_check


def lin(w, b):
    return LinearParams(Tensor(np.asarray(w, float), True), Tensor(np.asarray(b, float), True))


def ln(d, eps=1e-5):
    return LayerNormParams(Tensor(np.ones(d)), Tensor(np.zeros(d)), eps)


def test_matmul_identity():
    out = matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]])
    assert np.array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_column():
    assert matmul([[1, 2]], [[3], [4]]).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_matmul_backward_formula():
    rng = np.random.default_rng(0)
    a, b = Tensor(rng.standard_normal((3, 4)), True), Tensor(rng.standard_normal((4, 2)), True)
    g = rng.standard_normal((3, 2))
    t = Tape()
    t.backward(t.matmul(a, b), g)
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=0, atol=1e-15)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=0, atol=1e-15)


def test_softmax_small_cases():
    assert row_softmax([[0.0, 0.0]]).data.tolist() == [[0.5, 0.5]]
    assert row_softmax([[7.0]]).data.tolist() == [[1.0]]


def test_softmax_large_logits_stay_finite():
    out = row_softmax([[1000.0, 0.0]]).data
    assert np.all(np.isfinite(out))
    # exp(-1000) underflows to 0 in float64; the exact value is below 1e-434
    assert out[0, 0] == 1.0 and 0.0 <= out[0, 1] < 1e-300


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_and_positive(x):
    p = row_softmax(x).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(p > 0)


def test_softmax_mask_zeroes_hidden_entries():
    t = Tape()
    p = t.softmax(Tensor([[1.0, 2.0, 3.0]]), np.array([[True, False, True]])).data
    assert p[0, 1] == 0.0
    assert abs(p.sum() - 1.0) < 1e-15


def test_layer_norm_constant_row():
    assert layer_norm([[5.0, 5.0, 5.0, 5.0]], ln(4)).data.tolist() == [[0.0, 0.0, 0.0, 0.0]]


def test_layer_norm_two_values():
    out = layer_norm([[1.0, -1.0]], ln(2, eps=1e-12)).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-11)


def test_layer_norm_zero_gain_outputs_bias():
    p = LayerNormParams(Tensor([1.0, 0.0, 1.0]), Tensor([0.1, 0.7, -0.2]))
    out = layer_norm(np.random.default_rng(1).standard_normal((4, 3)), p).data
    assert np.all(out[:, 1] == 0.7)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=st.floats(-100, 100)))
def test_layer_norm_moments(x):
    x = x + np.arange(x.shape[1])  # keep per-row variance well above eps
    out = layer_norm(x, ln(x.shape[1], eps=1e-12)).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-9)
    assert np.all(np.abs(out.var(axis=1) - 1.0) < 1e-6)


def test_layer_norm_width_mismatch():
    with pytest.raises(DimensionError):
        layer_norm(np.zeros((2, 3)), ln(4))


def test_max_pool_values_and_ties():
    out, arg = max_pool_set([[1.0, 9.0], [4.0, 2.0]])
    assert out.data.tolist() == [4.0, 9.0]
    assert arg.tolist() == [1, 0]
    x = Tensor([[3.0], [3.0]], True)
    t = Tape()
    y, arg = t.max_pool(x)
    assert y.data.tolist() == [3.0] and arg.tolist() == [0]
    t.backward(y)
    assert x.grad.tolist() == [[1.0], [0.0]]


def test_max_pool_single_row_identity():
    out, _ = max_pool_set([[1.5, -2.0, 3.0]])
    assert out.data.tolist() == [1.5, -2.0, 3.0]


def test_max_pool_empty_set():
    with pytest.raises(EmptyInputError):
        max_pool_set(np.zeros((0, 3)))


def test_max_pool_one_gradient_per_channel():
    x = Tensor(np.random.default_rng(2).standard_normal((6, 5)), True)
    t = Tape()
    y, _ = t.max_pool(x)
    t.backward(y, np.full(5, 2.0))
    assert np.all((x.grad != 0).sum(axis=0) == 1)


def test_max_pool_fully_masked_set_is_zero():
    t = Tape()
    y, arg = t.max_pool(Tensor(np.ones((2, 3, 2))), np.array([[True, False, False], [False, False, False]]))
    assert y.data[1].tolist() == [0.0, 0.0] and arg[1].tolist() == [-1, -1]


def test_mlp_zero_weight_gives_bias():
    out = mlp_forward(Tape(), Tensor(np.ones((3, 2))), [lin(np.zeros((2, 4)), [1, 2, 3, 4])])
    assert np.all(out.data == [1, 2, 3, 4])


def test_mlp_identity_layer():
    x = np.random.default_rng(3).standard_normal((5, 3))
    out = mlp_forward(Tape(), Tensor(x), [lin(np.eye(3), np.zeros(3))])
    assert np.array_equal(out.data, x)


def test_mlp_two_layers_against_scalar_loop():
    w1 = [[0.5, -1.0, 0.25], [2.0, 0.5, -0.75]]
    b1 = [0.1, 0.2, -0.3]
    w2 = [[1.0, -2.0], [0.5, 0.0], [-1.5, 1.0]]
    b2 = [0.05, -0.05]
    x = [[1.0, -0.5], [-2.0, 0.25]]
    expected = []
    for row in x:
        h = [max(0.0, sum(row[i] * w1[i][j] for i in range(2)) + b1[j]) for j in range(3)]
        expected.append([sum(h[j] * w2[j][k] for j in range(3)) + b2[k] for k in range(2)])
    out = mlp_forward(Tape(), Tensor(x), [lin(w1, b1), lin(w2, b2)])
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)


def test_mlp_chain_break():
    with pytest.raises(ConfigurationError):
        mlp_forward(Tape(), Tensor(np.ones((1, 2))), [lin(np.zeros((2, 3)), np.zeros(3)), lin(np.zeros((4, 1)), [0])])


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([[0.0, 1.0, -1.0]], True)
    t = Tape()
    t.backward(t.relu(x), np.ones((1, 3)))
    assert x.grad.tolist() == [[0.0, 1.0, 0.0]]


def test_add_broadcast_row_gradient_sums():
    a, b = Tensor(np.zeros((4, 3)), True), Tensor(np.zeros(3), True)
    t = Tape()
    t.backward(t.add(a, b), np.ones((4, 3)))
    assert b.grad.tolist() == [4.0, 4.0, 4.0]


def test_gather_accumulates_repeated_rows():
    x = Tensor(np.arange(6.0).reshape(3, 2), True)
    t = Tape()
    y = t.gather(x, np.array([[0, 0], [2, 0]]))
    assert y.shape == (2, 2, 2)
    t.backward(y, np.ones((2, 2, 2)))
    assert x.grad.tolist() == [[3.0, 3.0], [0.0, 0.0], [1.0, 1.0]]


def test_leaves_only_accumulate():
    x = Tensor([[1.0, 2.0]], True)
    t = Tape()
    h = t.scale(x, 3.0)
    t.backward(t.sum(h))
    assert x.grad.tolist() == [[3.0, 3.0]]
    assert h.grad is None


def test_backward_seed_shape_checked():
    x = Tensor([[1.0, 2.0]], True)
    t = Tape()
    y = t.scale(x, 2.0)
    with pytest.raises(DimensionError):
        t.backward(y, np.ones(3))


def test_inference_tape_records_nothing():
    x = Tensor([[1.0]], True)
    t = Tape(record=False)
    t.scale(x, 2.0)
    assert len(t) == 0


def test_losses_values():
    t = Tape()
    # |d| = 2 > beta = 1: 2 - 0.5
    assert float(t.smooth_l1(Tensor([[2.0]]), np.array([[0.0]]), beta=1.0).data) == 1.5
    assert abs(float(t.bce_with_logits(Tensor([[0.0]]), np.array([[1.0]])).data) - np.log(2)) < 1e-15
    assert abs(float(t.cross_entropy(Tensor([[0.0, 0.0]]), np.array([1])).data) - np.log(2)) < 1e-15


def test_weighted_loss_ignores_zero_weight_rows():
    t = Tape()
    v = t.smooth_l1(Tensor([[1.0], [100.0]]), np.zeros((2, 1)), np.array([1.0, 0.0]), beta=1.0)
    assert float(v.data) == 0.5


def test_grad_check_examples():
    rng = np.random.default_rng(4)
    rep = grad_check(lambda t, a, b: t.matmul(a, b), [rng.standard_normal((3, 3)), rng.standard_normal((3, 3))])
    assert rep.max_rel_error < 1e-6
    g, b = 1 + 0.1 * rng.standard_normal(8), 0.1 * rng.standard_normal(8)
    rep = grad_check(lambda t, x: t.layer_norm(x, LayerNormParams(Tensor(g), Tensor(b))), [rng.standard_normal((4, 8))])
    assert rep.max_rel_error < 1e-5
    rep = grad_check(lambda t, x: t.sum(t.softmax(t.scale(x, 2.0))), [rng.standard_normal((3, 4))])
    # the row sums are constant, so the gradient is zero; the floor keeps the ratio finite
    assert rep.max_rel_error < 1e-6


def test_init_layer_norm_defaults():
    p = init_layer_norm(3)
    assert p.eps == 1e-5 and p.gain.data.tolist() == [1.0, 1.0, 1.0]
