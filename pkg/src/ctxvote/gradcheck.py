"""Finite-difference verification of tape gradients."""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .context import AttentionParams, attention, gcm, hcm, pcm
from .tensor import LayerNormParams, LinearParams, Tape, Tensor, mlp_forward


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst_input: int
    worst_index: tuple[int, ...]
    n_checked: int


def _rel(a: np.ndarray, n: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tol: float = 1e-4,
    h: float = 1e-5,
    wrt: Sequence[int] | None = None,
    seed: int = 0,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of ``fn(tape, *tensors)`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output entry contributes. Relative error is taken per element against
    ``max(|analytic|, |numeric|, floor)``.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    tape = Tape()
    ts = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(tape, *ts)
    if not np.all(np.isfinite(out.data)):
        raise GradCheckError("non-finite forward output at the base point")
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    tape.backward(out, proj)

    def value(xs):
        o = fn(Tape(), *[Tensor(x) for x in xs])
        v = float((o.data * proj).sum())
        return v

    worst = (0.0, -1, ())
    count = 0
    for i in wrt:
        analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(arrays[i])
        numeric = np.zeros_like(arrays[i])
        for idx in np.ndindex(arrays[i].shape):
            orig = arrays[i][idx]
            arrays[i][idx] = orig + h
            fp = value(arrays)
            arrays[i][idx] = orig - h
            fm = value(arrays)
            arrays[i][idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite value perturbing input {i} at {idx}")
            numeric[idx] = (fp - fm) / (2.0 * h)
        count += numeric.size
        if numeric.size:
            rel = _rel(analytic, numeric, floor)
            j = np.unravel_index(int(np.argmax(rel)), rel.shape)
            if rel[j] > worst[0] or worst[1] < 0:
                worst = (float(rel[j]), i, tuple(int(k) for k in j))
    return GradCheckReport(worst[0], worst[0] < tol, worst[1], worst[2], count)


@dataclass
class SuiteResult:
    name: str
    trials: int
    max_rel_error: float
    passed: bool
    seconds: float


def run_suite(
    cases: dict[str, Callable[[np.random.Generator], tuple[Callable, list, dict]]],
    trials: int = 100,
    tol: float = 1e-4,
    seed: int = 0,
) -> list[SuiteResult]:
    """Run every case ``trials`` times on freshly drawn random inputs.

    A case maps an RNG to ``(fn, inputs, grad_check_kwargs)``.
    """
    results = []
    for name, make in cases.items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(trials):
            fn, inputs, kw = make(rng)
            rep = grad_check(fn, inputs, tol=tol, seed=int(rng.integers(2**31)), **kw)
            worst = max(worst, rep.max_rel_error)
        results.append(SuiteResult(name, trials, worst, worst < tol, time.perf_counter() - t0))
    return results


# -- the standard suite ----------------------------------------------------------


def _linear(w: Tensor, b: Tensor) -> LinearParams:
    return LinearParams(w, b)


def _mlp_arrays(rng, dims) -> list[np.ndarray]:
    out = []
    for a, b in zip(dims, dims[1:]):
        out += [rng.standard_normal((a, b)) / np.sqrt(a), 0.1 * rng.standard_normal(b)]
    return out


def _mlp_from(ts) -> list[LinearParams]:
    return [_linear(ts[i], ts[i + 1]) for i in range(0, len(ts), 2)]


def _attn_arrays(rng, d_in, d) -> list[np.ndarray]:
    return _mlp_arrays(rng, [d_in, d]) + _mlp_arrays(rng, [d_in, d]) + _mlp_arrays(rng, [d_in, d]) + [
        1.0 + 0.1 * rng.standard_normal(d),
        0.1 * rng.standard_normal(d),
    ]


def _attn_from(ts) -> AttentionParams:
    return AttentionParams(
        _linear(ts[0], ts[1]), _linear(ts[2], ts[3]), _linear(ts[4], ts[5]), LayerNormParams(ts[6], ts[7])
    )


def _case_matmul(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    return (lambda t, x, y: t.matmul(x, y)), [a, b], {}


def _case_softmax(rng):
    x = rng.standard_normal((3, 5))
    mask = rng.random((3, 5)) < 0.8
    mask[:, 0] = True
    return (lambda t, z: t.softmax(z, mask)), [x], {}


def _case_layer_norm(rng):
    x = rng.standard_normal((4, 5))
    return (lambda t, z, g, b: t.layer_norm(z, LayerNormParams(g, b))), [
        x,
        1.0 + 0.1 * rng.standard_normal(5),
        0.1 * rng.standard_normal(5),
    ], {}


def _case_max_pool(rng):
    x = rng.standard_normal((2, 5, 3))
    while _pool_gap(x) < KINK_MARGIN:
        x = rng.standard_normal((2, 5, 3))
    mask = rng.random((2, 5)) < 0.7
    mask[:, 0] = True
    return (lambda t, z: t.max_pool(z, mask)[0]), [x], {}


# ReLU and max are not differentiable at a kink; a central difference that
# straddles one is meaningless, so fixtures are redrawn until every kink is
# at least KINK_MARGIN away.
KINK_MARGIN = 1e-3


def _pool_gap(x: np.ndarray) -> float:
    """Smallest gap between the two largest entries along axis -2."""
    if x.shape[-2] < 2:
        return np.inf
    top = np.sort(x, axis=-2)
    return float((top[..., -1, :] - top[..., -2, :]).min())


def _case_mlp(rng):
    while True:
        x = rng.standard_normal((6, 3))
        arrs = _mlp_arrays(rng, [3, 5, 4])
        if np.abs(x @ arrs[0] + arrs[1]).min() > KINK_MARGIN:
            break
    return (lambda t, x, *ps: mlp_forward(t, x, _mlp_from(ps))), [x] + arrs, {}


def _case_gcm(rng):
    d_in, d = 3, 4
    arrs = _attn_arrays(rng, d_in, d)
    return (lambda t, F, *ps: gcm(t, F, _attn_from(ps))), [rng.standard_normal((5, d_in))] + arrs, {}


def _case_pcm(rng):
    d_in, d = 3, 4
    while True:
        x = rng.standard_normal((2, 4, d_in))
        mask = rng.random((2, 4)) < 0.75
        mask[:, 0] = True
        mlp = _mlp_arrays(rng, [d_in, d])
        attn = _attn_arrays(rng, d, d)
        t = Tape(record=False)
        emb = mlp_forward(t, Tensor(x), _mlp_from([Tensor(a) for a in mlp]))
        ctx = attention(t, emb, _attn_from([Tensor(a) for a in attn]), 1.0 / np.sqrt(d), mask)
        hidden = ~mask[..., None]
        gaps = [_pool_gap(np.where(hidden, -1e9, v.data)) for v in (emb, ctx)]
        if min(gaps) > KINK_MARGIN:
            break

    def fn(t, x, *ps):
        return pcm(t, x, mask, _mlp_from(ps[:2]), _attn_from(ps[2:]))[0]

    return fn, [x] + mlp + attn, {}


def _case_hcm(rng):
    d = 3
    while True:
        G, K, k = rng.standard_normal((5, d)), rng.standard_normal((3, d)), rng.standard_normal((3, d))
        mlp = _mlp_arrays(rng, [2 * d, 4, d])
        s = np.concatenate([k.max(0), G.max(0)])
        if min(_pool_gap(G), _pool_gap(k)) > KINK_MARGIN and np.abs(s @ mlp[0] + mlp[1]).min() > KINK_MARGIN:
            break
    return (lambda t, G, K, k, *ps: hcm(t, G, K, k, _mlp_from(ps))), [G, K, k] + mlp, {}


def _case_smooth_l1(rng):
    target = rng.standard_normal((5, 3))
    w = (rng.random(5) < 0.7).astype(float)
    return (lambda t, p: t.smooth_l1(p, target, w, 0.5)), [target + rng.standard_normal((5, 3))], {}


def _case_bce(rng):
    target = (rng.random((6, 1)) < 0.5).astype(float)
    return (lambda t, z: t.bce_with_logits(z, target)), [2.0 * rng.standard_normal((6, 1))], {}


def _case_cross_entropy(rng):
    labels = rng.integers(0, 4, size=6)
    w = (rng.random(6) < 0.7).astype(float)
    return (lambda t, z: t.cross_entropy(z, labels, w)), [rng.standard_normal((6, 4))], {}


def default_cases() -> dict[str, Callable]:
    """Every differentiable building block, with parameters checked as inputs."""
    return {
        "matmul": _case_matmul,
        "softmax": _case_softmax,
        "layer_norm": _case_layer_norm,
        "max_pool_set": _case_max_pool,
        "mlp": _case_mlp,
        "gcm": _case_gcm,
        "pcm": _case_pcm,
        "hcm": _case_hcm,
        "smooth_l1": _case_smooth_l1,
        "bce_with_logits": _case_bce,
        "cross_entropy": _case_cross_entropy,
    }
