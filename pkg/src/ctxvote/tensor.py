"""Dense float64 tensors and an explicit reverse-mode tape.

Every differentiable operation is a method on :class:`Tape`. The method runs
the forward computation eagerly and, when any input requires a gradient,
appends one record ``(output, inputs, backward_fn)`` to the tape.
:meth:`Tape.backward` replays the records in reverse and accumulates
gradients into leaf tensors only.

Tapes share no state, so separate tapes may run on separate threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class EmptyInputError(ValueError):
    """An operation that needs at least one row got none."""


class ConfigurationError(ValueError):
    """Layer parameters do not chain or do not match their inputs."""


class Tensor:
    """A float64 array that may participate in a tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class LinearParams:
    weight: Tensor  # (d_in, d_out)
    bias: Tensor  # (d_out,)

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-5


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, scale: float = 1.0) -> LinearParams:
    """He-uniform weights, zero bias."""
    if d_in < 1 or d_out < 1:
        raise ConfigurationError(f"linear layer needs positive widths, got {d_in}->{d_out}")
    bound = scale * np.sqrt(6.0 / d_in)
    w = rng.uniform(-bound, bound, size=(d_in, d_out))
    return LinearParams(Tensor(w, requires_grad=True), Tensor(np.zeros(d_out), requires_grad=True))


def init_mlp(rng: np.random.Generator, dims: Sequence[int], last_scale: float = 1.0) -> list[LinearParams]:
    layers = []
    for i in range(len(dims) - 1):
        scale = last_scale if i == len(dims) - 2 else 1.0
        layers.append(init_linear(rng, dims[i], dims[i + 1], scale))
    return layers


def init_layer_norm(d: int, eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(
        Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True), eps
    )


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _huber(d: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    ad = np.abs(d)
    quad = ad < beta
    val = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d))
    return val, grad


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable operations.

    ``Tape(record=False)`` evaluates the same operations without recording
    anything, for inference.
    """

    def __init__(self, record: bool = True) -> None:
        self.record = record
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []

    def __len__(self) -> int:
        return len(self._records)

    def _emit(self, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Backward) -> Tensor:
        out = Tensor(data)
        if self.record and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self._records.append((out, inputs, backward))
        return out

    def backward(self, out: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        ``seed`` is the upstream gradient; it defaults to ones (a scalar loss).
        """
        if not out.requires_grad:
            return
        g0 = np.ones_like(out.data) if seed is None else np.asarray(seed, dtype=np.float64)
        if g0.shape != out.shape:
            raise DimensionError(f"seed shape {g0.shape} does not match output {out.shape}")
        pending: dict[int, tuple[Tensor, np.ndarray]] = {id(out): (out, g0)}
        for node, inputs, fn in reversed(self._records):
            entry = pending.pop(id(node), None)
            if entry is None:
                continue
            for t, gi in zip(inputs, fn(entry[1])):
                if gi is None or not t.requires_grad:
                    continue
                prev = pending.get(id(t))
                pending[id(t)] = (t, gi if prev is None else prev[1] + gi)
        for t, g in pending.values():
            t.grad = g.copy() if t.grad is None else t.grad + g

    # -- linear algebra -----------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """``a @ b`` for matrices or equally batched stacks of matrices."""
        if (
            a.data.ndim not in (2, 3)
            or a.data.ndim != b.data.ndim
            or a.shape[-1] != b.shape[-2]
            or a.shape[:-2] != b.shape[:-2]
        ):
            raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        ad, bd = a.data, b.data

        def back(g):
            return g @ _swap(bd), _swap(ad) @ g

        return self._emit(ad @ bd, (a, b), back)

    def transpose(self, x: Tensor) -> Tensor:
        return self._emit(np.ascontiguousarray(_swap(x.data)), (x,), lambda g: (_swap(g),))

    def linear(self, x: Tensor, p: LinearParams) -> Tensor:
        """``x @ W + b`` applied along the last axis of ``x``."""
        if x.shape[-1] != p.d_in:
            raise DimensionError(f"linear expects last dim {p.d_in}, got shape {x.shape}")
        xd, wd = x.data, p.weight.data
        x2 = xd.reshape(-1, p.d_in)

        need_x = x.requires_grad

        def back(g):
            g2 = g.reshape(-1, p.d_out)
            return (g @ wd.T if need_x else None), x2.T @ g2, g2.sum(axis=0)

        return self._emit(xd @ wd + p.bias.data, (x, p.weight, p.bias), back)

    # -- elementwise --------------------------------------------------------

    def relu(self, x: Tensor) -> Tensor:
        mask = x.data > 0.0
        return self._emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Sum; ``b`` may broadcast against ``a`` (e.g. a row vector)."""
        try:
            out = a.data + b.data
        except ValueError:
            raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from None
        if out.shape != a.shape:
            raise DimensionError(f"add result {out.shape} must keep shape of first operand {a.shape}")
        bs = b.shape
        return self._emit(out, (a, b), lambda g: (g, _unbroadcast(g, bs)))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        out = a.data - b.data
        if out.shape != a.shape:
            raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}")
        bs = b.shape
        return self._emit(out, (a, b), lambda g: (g, -_unbroadcast(g, bs)))

    def scale(self, x: Tensor, c: float) -> Tensor:
        return self._emit(x.data * c, (x,), lambda g: (g * c,))

    # -- shape --------------------------------------------------------------

    def reshape(self, x: Tensor, shape: Sequence[int]) -> Tensor:
        old = x.shape
        return self._emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))

    def concat(self, xs: Sequence[Tensor], axis: int = -1) -> Tensor:
        sizes = [t.shape[axis] for t in xs]
        splits = np.cumsum(sizes)[:-1]
        try:
            out = np.concatenate([t.data for t in xs], axis=axis)
        except ValueError:
            raise DimensionError(f"concat mismatch: {[t.shape for t in xs]}") from None
        return self._emit(out, tuple(xs), lambda g: np.split(g, splits, axis=axis))

    def slice(self, x: Tensor, start: int, stop: int) -> Tensor:
        """Columns ``start:stop`` of the last axis."""
        shape = x.shape

        def back(g):
            full = np.zeros(shape)
            full[..., start:stop] = g
            return (full,)

        return self._emit(np.ascontiguousarray(x.data[..., start:stop]), (x,), back)

    def gather(self, x: Tensor, idx: np.ndarray) -> Tensor:
        """Rows of a 2-D tensor, ``x[idx]`` for an integer array of any shape."""
        idx = np.asarray(idx, dtype=np.int64)
        n, d = x.shape

        def back(g):
            full = np.zeros((n, d))
            np.add.at(full, idx.reshape(-1), g.reshape(-1, d))
            return (full,)

        return self._emit(x.data[idx], (x,), back)

    # -- normalisation and pooling -----------------------------------------

    def softmax(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Softmax along the last axis; ``mask`` (broadcastable bool) drops entries.

        Each row must keep at least one unmasked entry.
        """
        z = x.data if mask is None else np.where(mask, x.data, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)

        def back(g):
            return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

        return self._emit(p, (x,), back)

    def layer_norm(self, x: Tensor, p: LayerNormParams) -> Tensor:
        d = x.shape[-1]
        if p.gain.shape != (d,) or p.bias.shape != (d,):
            raise DimensionError(f"layer_norm params of width {p.gain.shape} for input {x.shape}")
        mu = x.data.mean(axis=-1, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + p.eps)
        xhat = xc * inv
        gain = p.gain.data

        def back(g):
            gx = g * gain
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            g2 = g.reshape(-1, d)
            return dx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

        return self._emit(xhat * gain + p.bias.data, (x, p.gain, p.bias), back)

    def max_pool(self, x: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
        """Channel-wise max over the set axis (``-2``).

        Returns the pooled tensor and the winning row per channel; ties go to
        the lowest row. ``mask`` (shape ``x.shape[:-1]``) excludes rows; a set
        with no valid rows pools to zeros and its argmax is -1.
        """
        if x.data.ndim < 2 or x.shape[-2] == 0:
            raise EmptyInputError(f"max_pool needs at least one row, got shape {x.shape}")
        z = x.data
        if mask is not None:
            z = np.where(mask[..., None], z, -np.inf)
        arg = np.argmax(z, axis=-2)
        out = np.take_along_axis(z, arg[..., None, :], axis=-2)[..., 0, :]
        if mask is not None:
            empty = ~mask.any(axis=-1)
            if empty.any():
                out[empty] = 0.0
                arg[empty] = -1
        shape = x.shape

        def back(g):
            full = np.zeros(shape)
            g = g if mask is None else np.where(arg >= 0, g, 0.0)
            np.put_along_axis(full, np.maximum(arg, 0)[..., None, :], g[..., None, :], axis=-2)
            return (full,)

        return self._emit(out, (x,), back), arg

    # -- reductions and losses ---------------------------------------------

    def sum(self, x: Tensor) -> Tensor:
        shape = x.shape
        return self._emit(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))

    def smooth_l1(self, pred: Tensor, target: np.ndarray, weight: np.ndarray | None = None, beta: float = 1.0) -> Tensor:
        """Weighted mean over rows of the summed Huber penalty per row."""
        n = pred.shape[0]
        w = np.ones(n) if weight is None else np.asarray(weight, dtype=np.float64)
        denom = max(float(w.sum()), 1.0)
        d = pred.data - target
        val, dval = _huber(d, beta)
        wcol = w.reshape((n,) + (1,) * (d.ndim - 1))
        loss = float((val * wcol).sum()) / denom
        return self._emit(np.asarray(loss), (pred,), lambda g: (float(g) * dval * wcol / denom,))

    def bce_with_logits(self, logits: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
        z = logits.data
        w = np.ones_like(z) if weight is None else np.asarray(weight, dtype=np.float64)
        denom = max(float(w.sum()), 1.0)
        val = np.maximum(z, 0.0) - z * target + np.log1p(np.exp(-np.abs(z)))
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        loss = float((val * w).sum()) / denom
        return self._emit(np.asarray(loss), (logits,), lambda g: (float(g) * (sig - target) * w / denom,))

    def cross_entropy(self, logits: Tensor, labels: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
        """Softmax cross-entropy over rows of ``(n, C)`` logits with integer labels."""
        z = logits.data
        n = z.shape[0]
        labels = np.asarray(labels, dtype=np.int64)
        w = np.ones(n) if weight is None else np.asarray(weight, dtype=np.float64)
        denom = max(float(w.sum()), 1.0)
        zs = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(zs).sum(axis=1))
        safe = np.clip(labels, 0, z.shape[1] - 1)
        nll = lse - zs[np.arange(n), safe]
        loss = float((nll * w).sum()) / denom
        p = np.exp(zs - lse[:, None])

        def back(g):
            d = p.copy()
            d[np.arange(n), safe] -= 1.0
            return (float(g) * d * (w / denom)[:, None],)

        return self._emit(np.asarray(loss), (logits,), back)


def mlp_forward(tape: Tape, x: Tensor, layers: Sequence[LinearParams]) -> Tensor:
    """Linear layers with ReLU between them; the last layer has no activation."""
    if not layers:
        raise ConfigurationError("MLP needs at least one layer")
    for i in range(1, len(layers)):
        if layers[i - 1].d_out != layers[i].d_in:
            raise ConfigurationError(
                f"MLP layer {i - 1} outputs {layers[i - 1].d_out} but layer {i} expects {layers[i].d_in}"
            )
    h = x
    for i, p in enumerate(layers):
        h = tape.linear(h, p)
        if i < len(layers) - 1:
            h = tape.relu(h)
    return h


# Convenience wrappers on a throwaway tape, for callers that only need values.

def matmul(a, b) -> Tensor:
    return Tape().matmul(as_tensor(a), as_tensor(b))


def row_softmax(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"row_softmax expects a matrix, got {x.shape}")
    return Tape().softmax(x)


def layer_norm(x, p: LayerNormParams) -> Tensor:
    return Tape().layer_norm(as_tensor(x), p)


def max_pool_set(x) -> tuple[Tensor, np.ndarray]:
    return Tape().max_pool(as_tensor(x))
