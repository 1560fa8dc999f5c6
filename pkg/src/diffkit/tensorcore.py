"""Dense float64 tensors with reverse-mode gradient accumulation.

A program is any Python callable ``program(params, inputs) -> Tensor`` that
builds a scalar from the ops in this module. ``evaluate_with_gradients`` wraps
the parameter arrays in tracked tensors, runs the program and back-propagates.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

ParamSet = dict  # name -> np.ndarray, iterated in sorted-key order

_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def param_set(mapping: Mapping[str, np.ndarray]) -> ParamSet:
    """Copy ``mapping`` into a dict whose insertion order is lexicographic."""
    return {k: np.asarray(mapping[k], dtype=np.float64) for k in sorted(mapping)}


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_owned")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._owned = False
        self.op = op
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        self._owned = True
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # the first incoming gradient is stored by reference; copy only when a second one arrives
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._owned = False
    elif t._owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._owned = True


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    # NaN and inf both survive a sum, so one reduction checks the whole array
    if not math.isfinite(float(np.sum(data))):
        raise FloatingPointError(f"non-finite value produced by '{op}'")
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# --------------------------------------------------------------------- ops

def matmul(a, b, transpose_b: bool = False) -> Tensor:
    """Batched matrix product ``a @ b`` (or ``a @ b^T``) with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a.data.ndim < 2 or bd.ndim < 2 or a.data.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {bd.shape}")
    if bd.ndim == 2 and a.data.ndim > 2:
        return _matmul_flat(a, b, bd, transpose_b)
    data = np.matmul(a.data, bd)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape))
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), bd.shape)
            _accumulate(b, np.swapaxes(gb, -1, -2) if transpose_b else gb)

    return _make(data, "matmul", (a, b), backward)


def _matmul_flat(a: Tensor, b: Tensor, bd: np.ndarray, transpose_b: bool) -> Tensor:
    # stacked rows times one weight matrix: a single 2-D GEMM is much faster than numpy's batched loop
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, a.shape[-1])
    data = (a2 @ bd).reshape(*lead, bd.shape[-1])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if a.requires_grad:
            _accumulate(a, (g2 @ bd.T).reshape(a.shape))
        if b.requires_grad:
            gb = a2.T @ g2
            _accumulate(b, gb.T if transpose_b else gb)

    return _make(data, "matmul", (a, b), backward)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op} shape mismatch: {a.shape} vs {b.shape}") from None


def add(a, b) -> Tensor:
    """Elementwise sum; also covers broadcast adds such as bias rows."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, "mul", (a, b), backward)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = ndtr(x.data)
    data = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        _accumulate(x, g * (cdf + x.data * pdf))

    return _make(data, "gelu", (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - data * data))

    return _make(data, "tanh", (x,), backward)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, data * (g - (g * data).sum(axis=-1, keepdims=True)))

    return _make(data, "softmax", (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm affine shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx)

    return _make(data, "layer_norm", (x, gamma, beta), backward)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat shape mismatch: {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(data, "concat", ts, backward)


def slice_(x, start: int, stop: int, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = x.data[idx]

    def backward(g):
        if not x.requires_grad:
            return
        if x.grad is None or not x._owned:
            full = np.zeros_like(x.data) if x.grad is None else np.array(x.grad)
            x.grad, x._owned = full, True
        x.grad[idx] += g

    return _make(data, "slice", (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    data = x.data.mean(axis=axis)
    n = x.data.size // max(np.asarray(data).size, 1)

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape) / n)

    return _make(np.asarray(data), "mean", (x,), backward)


def sum_squares(x) -> Tensor:
    x = as_tensor(x)
    data = np.asarray(np.sum(x.data * x.data))

    def backward(g):
        _accumulate(x, 2.0 * g * x.data)

    return _make(data, "sum_squares", (x,), backward)


# ----------------------------------------------------------- evaluation

Program = Callable[[dict, Sequence], Tensor]


def evaluate(program: Program, params: ParamSet, inputs: Sequence = ()) -> float:
    tracked = {k: Tensor(v) for k, v in params.items()}
    out = program(tracked, inputs)
    if out.data.size != 1:
        raise ValueError(f"program must return a scalar, got shape {out.shape}")
    return float(out.data)


def evaluate_with_gradients(program: Program, params: ParamSet, inputs: Sequence = ()):
    """Run ``program`` and return ``(value, grads)`` with grads keyed like params."""
    tracked = {k: Tensor(params[k], requires_grad=True) for k in sorted(params)}
    out = program(tracked, inputs)
    if out.data.size != 1:
        raise ValueError(f"program must return a scalar, got shape {out.shape}")
    if out.requires_grad:
        out.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tracked.items()}
    return float(out.data), grads


def finite_difference(program: Program, params: ParamSet, inputs: Sequence = (), h: float = 1e-5) -> ParamSet:
    """Central-difference gradient estimate, one parameter element at a time."""
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for k in sorted(work):
        arr = work[k]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate(program, work, inputs)
            flat[i] = orig - h
            fm = evaluate(program, work, inputs)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[k] = g
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||)``; zero when both are (numerically) zero."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
