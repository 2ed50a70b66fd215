"""Dense numeric kernel with hand-written reverse-mode gradients.

Every array here is a plain ``numpy.ndarray``. Rank-2 arrays are the basic
carrier; most ops also accept stacked leading batch axes and act on the last
two axes. Each forward op has a matching ``*_backward`` that maps the upstream
gradient to input gradients, and :func:`grad_check` compares those against
central differences.
"""
from __future__ import annotations

import hashlib
import math
from typing import Callable

import numpy as np

from .errors import CapabilityError, NumericError, ShapeError

LN_EPS = 1e-5


def as_grid(data, dtype=np.float64) -> np.ndarray:
    a = np.asarray(data, dtype=dtype)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a rank-2 grid, got shape {a.shape}")
    return a


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{what} contains non-finite values")
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- forward ops

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Softmax of ``m / scale`` along the last axis (max-subtracted)."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    x = m / scale
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(m: np.ndarray) -> np.ndarray:
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * m))


def silu(m: np.ndarray) -> np.ndarray:
    return m * sigmoid(m)


def layer_norm(x: np.ndarray, eps: float = LN_EPS):
    """Normalize the last axis to zero mean, unit variance. Returns (y, cache)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * rstd
    return y, (y, rstd)


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    d = pred - target
    return float(np.mean(d * d))


# --------------------------------------------------------------- backward ops

def matmul_backward(g, a, b):
    da = g @ np.swapaxes(b, -1, -2)
    db = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)


def softmax_backward(g, y, scale: float = 1.0):
    return y * (g - (g * y).sum(axis=-1, keepdims=True)) / scale


def sigmoid_backward(g, s):
    return g * s * (1.0 - s)


def silu_backward(g, x):
    s = sigmoid(x)
    return g * (s + x * s * (1.0 - s))


def layer_norm_backward(g, cache):
    y, rstd = cache
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * y).mean(axis=-1, keepdims=True)
    return rstd * (g - gm - y * gy)


def mse_backward(pred, target):
    return 2.0 * (pred - target) / pred.size


# ------------------------------------------------------------ op graph + check

def _vjp_matmul(g, ins, out, attrs):
    return matmul_backward(g, ins[0], ins[1])


def _vjp_add(g, ins, out, attrs):
    return _unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)


def _vjp_mul(g, ins, out, attrs):
    a, b = ins
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _vjp_softmax(g, ins, out, attrs):
    return (softmax_backward(g, out, attrs.get("scale", 1.0)),)


def _vjp_sigmoid(g, ins, out, attrs):
    return (sigmoid_backward(g, out),)


def _vjp_silu(g, ins, out, attrs):
    return (silu_backward(g, ins[0]),)


def _vjp_mean(g, ins, out, attrs):
    return (np.full_like(ins[0], float(g) / ins[0].size),)


def _vjp_sum(g, ins, out, attrs):
    return (np.full_like(ins[0], float(g)),)


def _vjp_mse(g, ins, out, attrs):
    d = mse_backward(ins[0], ins[1]) * float(g)
    return d, -d


def _vjp_layer_norm(g, ins, out, attrs):
    return (layer_norm_backward(g, attrs["_cache"]),)


def _fwd_layer_norm(ins, attrs):
    y, cache = layer_norm(ins[0])
    attrs["_cache"] = cache
    return y


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (lambda ins, at: matmul(ins[0], ins[1]), _vjp_matmul),
    "add": (lambda ins, at: ins[0] + ins[1], _vjp_add),
    "mul": (lambda ins, at: ins[0] * ins[1], _vjp_mul),
    "softmax_rows": (lambda ins, at: softmax_rows(ins[0], at.get("scale", 1.0)), _vjp_softmax),
    "sigmoid": (lambda ins, at: sigmoid(ins[0]), _vjp_sigmoid),
    "silu": (lambda ins, at: silu(ins[0]), _vjp_silu),
    "layer_norm": (_fwd_layer_norm, _vjp_layer_norm),
    "mean": (lambda ins, at: np.asarray(ins[0].mean()), _vjp_mean),
    "sum": (lambda ins, at: np.asarray(ins[0].sum()), _vjp_sum),
    "mse": (lambda ins, at: np.asarray(mse(ins[0], ins[1])), _vjp_mse),
}

SUPPORTED_OPS = frozenset(_OPS)


class Graph:
    """A straight-line composition of supported ops ending in a scalar.

    >>> g = Graph()
    >>> x, w = g.input("x"), g.input("w")
    >>> g.op("sum", g.op("softmax_rows", g.op("matmul", x, w), scale=2.0))
    """

    def __init__(self):
        self._inputs: list[str] = []
        self._nodes: list[tuple[str, tuple[int, ...], dict]] = []

    def input(self, name: str) -> int:
        self._inputs.append(name)
        self._nodes.append(("input", (), {"name": name}))
        return len(self._nodes) - 1

    def op(self, name: str, *args: int, **attrs) -> int:
        if name not in _OPS:
            raise CapabilityError(f"unsupported op {name!r}; supported: {sorted(_OPS)}")
        for a in args:
            if not 0 <= a < len(self._nodes):
                raise ValueError(f"unknown node id {a}")
        self._nodes.append((name, tuple(args), dict(attrs)))
        return len(self._nodes) - 1

    def _forward(self, inputs: dict[str, np.ndarray]):
        vals = []
        for name, args, attrs in self._nodes:
            if name == "input":
                vals.append(np.asarray(inputs[attrs["name"]], dtype=np.float64))
            else:
                vals.append(_OPS[name][0]([vals[a] for a in args], attrs))
        return vals

    def loss(self, inputs: dict[str, np.ndarray]) -> float:
        return float(np.sum(self._forward(inputs)[-1]))

    def loss_and_grads(self, inputs: dict[str, np.ndarray]):
        vals = self._forward(inputs)
        grads: list[np.ndarray | None] = [None] * len(vals)
        grads[-1] = np.ones_like(vals[-1])
        for i in range(len(self._nodes) - 1, -1, -1):
            name, args, attrs = self._nodes[i]
            if name == "input" or grads[i] is None:
                continue
            parts = _OPS[name][1](grads[i], [vals[a] for a in args], vals[i], attrs)
            for a, ga in zip(args, parts):
                grads[a] = ga if grads[a] is None else grads[a] + ga
        out = {}
        for i, (name, _, attrs) in enumerate(self._nodes):
            if name == "input":
                g = grads[i]
                out[attrs["name"]] = np.zeros_like(vals[i]) if g is None else g
        return float(np.sum(vals[-1])), out


def grad_check(op_graph, inputs: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op_graph`` is anything with ``loss(inputs)`` and
    ``loss_and_grads(inputs)``: a :class:`Graph`, or a model loss wrapper.
    Only the keys present in ``inputs`` are perturbed.
    """
    if not (hasattr(op_graph, "loss") and hasattr(op_graph, "loss_and_grads")):
        raise CapabilityError(f"{type(op_graph).__name__} does not expose loss/loss_and_grads")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    work = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    _, analytic = op_graph.loss_and_grads(work)
    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        ga = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = op_graph.loss(work)
            flat[i] = orig - eps
            down = op_graph.loss(work)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            denom = max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, abs(ga[i] - num) / denom)
    return worst


# ------------------------------------------------------------------------- RNG

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *labels) -> int:
    """Hash ``(seed, labels...)`` to a fresh 64-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed) & _MASK64).encode())
    for lab in labels:
        h.update(b"\x1f")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest(), "little")


class Rng:
    """PCG64 stream with fixed transforms.

    Uniforms are ``(raw >> 11) * 2**-53`` of each raw 64-bit PCG64 output.
    Normals use Box-Muller on consecutive uniform pairs ``(u1, u2)``:
    ``sqrt(-2 ln(1 - u1)) * (cos, sin)(2 pi u2)``, emitted cos-first.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._bits = np.random.PCG64(self.seed)

    def derive(self, *labels) -> "Rng":
        return Rng(derive_seed(self.seed, *labels))

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n)

    def uniform(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n].reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        u = self.uniform(size)
        out = np.floor(np.asarray(u) * (high - low)).astype(np.int64) + low
        return int(out) if size is None else out

    def choice(self, n: int, p=None) -> int:
        if p is None:
            return self.integers(0, n)
        cdf = np.cumsum(np.asarray(p, dtype=np.float64))
        return int(min(np.searchsorted(cdf, self.uniform() * cdf[-1], side="right"), n - 1))
