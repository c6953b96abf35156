"""Reverse-mode automatic differentiation on dense float64 arrays.

A `Tensor` wraps a numpy array and records the operation that produced
it; calling `backward()` on a scalar loss walks the tape once in reverse
topological order and accumulates gradients into every tensor created
with `requires_grad=True`.  All arithmetic is float64.  Inference code
wraps forward passes in `no_grad()` so no tape is built.

The op set is deliberately small: what the package's networks need
(linear layers, 3x3 convolutions expressed as shifted matmuls, pooling
by reshape+mean, layer norm, softmax, the two losses) and nothing else.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalFailure
from .rng import Rng

__all__ = [
    "Tensor", "no_grad", "add", "mul", "matmul", "relu", "reshape", "mean",
    "tsum", "concat", "pad2d", "crop2d", "take_rows", "softmax", "layer_norm",
    "l2_normalize_rows", "mse", "cross_entropy_logits", "scale",
    "sgd_step", "adam_step", "AdamState", "zero_grad", "grad_check",
    "GradCheckReport", "LAYER_NORM_EPS",
]

LAYER_NORM_EPS = 1e-5

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus its slot on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate gradients of this scalar into the whole tape.

        Each node is visited exactly once, in reverse topological order.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Convenience arithmetic used by the network code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wants_grad(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad or t._backward is not None
                                 for t in tensors)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _wants_grad(*parents):
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._backward is not None):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data * c

    def backward(g):
        _accum(a, g * c)

    return _make(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0.0))

    return _make(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        gg = g
        if not keepdims:
            for ax in sorted(ax % a.data.ndim for ax in axes):
                gg = np.expand_dims(gg, ax)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offs = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(data, tuple(ts), backward)


def pad2d(a: Tensor, p: int) -> Tensor:
    """Zero-pad the two spatial axes of an NHWC tensor by `p`."""
    a = _as_tensor(a)
    data = np.pad(a.data, ((0, 0), (p, p), (p, p), (0, 0)))

    def backward(g):
        _accum(a, g[:, p:-p, p:-p, :])

    return _make(data, (a,), backward)


def crop2d(a: Tensor, y0: int, x0: int, h: int, w: int) -> Tensor:
    """Take the [y0:y0+h, x0:x0+w] spatial window of an NHWC tensor."""
    a = _as_tensor(a)
    data = a.data[:, y0:y0 + h, x0:x0 + w, :]

    def backward(g):
        gg = np.zeros_like(a.data)
        gg[:, y0:y0 + h, x0:x0 + w, :] = g
        _accum(a, gg)

    return _make(data, (a,), backward)


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup (embedding gather)."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    data = table.data[idx]

    def backward(g):
        gg = np.zeros_like(table.data)
        np.add.at(gg, idx, g)
        _accum(table, gg)

    return _make(data, (table,), backward)


def softmax(a: Tensor) -> Tensor:
    """Shift-stabilized softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(a, (g - (g * y).sum(axis=-1, keepdims=True)) * y)

    return _make(y, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    data = gamma.data * xhat + beta.data

    def backward(g):
        ggam = g * gamma.data
        dx = inv * (ggam - ggam.mean(axis=-1, keepdims=True)
                    - xhat * (ggam * xhat).mean(axis=-1, keepdims=True))
        _accum(a, dx)
        red = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=red))
        _accum(beta, g.sum(axis=red))

    return _make(data, (a, gamma, beta), backward)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    a = _as_tensor(a)
    norms = np.sqrt((a.data ** 2).sum(axis=-1, keepdims=True))
    norms = np.maximum(norms, eps)
    y = a.data / norms

    def backward(g):
        _accum(a, (g - y * (g * y).sum(axis=-1, keepdims=True)) / norms)

    return _make(y, (a,), backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all entries (scalar)."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    diff = pred.data - target.data
    data = np.array((diff ** 2).mean())
    n = diff.size

    def backward(g):
        gd = (2.0 / n) * diff * g
        _accum(pred, gd)
        _accum(target, -gd)

    return _make(data, (pred, target), backward)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels under row-wise softmax logits."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    b = logits.data.shape[0]
    data = np.array(-logp[np.arange(b), labels].mean())

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        _accum(logits, (g / b) * p)

    return _make(data, (logits,), backward)


def zero_grad(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def sgd_step(params: dict[str, Tensor], lr: float) -> None:
    """Plain momentum-free gradient descent update."""
    for p in params.values():
        if p.grad is not None:
            p.data -= lr * p.grad


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    state.t += 1
    for name, p in params.items():
        if p.grad is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * p.grad
        v *= beta2
        v += (1 - beta2) * p.grad ** 2
        mhat = m / (1 - beta1 ** state.t)
        vhat = v / (1 - beta2 ** state.t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class GradCheckReport:
    """Comparison of analytic gradients against central finite differences."""
    max_rel_error: float
    per_param: dict[str, float]
    entries_checked: int

    def __str__(self) -> str:
        worst = max(self.per_param, key=self.per_param.get)
        return (f"grad_check: max_rel_error={self.max_rel_error:.3e} "
                f"over {self.entries_checked} entries (worst: {worst})")


def grad_check(loss_fn, params: dict[str, Tensor], eps: float = 1e-5,
               rng: Rng | None = None, max_entries: int = 64) -> GradCheckReport:
    """Compare analytic gradients of `loss_fn` with central differences.

    Every entry of every parameter is checked, unless a parameter has
    more than `max_entries` entries, in which case a seeded subsample of
    `max_entries` is used.  Relative error uses a small-denominator
    guard of 1e-3 so entries with (near-)zero gradient are judged on an
    absolute scale.

    Args:
        loss_fn: zero-argument callable evaluating the scalar loss from
            the current parameter values.
        params: named parameters with requires_grad=True.
        eps: central-difference step, in (0, 1e-2].
        rng: stream for entry subsampling (defaults to a fixed seed).
        max_entries: subsample cap per parameter (>= 64).

    Raises:
        ValueError: empty parameter dict or eps out of range.
        NumericalFailure: loss is non-finite.
    """
    if not params:
        raise ValueError("grad_check requires at least one parameter")
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    max_entries = max(64, int(max_entries))
    if rng is None:
        rng = Rng(0x67AD, 0)

    zero_grad(params)
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise NumericalFailure("loss is non-finite")
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None
                       else np.zeros_like(p.data))
                for name, p in params.items()}

    per_param: dict[str, float] = {}
    total = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_entries:
            entries = np.arange(n)
        else:
            entries = np.sort(rng.choice(n, size=max_entries, replace=False))
        worst = 0.0
        for i in entries:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                lp = float(loss_fn().data)
                flat[i] = orig - eps
                lm = float(loss_fn().data)
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NumericalFailure("perturbed loss is non-finite")
            numeric = (lp - lm) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, rel)
        per_param[name] = worst
        total += len(entries)

    return GradCheckReport(max_rel_error=max(per_param.values()),
                           per_param=per_param, entries_checked=total)
