"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every differentiable op records a node (inputs + local gradient closure) when
any input requires grad.  ``backward`` walks those nodes in reverse
topological order, so shared subexpressions accumulate their gradients.

Data lives in numpy arrays; the kernels here are thin wrappers that add the
gradient rules a small ViT needs.
"""

from __future__ import annotations

import math
import os
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEBUG = bool(os.environ.get("IMAFORMER_DEBUG"))

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ZeroNormError(ValueError):
    """Raised by cosine similarity when an input vector has zero norm."""


class ClampWarning(RuntimeWarning):
    """Emitted when cross-entropy had to clamp a zero probability."""


class Tensor:
    """An n-d float64 array that can take part in gradient recording.

    ``grad`` is populated on leaves with ``requires_grad=True`` by
    :func:`backward`; it accumulates across separate roots until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_released")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if DEBUG and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._released = False

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def backward(self) -> None:
        backward(self)


ArrayLike = Tensor | np.ndarray | float | int


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise arithmetic ---------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


# -- reductions and shape ops ---------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes)
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes"
    )


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(a, -1, -2)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    basic = all(
        isinstance(i, (int, slice)) or i is None or i is Ellipsis
        for i in (index if isinstance(index, tuple) else (index,))
    )

    def grad_fn(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), grad_fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(out, tuple(tensors), grad_fn, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in tensors)) from None
    ax = axis % out.ndim
    return _make(
        out,
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))),
        "stack",
    )


# -- linear algebra -------------------------------------------------------------
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast.

    For 2-D operands this is ``C[i, j] = sum_t A[i, t] * B[t, j]`` with
    ``dA = dC @ B.T`` and ``dB = A.T @ dC``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner extents must agree")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn, "matmul")


# -- neural network kernels -----------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError("softmax", x.shape, detail=f"axis {axis} out of range")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the trailing axis to zero mean / unit (population) variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), grad_fn, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), grad_fn, "gelu")


def cosine_similarity(a: ArrayLike, b: ArrayLike, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; leading axes broadcast.

    Computed as ``a.b / sqrt(|a|^2 |b|^2)`` so that identical inputs give
    exactly 1.0.
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("cosine_similarity", a, b)
    na = (a.data * a.data).sum(axis=axis, keepdims=True)
    nb = (b.data * b.data).sum(axis=axis, keepdims=True)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ZeroNormError("cosine_similarity: zero-norm input vector")
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    denom = np.sqrt(na * nb)
    c = dot / denom
    out = np.squeeze(c, axis=axis)

    def grad_fn(g):
        g = np.expand_dims(g, axis)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g * (b.data / denom - c * a.data / na), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(g * (a.data / denom - c * b.data / nb), b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn, "cosine")


def cross_entropy(probs: Tensor, target, eps: float = 1e-12) -> Tensor:
    """Mean negative log-likelihood ``-ln probs[..., target]``.

    ``probs`` is ``(N,)`` with an int target, or ``(B, N)`` with ``B`` targets.
    Probabilities of exactly zero are clamped to ``eps`` and a
    :class:`ClampWarning` is emitted.
    """
    probs = as_tensor(probs)
    target = np.asarray(target, dtype=np.int64)
    n = probs.shape[-1]
    if np.any(target < 0) or np.any(target >= n):
        raise IndexError(f"cross_entropy: target out of range [0, {n})")
    if probs.ndim == 1:
        if target.ndim != 0:
            raise ShapeError("cross_entropy", probs.shape, target.shape)
        picked = probs[int(target)]
    else:
        if probs.shape[:-1] != target.shape:
            raise ShapeError("cross_entropy", probs.shape, target.shape)
        picked = probs[np.arange(target.size), target.ravel()] if probs.ndim == 2 else None
        if picked is None:
            raise ShapeError("cross_entropy", probs.shape, detail="expected 1-D or 2-D probs")
    if np.any(picked.data <= 0.0):
        warnings.warn("cross_entropy: clamped zero probability", ClampWarning, stacklevel=2)
        picked = _clamp_min(picked, eps)
    return -mean(log(picked))


def _clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo
    return _make(np.where(mask, x.data, lo), (x,), lambda g: (g * mask,), "clamp")


# -- backward pass ---------------------------------------------------------------
def topological_order(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root``, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf with d(root)/d(leaf).

    A graph can be differentiated once: calling ``backward`` again on a root
    (or through nodes already consumed by another root) raises RuntimeError.
    """
    if root.data.size != 1 or root.ndim > 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise RuntimeError("backward: root does not require grad")
    order = topological_order(root)
    if any(n._released for n in order if n._parents):
        raise RuntimeError("backward: graph already differentiated; rebuild it with a new forward")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._released = True
        node._backward = None


# -- verification -----------------------------------------------------------------
def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``."""
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x0)).item()
        flat[i] = orig - h
        fm = f(Tensor(x0)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check_many(
    loss_fn: Callable[[], Tensor], leaves: Iterable[Tensor], h: float = 1e-4
) -> dict[int, float]:
    """Central-difference check of ``loss_fn`` against every tensor in ``leaves``.

    ``loss_fn`` must rebuild its graph from the current ``.data`` of the
    leaves on every call.  Returns the max relative error per leaf index.
    """
    leaves = list(leaves)
    saved = [t.requires_grad for t in leaves]
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    try:
        backward(loss_fn())
        errors = {}
        for k, t in enumerate(leaves):
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * h)
            rel = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(analytic.reshape(-1)))
            errors[k] = float(rel.max())
        return errors
    finally:
        for t, rg in zip(leaves, saved):
            t.requires_grad = rg
            t.grad = None
