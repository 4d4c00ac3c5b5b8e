"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Var`` wraps a numpy array and records how it was produced so that
``backward()`` can push gradients to every ancestor. Primitives are the ones
needed by a small 1D-convolutional pipeline: convolution, affine maps,
activations, nearest-neighbour upsampling, row gathering and pairwise squared
distances, plus elementwise arithmetic with numpy-style broadcasting.

Everything is float64; there is no GPU path and no in-place mutation of
values that already feed a graph.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def make_rng(*seed_parts: int | str) -> np.random.Generator:
    """Deterministic random generator (NumPy PCG64).

    The same seed parts always yield the same draw stream, on every platform.
    Multiple parts let callers derive independent, collision-free streams,
    e.g. ``make_rng(seed, trial, "init")``; string parts are folded in via a
    stable hash.
    """
    ints = [
        int.from_bytes(hashlib.sha256(p.encode()).digest()[:8], "little")
        if isinstance(p, str)
        else int(p)
        for p in seed_parts
    ]
    if len(ints) == 1:
        return np.random.default_rng(ints[0])
    return np.random.default_rng(ints)


class Var:
    """A value in a differentiable computation graph.

    ``value`` is a float64 ndarray; ``grad`` has the same shape and is filled
    by ``backward()``. Leaf nodes (parameters and constants) have no parents.
    Graphs are acyclic and confined to one logical thread; independent graphs
    may be evaluated concurrently.
    """

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(
        self,
        value,
        parents: tuple = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, value={self.value!r})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: _accum(self, -g))

    def __sub__(self, other):
        return add(self, -_to_var(other))

    def __rsub__(self, other):
        return add(_to_var(other), -self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    # -- reductions / views -------------------------------------------------

    def sum(self, axis: int | None = None) -> "Var":
        if axis is None:
            out_backward = lambda g: _accum(self, np.full_like(self.value, float(g)))
            return Var(self.value.sum(), (self,), out_backward)
        shape = self.value.shape

        def axis_backward(g):
            _accum(self, np.broadcast_to(np.expand_dims(g, axis), shape).copy())

        return Var(self.value.sum(axis=axis), (self,), axis_backward)

    def mean(self, axis: int | None = None) -> "Var":
        if axis is None:
            n = self.value.size
            out_backward = lambda g: _accum(self, np.full_like(self.value, float(g) / n))
            return Var(self.value.mean(), (self,), out_backward)
        return self.sum(axis) / self.value.shape[axis]

    def reshape(self, shape) -> "Var":
        orig = self.value.shape
        return Var(
            self.value.reshape(shape),
            (self,),
            lambda g: _accum(self, g.reshape(orig)),
        )

    def backward(self) -> None:
        backward(self)


def _to_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _accum(node: Var, g: np.ndarray) -> None:
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the axes numpy broadcasting expanded, back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = _to_var(a), _to_var(b)
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ShapeMismatchError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def out_backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return Var(value, (a, b), out_backward)


def mul(a, b) -> Var:
    a, b = _to_var(a), _to_var(b)
    try:
        value = a.value * b.value
    except ValueError as exc:
        raise ShapeMismatchError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def out_backward(g):
        _accum(a, _unbroadcast(g * b.value, a.shape))
        _accum(b, _unbroadcast(g * a.value, b.shape))

    return Var(value, (a, b), out_backward)


def relu(x) -> Var:
    """Elementwise max(x, 0). The subgradient at exactly 0 is 0."""
    x = _to_var(x)
    mask = x.value > 0
    return Var(
        np.where(mask, x.value, 0.0),
        (x,),
        lambda g: _accum(x, g * mask),
    )


def sigmoid(x) -> Var:
    x = _to_var(x)
    v = x.value
    # split by sign so exp never overflows
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return Var(s, (x,), lambda g: _accum(x, g * s * (1.0 - s)))


def exp(x) -> Var:
    x = _to_var(x)
    e = np.exp(x.value)
    return Var(e, (x,), lambda g: _accum(x, g * e))


def log(x) -> Var:
    x = _to_var(x)
    return Var(np.log(x.value), (x,), lambda g: _accum(x, g / x.value))


def sqrt(x) -> Var:
    """Elementwise square root; the gradient at exactly 0 is defined as 0."""
    x = _to_var(x)
    s = np.sqrt(x.value)

    def out_backward(g):
        _accum(x, np.where(s > 0, g / (2.0 * np.where(s > 0, s, 1.0)), 0.0))

    return Var(s, (x,), out_backward)


def clip(x, lo: float, hi: float) -> Var:
    """Clamp into [lo, hi]; gradient passes only where the clamp is inactive."""
    x = _to_var(x)
    mask = (x.value >= lo) & (x.value <= hi)
    return Var(
        np.clip(x.value, lo, hi),
        (x,),
        lambda g: _accum(x, g * mask),
    )


def softmax(x) -> Var:
    """Softmax along the last axis, numerically stabilised."""
    x = _to_var(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def out_backward(g):
        _accum(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return Var(s, (x,), out_backward)


def dense(x, weights, bias=None) -> Var:
    """Affine map ``weights @ x + bias``.

    ``weights`` is (m, n); ``x`` is (n,) or batched (B, n); ``bias`` is (m,)
    or None for zero bias. Output is (m,) or (B, m).
    """
    x, w = _to_var(x), _to_var(weights)
    if w.value.ndim != 2:
        raise ShapeMismatchError(f"dense weights must be 2-D, got shape {w.shape}")
    m, n = w.shape
    if x.value.ndim not in (1, 2) or x.shape[-1] != n:
        raise ShapeMismatchError(
            f"dense input shape {x.shape} incompatible with weights shape {w.shape}"
        )
    b = _to_var(np.zeros(m)) if bias is None else _to_var(bias)
    if b.shape != (m,):
        raise ShapeMismatchError(f"dense bias shape {b.shape} != ({m},)")

    batched = x.value.ndim == 2
    if batched:
        value = x.value @ w.value.T + b.value
    else:
        value = w.value @ x.value + b.value

    def out_backward(g):
        if batched:
            _accum(x, g @ w.value)
            _accum(w, g.T @ x.value)
            _accum(b, g.sum(axis=0))
        else:
            _accum(x, w.value.T @ g)
            _accum(w, np.outer(g, x.value))
            _accum(b, g)

    return Var(value, (x, w, b), out_backward)


def conv1d_output_length(length: int, kernel_size: int, stride: int = 1, padding: int = 0) -> int:
    """floor((L + 2*padding - K) / stride) + 1; <= 0 means the window never fits."""
    return (length + 2 * padding - kernel_size) // stride + 1


def conv1d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Var:
    """1-D cross-correlation.

    ``x`` is (C_in, L) or batched (B, C_in, L); ``kernels`` is
    (C_out, C_in, K); ``bias`` is (C_out,) or None. Output length is
    floor((L + 2*padding - K) / stride) + 1.
    """
    x, w = _to_var(x), _to_var(kernels)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    if w.value.ndim != 3:
        raise ShapeMismatchError(f"conv1d kernels must be 3-D, got shape {w.shape}")
    if x.value.ndim not in (2, 3):
        raise ShapeMismatchError(f"conv1d input must be 2-D or 3-D, got shape {x.shape}")
    c_out, c_in, k = w.shape
    if x.shape[-2] != c_in:
        raise ShapeMismatchError(
            f"conv1d input shape {x.shape} has {x.shape[-2]} channels but "
            f"kernels shape {w.shape} expect {c_in}"
        )
    length = x.shape[-1]
    if length + 2 * padding < k:
        raise ShapeMismatchError(
            f"conv1d window {k} exceeds padded length {length + 2 * padding}"
        )
    b = _to_var(np.zeros(c_out)) if bias is None else _to_var(bias)
    if b.shape != (c_out,):
        raise ShapeMismatchError(f"conv1d bias shape {b.shape} != ({c_out},)")

    batched = x.value.ndim == 3
    x3 = x.value if batched else x.value[None]
    xp = np.pad(x3, ((0, 0), (0, 0), (padding, padding)))
    windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]  # (B, C_in, L_out, K)
    l_out = windows.shape[2]
    out = np.einsum("oik,bilk->bol", w.value, windows, optimize=True) + b.value[:, None]

    def out_backward(g):
        g3 = g if batched else g[None]
        _accum(w, np.einsum("bol,bilk->oik", g3, windows, optimize=True))
        _accum(b, g3.sum(axis=(0, 2)))
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j : j + stride * l_out : stride] += np.einsum(
                "bol,oi->bil", g3, w.value[:, :, j], optimize=True
            )
        gx = gxp[:, :, padding : padding + length]
        _accum(x, gx if batched else gx[0])

    return Var(out if batched else out[0], (x, w, b), out_backward)


def upsample_nearest(x, factor: int) -> Var:
    """Repeat each time step ``factor`` times along the last axis."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    x = _to_var(x)

    def out_backward(g):
        _accum(x, g.reshape(*x.shape, factor).sum(axis=-1))

    return Var(np.repeat(x.value, factor, axis=-1), (x,), out_backward)


def take_rows(x, indices) -> Var:
    """Gather rows of a 2-D value; gradients scatter-add back to the source."""
    x = _to_var(x)
    idx = np.asarray(indices, dtype=np.intp)

    def out_backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return Var(x.value[idx], (x,), out_backward)


def pairwise_sqdist(a, b) -> Var:
    """Matrix of squared Euclidean distances between rows of ``a`` and ``b``."""
    a, b = _to_var(a), _to_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(
            f"pairwise_sqdist needs (m, d) and (n, d), got {a.shape} and {b.shape}"
        )
    diff = a.value[:, None, :] - b.value[None, :, :]  # (m, n, d)

    def out_backward(g):
        weighted = g[:, :, None] * diff
        _accum(a, 2.0 * weighted.sum(axis=1))
        _accum(b, -2.0 * weighted.sum(axis=0))

    return Var((diff * diff).sum(axis=-1), (a, b), out_backward)


def backward(objective: Var) -> None:
    """Accumulate d(objective)/d(node) into ``grad`` of every ancestor.

    The objective must be scalar. Gradients add into any existing ``grad``,
    so zero parameter gradients between optimisation steps.
    """
    if objective.value.size != 1:
        raise ShapeMismatchError(
            f"backward needs a scalar objective, got shape {objective.shape}"
        )
    topo: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(objective, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    _accum(objective, np.ones_like(objective.value))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(nodes: Sequence[Var]) -> None:
    for node in nodes:
        node.grad = None


@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients against central differences.

    ``rel_errors`` holds |analytic - numeric| / max(1, |analytic|, |numeric|)
    per coordinate; the check passes iff the max is within tolerance.
    """

    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def finite_difference_check(
    f: Callable[[Var], Var],
    point,
    h: float = 1e-3,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Check d f / d point against central finite differences.

    ``f`` maps a Var to a scalar Var. The analytic gradient comes from one
    backward pass at ``point``; the numeric one from
    (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    point = np.asarray(point, dtype=np.float64)

    leaf = Var(point)
    out = f(leaf)
    backward(out)
    analytic = np.zeros_like(point) if leaf.grad is None else leaf.grad.copy()

    numeric = np.zeros_like(point)
    flat = point.ravel()
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] = flat[i] + h
        f_plus = float(f(Var(shifted.reshape(point.shape))).value)
        shifted[i] = flat[i] - h
        f_minus = float(f(Var(shifted.reshape(point.shape))).value)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(
                f"objective is not finite at perturbed coordinate {i}: "
                f"f(+h)={f_plus}, f(-h)={f_minus}"
            )
        numeric.ravel()[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(
        analytic=analytic,
        numeric=numeric,
        rel_errors=rel,
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        tol=tol,
    )
