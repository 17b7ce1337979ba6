"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps an ndarray and, when ``requires_grad`` is set anywhere in
its history, records the operation graph as it is built (define-by-run).
``backward()`` on a scalar replays that record once per node in reverse
topological order. The op set is deliberately small: exactly what transformer
blocks, per-position projections, softmax/normalisation and the losses in
this package need. Dense row-major storage only; no views with overlapping
writes; no GPU.

float32 is the training dtype, float64 the gradient-check dtype. Ops preserve
the dtype of their inputs.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True
_PARAM_TRACKERS: list[set[str]] = []

_GELU_C = float(np.sqrt(2.0 / np.pi))


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def track_param_access():
    """Collect the names of every named tensor used in any op in the block.

    Works in both grad and no-grad mode; used to assert that inference never
    touches training-only parameters.
    """
    seen: set[str] = set()
    _PARAM_TRACKERS.append(seen)
    try:
        yield seen
    finally:
        _PARAM_TRACKERS.remove(seen)


def _note_access(parents: tuple["Tensor", ...]) -> None:
    if _PARAM_TRACKERS:
        for p in parents:
            if p.name is not None:
                for tracker in _PARAM_TRACKERS:
                    tracker.add(p.name)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense n-dimensional array with optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def _accum(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    # -- backward -----------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable requires_grad tensor.

        Only scalar roots are accepted; each recorded node is visited exactly
        once, in reverse topological order.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    def __getitem__(self, key):
        return getitem(self, key)

    # method spellings used throughout the package
    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return permute(self, axes if axes else None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return permute(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd: Callable[[np.ndarray], None]) -> Tensor:
    _note_access(parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bwd
    return out


def tensor(data, dtype=None, requires_grad: bool = False, name: str | None = None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad, name=name)


# -- elementwise arithmetic (numpy broadcasting rules) -----------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accum(-g)

    return _make(-a.data, (a,), bwd)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def bwd(g):
        if a.requires_grad:
            a._accum(g * exponent * a.data ** (exponent - 1.0))

    return _make(out, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    return pow_const(a, 0.5)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * out)

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _make(out, (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * np.sign(a.data))

    return _make(out, (a,), bwd)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); subgradient 0 on the clamped side."""
    out = np.maximum(a.data, floor)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * (a.data > floor))

    return _make(out, (a,), bwd)


# -- linear algebra and shape ops --------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    k, n = b.data.shape[-2], b.data.shape[-1]
    # a stacked against a plain matrix collapses to one GEMM (the hot path:
    # activations @ weights); everything else takes numpy's stacked product.
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.data.shape[:-1] + (n,))
    else:
        out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            if b.ndim == 2:
                ga = (g.reshape(-1, n) @ b.data.T).reshape(a.data.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
            a._accum(ga)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
            b._accum(gb)

    return _make(out, (a, b), bwd)


def permute(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            a._accum(np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bwd(g):
        if a.requires_grad:
            a._accum(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), bwd)


def getitem(a: Tensor, key) -> Tensor:
    """Basic indexing (ints/slices); gradient scatters back into place."""
    out = a.data[key]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] = g
            a._accum(full)

    return _make(np.ascontiguousarray(out), (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                p._accum(g[tuple(idx)])

    return _make(out, tuple(parts), bwd)


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """``a[indices]`` along axis 0; indices may repeat (grads accumulate)."""
    idx = np.asarray(indices)
    out = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

    return _make(out, (a,), bwd)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Per-batch row selection: out[i] = a[i, indices[i]] for a of shape (B, L, ...)."""
    idx = np.asarray(indices)
    batch = np.arange(a.data.shape[0])
    out = a.data[batch, idx]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (batch, idx), g)
            a._accum(full)

    return _make(out, (a,), bwd)


def take_pairs(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Element selection from a 2-d tensor: out[k] = a[rows[k], cols[k]]."""
    r = np.asarray(rows)
    c = np.asarray(cols)
    out = a.data[r, c]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (r, c), g)
            a._accum(full)

    return _make(out, (a,), bwd)


# -- reductions ---------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]))

    def bwd(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g / count, a.data.shape).copy())

    return _make(out, (a,), bwd)


# -- nonlinearities -----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically guarded softmax: per-slice max is subtracted before exp."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            inner = (g * out).sum(axis=axis, keepdims=True)
            a._accum(out * (g - inner))

    return _make(out, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """GELU in the tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        if a.requires_grad:
            sech2 = 1.0 - t * t
            slope = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * slope))

    return _make(out, (a,), bwd)


# -- composites ---------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale+shift."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = pow_const(add(var, tensor(np.asarray(eps, dtype=x.dtype))), -0.5)
    return add(mul(mul(centered, inv), gamma), beta)


def l1_norm(x: Tensor) -> Tensor:
    return sum_(absolute(x))


def l2_norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return sqrt(sum_(mul(x, x), axis=axis, keepdims=keepdims))


def l2_normalize(x: Tensor, axis: int = -1, floor: float = 1e-12) -> Tensor:
    """Rows scaled to unit L2 norm, with a norm floor guarding zero vectors."""
    norms = clamp_min(l2_norm(x, axis=axis, keepdims=True), floor)
    return div(x, norms)


def cosine_matrix(a: Tensor, b: Tensor, floor: float = 1e-12) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    return matmul(l2_normalize(a, floor=floor), permute(l2_normalize(b, floor=floor)))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (..., C*r*r, H, W) to (..., C, H*r, W*r).

    Output pixel (ch, h*r+i, w*r+j) comes from input channel ch*r*r + i*r + j
    at grid cell (h, w).
    """
    *lead, cr2, h, w = x.shape
    if cr2 % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: channel count {cr2} not divisible by {r * r}")
    c = cr2 // (r * r)
    n = len(lead)
    t = reshape(x, tuple(lead) + (c, r, r, h, w))
    axes = tuple(range(n)) + (n, n + 3, n + 1, n + 4, n + 2)
    t = permute(t, axes)
    return reshape(t, tuple(lead) + (c, h * r, w * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    *lead, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {(hr, wr)} not divisible by {r}")
    h, w = hr // r, wr // r
    n = len(lead)
    t = reshape(x, tuple(lead) + (c, h, r, w, r))
    axes = tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3)
    t = permute(t, axes)
    return reshape(t, tuple(lead) + (c * r * r, h, w))
