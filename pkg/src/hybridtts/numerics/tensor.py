"""Dense float tensors with reverse-mode automatic differentiation on numpy.

Values default to float32 (row-major numpy arrays); float64 inputs are kept
as-is so the same ops can be run at double precision for finite-difference
oracles. The tape is built through parent links on each output tensor and is
confined to the thread that runs the forward pass; `backward` releases it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], list] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- shape / reduction shorthands -------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def sqrt(self):
        return tsqrt(self)

    def abs(self):
        return tabs(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise primitives ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def back(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape))]

    return _make(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def back(g):
        return [
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        ]

    return _make(out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def back(g):
        return [
            (a, _unbroadcast(g / b.data, a.data.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        ]

    return _make(out, (a, b), back)


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    p = float(p)
    out = a.data**p

    def back(g):
        return [(a, g * p * a.data ** (p - 1.0))]

    return _make(out, (a,), back)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)

    def back(g):
        return [(a, g * (1.0 - out * out))]

    return _make(out, (a,), back)


def texp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def back(g):
        return [(a, g * out)]

    return _make(out, (a,), back)


def tlog(a) -> Tensor:
    a = _wrap(a)
    out = np.log(a.data)

    def back(g):
        return [(a, g / a.data)]

    return _make(out, (a,), back)


def tsqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)

    def back(g):
        return [(a, g * 0.5 / out)]

    return _make(out, (a,), back)


def tabs(a) -> Tensor:
    a = _wrap(a)
    out = np.abs(a.data)

    def back(g):
        return [(a, g * np.sign(a.data))]

    return _make(out, (a,), back)


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)

    def back(g):
        return [(a, g * (a.data > 0))]

    return _make(out, (a,), back)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _wrap(a)
    out = np.where(a.data > 0, a.data, slope * a.data)

    def back(g):
        return [(a, g * np.where(a.data > 0, 1.0, slope).astype(a.data.dtype))]

    return _make(out, (a,), back)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        return [(a, g * out * (1.0 - out))]

    return _make(out, (a,), back)


def clip(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)

    def back(g):
        return [(a, g * ((a.data > lo) & (a.data < hi)))]

    return _make(out, (a,), back)


# -- reductions and shape ops ----------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(x % a.data.ndim for x in axes):
                g = np.expand_dims(g, ax)
        return [(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))]

    return _make(out, (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def back(g):
        return [(a, g.reshape(a.data.shape))]

    return _make(out, (a,), back)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    out = np.transpose(a.data, axes)

    def back(g):
        inv = None if axes is None else tuple(np.argsort(axes))
        return [(a, np.transpose(g, inv))]

    return _make(out, (a,), back)


def getitem(a, key) -> Tensor:
    a = _wrap(a)
    out = a.data[key]

    def back(g):
        gx = np.zeros_like(a.data)
        gx[key] = g
        return [(a, gx)]

    return _make(out, (a,), back)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def back(g):
        grads = []
        start = 0
        for t, s in zip(ts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + s)
            grads.append((t, g[tuple(idx)]))
            start += s
        return grads

    return _make(out, ts, back)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    return concat([reshape(t, t.data.shape[:axis] + (1,) + t.data.shape[axis:]) for t in ts], axis=axis)


def pad(a, pads) -> Tensor:
    """Zero-pad; `pads` is a ((before, after), ...) tuple per axis."""
    a = _wrap(a)
    out = np.pad(a.data, pads)

    def back(g):
        idx = tuple(slice(b, g.shape[i] - e if e else None) for i, (b, e) in enumerate(pads))
        return [(a, g[idx])]

    return _make(out, (a,), back)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return [
            (a, _unbroadcast(ga, a.data.shape)),
            (b, _unbroadcast(gb, b.data.shape)),
        ]

    return _make(out, (a, b), back)


# -- softmax family ----------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [(a, out * (g - dot))]

    return _make(out, (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = a.data - m
    out = s - np.log(np.exp(s).sum(axis=axis, keepdims=True))

    def back(g):
        return [(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))]

    return _make(out, (a,), back)


# -- gather / scatter primitives ---------------------------------------------


def embedding(table, idx) -> Tensor:
    """Row lookup: out[..., :] = table[idx[...], :]; backward scatter-adds."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return [(table, gt)]

    return _make(out, (table,), back)


def gather_last(a, idx) -> Tensor:
    """out[n] = a[n, idx[n]] for 2-D a; used to pick target log-probs."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = np.arange(a.data.shape[0])
    out = a.data[n, idx]

    def back(g):
        ga = np.zeros_like(a.data)
        ga[n, idx] = g
        return [(a, ga)]

    return _make(out, (a,), back)


# -- windowing primitives (convolutions / STFT are built on these) -----------


def unfold1d(a, size: int, stride: int) -> Tensor:
    """[B, T, C] -> [B, F, size, C] sliding windows along the time axis."""
    a = _wrap(a)
    if a.data.shape[1] < size:
        raise ValueError(f"sequence length {a.data.shape[1]} shorter than window {size}")
    win = np.lib.stride_tricks.sliding_window_view(a.data, size, axis=1)
    win = win[:, ::stride]  # [B, F, C, size]
    out = np.ascontiguousarray(np.swapaxes(win, -1, -2))
    nf = out.shape[1]

    def back(g):
        gx = np.zeros_like(a.data)
        for k in range(size):
            gx[:, k : k + stride * nf : stride, :] += g[:, :, k, :]
        return [(a, gx)]

    return _make(out, (a,), back)


def unfold2d(a, size: tuple[int, int], stride: tuple[int, int]) -> Tensor:
    """[B, H, W, C] -> [B, H', W', kh, kw, C] sliding windows over H and W."""
    a = _wrap(a)
    kh, kw = size
    sh, sw = stride
    win = np.lib.stride_tricks.sliding_window_view(a.data, (kh, kw), axis=(1, 2))
    win = win[:, ::sh, ::sw]  # [B, H', W', C, kh, kw]
    out = np.ascontiguousarray(np.moveaxis(win, 3, -1))
    nh, nw = out.shape[1], out.shape[2]

    def back(g):
        gx = np.zeros_like(a.data)
        for i in range(kh):
            for j in range(kw):
                gx[:, i : i + sh * nh : sh, j : j + sw * nw : sw, :] += g[:, :, :, i, j, :]
        return [(a, gx)]

    return _make(out, (a,), back)


def dilate1d(a, factor: int) -> Tensor:
    """Insert factor-1 zeros between time steps: [B, T, C] -> [B, T*factor, C]."""
    a = _wrap(a)
    b, t, c = a.data.shape
    out = np.zeros((b, t * factor, c), dtype=a.data.dtype)
    out[:, ::factor] = a.data

    def back(g):
        return [(a, g[:, ::factor].copy())]

    return _make(out, (a,), back)


# -- straight-through helper ---------------------------------------------------


def straight_through(x: Tensor, target: np.ndarray) -> Tensor:
    """Forward `target`, backward identity to x (quantizer gradient bypass)."""
    x = _wrap(x)
    out = np.asarray(target, dtype=x.data.dtype)

    def back(g):
        return [(x, g)]

    return _make(out, (x,), back)


# -- backward pass --------------------------------------------------------------


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into `.grad` of every requires_grad tensor reached (leaves and
    intermediates alike), releases the tape, and returns the gradient map.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        return {}

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        result[node] = node.grad
        if node._backward is not None:
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                prev = pending.get(id(parent))
                pending[id(parent)] = pg if prev is None else prev + pg
        node._parents = ()
        node._backward = None
    return result
