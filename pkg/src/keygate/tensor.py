"""Reverse-mode automatic differentiation on dense numpy arrays.

The graph is built eagerly: every operation returns a new :class:`Tensor`
holding its value plus a closure that pushes the output gradient to the
operands.  ``Tensor.backward()`` walks the graph once in reverse
topological order.  Only float32 and float64 are supported; float32 is the
training dtype and float64 exists for finite-difference gradient checking.

Operations whose operands all have ``requires_grad=False`` return plain
constants with no recorded parents, so inference passes build no graph.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import ConfigurationError

Array = np.ndarray

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_array(value, dtype=np.float32) -> Array:
    arr = np.asarray(value)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(dtype)
    return arr


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[Array], None] | None = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigurationError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # ---------------------------------------------------------------- backward
    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad."""
        if self.data.size != 1:
            raise ConfigurationError(f"backward() requires a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ConfigurationError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ConfigurationError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _make(data: Array, parents: tuple[Tensor, ...], backward_fn: Callable[[Array], None]) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward_fn = backward_fn
    return out


# ------------------------------------------------------------------ arithmetic
def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_same_dtype(a, b, "add")
    data = a.data + b.data

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward_fn)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_same_dtype(a, b, "sub")
    data = a.data - b.data

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward_fn)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_same_dtype(a, b, "mul")
    data = a.data * b.data

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    def backward_fn(g: Array) -> None:
        a._accumulate(-g)

    return _make(-a.data, (a,), backward_fn)


def power(a: Tensor, p) -> Tensor:
    p = float(p)
    data = a.data ** p

    def backward_fn(g: Array) -> None:
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(data, (a,), backward_fn)


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def backward_fn(g: Array) -> None:
        a._accumulate(g * np.sign(a.data))

    return _make(data, (a,), backward_fn)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward_fn(g: Array) -> None:
        a._accumulate(g * 0.5 / data)

    return _make(data, (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward_fn(g: Array) -> None:
        a._accumulate(g * data)

    return _make(data, (a,), backward_fn)


# ----------------------------------------------------------------- activations
def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward_fn(g: Array) -> None:
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward_fn)


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * s

    def backward_fn(g: Array) -> None:
        a._accumulate(g * (s + a.data * s * (1.0 - s)))

    return _make(data, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0).astype(a.data.dtype)

    def backward_fn(g: Array) -> None:
        a._accumulate(g * mask)

    return _make(data, (a,), backward_fn)


# ------------------------------------------------------------------ structural
def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    data = a.data.reshape(shape)

    def backward_fn(g: Array) -> None:
        a._accumulate(g.reshape(old))

    return _make(data, (a,), backward_fn)


def reduce_sum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward_fn(g: Array) -> None:
        a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True))

    return _make(data, (a,), backward_fn)


def reduce_mean(a: Tensor) -> Tensor:
    inv = 1.0 / a.data.size
    data = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backward_fn(g: Array) -> None:
        a._accumulate(np.broadcast_to(g * inv, a.data.shape).astype(a.data.dtype, copy=True))

    return _make(data, (a,), backward_fn)


# --------------------------------------------------------------------- linear
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ConfigurationError(f"matmul expects 2D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ConfigurationError(f"matmul inner-dimension mismatch: {a.data.shape} @ {b.data.shape}")
    _check_same_dtype(a, b, "matmul")
    data = a.data @ b.data

    def backward_fn(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward_fn)


# --------------------------------------------------------------- convolutions
def _gather_windows(xp: Array, kh: int, kw: int, stride: int, oh: int, ow: int) -> Array:
    """Stack the kh*kw shifted views of a padded NCHW array: (N,C,kh,kw,OH,OW)."""
    n, c = xp.shape[:2]
    win = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            win[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return win


def _scatter_windows(dwin: Array, xshape: tuple[int, ...], padding: int, stride: int) -> Array:
    """Adjoint of :func:`_gather_windows`; returns the gradient w.r.t. x."""
    n, c, h, w = xshape
    kh, kw, oh, ow = dwin.shape[2], dwin.shape[3], dwin.shape[4], dwin.shape[5]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dwin[:, :, i, j]
    if padding:
        return dxp[:, :, padding : padding + h, padding : padding + w]
    return dxp


def _conv_checks(x: Tensor, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    if x.data.ndim != 4:
        raise ConfigurationError(f"conv input must be NCHW, got shape {x.data.shape}")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigurationError(f"padding must be >= 0, got {padding}")
    h, w = x.data.shape[2], x.data.shape[3]
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ConfigurationError(
            f"conv output would be empty: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    return oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution, NCHW input and OIHW weight, via window gather + GEMM."""
    if weight.data.ndim != 4:
        raise ConfigurationError(f"conv weight must be OIHW, got shape {weight.data.shape}")
    co, ci, kh, kw = weight.data.shape
    if x.data.shape[1] != ci:
        raise ConfigurationError(f"conv channel mismatch: input has {x.data.shape[1]} channels, weight expects {ci}")
    if bias is not None and bias.data.shape != (co,):
        raise ConfigurationError(f"conv bias must have shape ({co},), got {bias.data.shape}")
    _check_same_dtype(x, weight, "conv2d")
    oh, ow = _conv_checks(x, kh, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _gather_windows(xp, kh, kw, stride, oh, ow)
    out = np.tensordot(win, weight.data, axes=([1, 2, 3], [1, 2, 3]))  # (N,OH,OW,O)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward_fn(g: Array) -> None:
        if weight.requires_grad:
            weight._accumulate(np.tensordot(g, win, axes=([0, 2, 3], [0, 4, 5])))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dwin = np.tensordot(g, weight.data, axes=([1], [0]))  # (N,OH,OW,C,kh,kw)
            dwin = dwin.transpose(0, 3, 4, 5, 1, 2)
            x._accumulate(_scatter_windows(dwin, x.data.shape, padding, stride))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward_fn)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Per-channel 2D convolution with a (C,kh,kw) weight, stride fixed at 1.

    The weight may be an interior graph node (e.g. generated from a key
    embedding); gradients flow back into whatever produced it.
    """
    if weight.data.ndim != 3:
        raise ConfigurationError(f"depthwise weight must be (C,kh,kw), got shape {weight.data.shape}")
    c, kh, kw = weight.data.shape
    if x.data.ndim != 4 or x.data.shape[1] != c:
        raise ConfigurationError(
            f"depthwise channel mismatch: input shape {x.data.shape}, weight expects {c} channels"
        )
    if bias is not None and bias.data.shape != (c,):
        raise ConfigurationError(f"depthwise bias must have shape ({c},), got {bias.data.shape}")
    _check_same_dtype(x, weight, "depthwise_conv2d")
    oh, ow = _conv_checks(x, kh, kw, 1, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _gather_windows(xp, kh, kw, 1, oh, ow)
    out = np.einsum("ncijhw,cij->nchw", win, weight.data)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward_fn(g: Array) -> None:
        if weight.requires_grad:
            weight._accumulate(np.einsum("nchw,ncijhw->cij", g, win))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dwin = np.einsum("nchw,cij->ncijhw", g, weight.data)
            x._accumulate(_scatter_windows(dwin, x.data.shape, padding, 1))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward_fn)


# ------------------------------------------------------------------ resampling
def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ConfigurationError(f"upsample expects NCHW, got shape {x.data.shape}")
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward_fn(g: Array) -> None:
        n, c, h2, w2 = g.shape
        x._accumulate(g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _make(data, (x,), backward_fn)


def avgpool2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ConfigurationError(f"avgpool expects NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"avgpool2x needs even spatial dims, got {h}x{w}")
    data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward_fn(g: Array) -> None:
        x._accumulate((g * 0.25).repeat(2, axis=2).repeat(2, axis=3))

    return _make(data, (x,), backward_fn)
