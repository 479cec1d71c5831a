"""Dense float64 tensors with a reverse-mode autodiff tape.

A ``Tensor`` wraps a numpy float64 array and is treated as an immutable
value. Differentiable operations record nodes on a ``Tape``; calling
:func:`backward` on a scalar result walks the tape in reverse and returns
the gradient for every tracked node. Tapes are dynamic (one per forward
pass) and are freed by ``backward``.

All math is float64; gradients of every registered operation are validated
against central finite differences (see :func:`grad_check`).
"""

from __future__ import annotations

import numbers
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class Tape:
    """Recorded computation graph. Nodes are stored in topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def leaf(self, values) -> "Tensor":
        """Create a gradient-tracked leaf tensor on this tape."""
        arr = np.asarray(values, dtype=np.float64)
        node_id = self._append(_Node("leaf", (), None, arr.shape))
        return Tensor(arr, tape=self, node_id=node_id)

    def _append(self, node: "_Node") -> int:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); use a fresh Tape")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _register(self, kind: str, parents: Sequence["Tensor"], out: np.ndarray,
                  bwd: Callable) -> "Tensor":
        parent_ids = tuple(p.node_id if p.tape is not None else None for p in parents)
        node_id = self._append(_Node(kind, parent_ids, bwd, out.shape))
        return Tensor(out, tape=self, node_id=node_id)

    def free(self):
        """Drop all recorded nodes and their saved forward values."""
        self.nodes = []
        self._consumed = True

    def __len__(self):
        return len(self.nodes)


class _Node:
    __slots__ = ("kind", "parents", "bwd", "shape")

    def __init__(self, kind, parents, bwd, shape):
        self.kind = kind
        self.parents = parents
        self.bwd = bwd
        self.shape = shape


class Tensor:
    """Immutable dense float64 value, optionally tracked on a tape."""

    __slots__ = ("array", "tape", "node_id")

    def __init__(self, values, tape: Optional[Tape] = None, node_id: Optional[int] = None):
        self.array = np.asarray(values, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    @property
    def grad_tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.array.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def __repr__(self):
        tracked = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes=axes, keepdims=keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes=axes, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, axes):
        return permute(self, axes)

    def t(self):
        if self.ndim != 2:
            raise ValueError(f"t() requires a 2-D tensor, got shape {self.shape}")
        return permute(self, (1, 0))


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, numbers.Number):
        return Tensor(np.float64(x))
    return Tensor(x)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands recorded on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over dimensions that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.array + b.array
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.tape else None,
                _unbroadcast(g, b.shape) if b.tape else None)

    return tape._register("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = a.array - b.array
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.tape else None,
                _unbroadcast(-g, b.shape) if b.tape else None)

    return tape._register("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.array * b.array
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        return (_unbroadcast(g * b.array, a.shape) if a.tape else None,
                _unbroadcast(g * a.array, b.shape) if b.tape else None)

    return tape._register("mul", (a, b), out, bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.array == 0.0):
        raise ValueError("div: divisor contains zero elements")
    out = a.array / b.array
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        ga = _unbroadcast(g / b.array, a.shape) if a.tape else None
        gb = _unbroadcast(-g * a.array / (b.array * b.array), b.shape) if b.tape else None
        return ga, gb

    return tape._register("div", (a, b), out, bwd)


def scale(a, s) -> Tensor:
    """Multiply by a python scalar."""
    a = as_tensor(a)
    s = float(s)
    out = a.array * s
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        return (g * s,)

    return tape._register("scale", (a,), out, bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.array, 0.0)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    mask = a.array > 0.0

    def bwd(g):
        return (g * mask,)

    return tape._register("relu", (a,), out, bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign for overflow safety
    x = a.array
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return tape._register("sigmoid", (a,), out, bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.array)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return tape._register("tanh", (a,), out, bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.array < 0.0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.array)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        # subgradient 0 at exactly-zero inputs
        return (np.where(out > 0.0, g * 0.5 / np.where(out > 0.0, out, 1.0), 0.0),)

    return tape._register("sqrt", (a,), out, bwd)


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name.

    ``add/sub/mul/div`` take two operands (equal shapes, broadcastable
    shapes, or a scalar); ``relu/sigmoid/tanh`` are unary; ``scale``
    takes a tensor and a python scalar.
    """
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"elementwise '{kind}' needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"elementwise '{kind}' is unary")
        return _UNARY[kind](a)
    if kind == "scale":
        if not isinstance(b, numbers.Number):
            raise ValueError("elementwise 'scale' needs a scalar second operand")
        return scale(a, b)
    raise ValueError(f"unknown elementwise kind '{kind}'")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    out = a.array @ b.array
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        ga = g @ b.array.T if a.tape else None
        gb = a.array.T @ g if b.tape else None
        return ga, gb

    return tape._register("matmul", (a, b), out, bwd)


def softmax_lastdim(a) -> Tensor:
    """Numerically stable softmax over the last dimension."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ValueError(f"softmax_lastdim: empty last dimension, shape {a.shape}")
    x = a.array
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return tape._register("softmax", (a,), out, bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def reduce_sum(a, axes=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes_n = _norm_axes(axes, a.ndim)
    out = a.array.sum(axis=axes_n, keepdims=keepdims)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        if not keepdims:
            kshape = tuple(1 if i in axes_n else s for i, s in enumerate(a.shape))
            g = g.reshape(kshape)
        return (np.broadcast_to(g, a.shape).copy(),)

    return tape._register("sum", (a,), out, bwd)


def reduce_mean(a, axes=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes_n = _norm_axes(axes, a.ndim)
    count = 1
    for ax in axes_n:
        count *= a.shape[ax]
    s = reduce_sum(a, axes=axes, keepdims=keepdims)
    return scale(s, 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.array.reshape(shape)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        return (g.reshape(a.shape),)

    return tape._register("reshape", (a,), out, bwd)


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = np.transpose(a.array, axes)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return tape._register("permute", (a,), out, bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty input list")
    out = np.concatenate([t.array for t in ts], axis=axis)
    tape = _tape_of(*ts)
    if tape is None:
        return Tensor(out)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.tape else None for p, t in zip(parts, ts))

    return tape._register("concat", tuple(ts), out, bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.ndim))
    out = a.array[idx]
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return tape._register("slice", (a,), out, bwd)


def gather_flat(a, indices) -> Tensor:
    """Gather elements from the flattened tensor; returns a 1-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.size):
        raise ValueError("gather_flat: index out of range")
    out = a.array.reshape(-1)[idx]
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        flat = np.zeros(a.size)
        np.add.at(flat, idx, g)
        return (flat.reshape(a.shape),)

    return tape._register("gather", (a,), out, bwd)


# ---------------------------------------------------------------------------
# neural-net structured ops
# ---------------------------------------------------------------------------

def conv2d(x, weight, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (no kernel flip).

    ``x`` is (B, C, H, W), ``weight`` is (O, C, k, k) with odd k. Output
    spatial size is (H + 2*pad - k) / stride + 1, which must divide evenly.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: need 4-D input/weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if Cw != C:
        raise ValueError(f"conv2d: channel mismatch, input {C} vs weight {Cw}")
    if H + 2 * pad < k or W + 2 * pad < k:
        raise ValueError(f"conv2d: padded input {H + 2 * pad}x{W + 2 * pad} smaller than kernel {k}")
    if (H + 2 * pad - k) % stride or (W + 2 * pad - k) % stride:
        raise ValueError(
            f"conv2d: size {H}x{W} with pad {pad}, kernel {k} not divisible by stride {stride}")
    Hp = (H + 2 * pad - k) // stride + 1
    Wp = (W + 2 * pad - k) // stride + 1

    xp = np.pad(x.array, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.array
    cols6 = np.empty((B, C, k, k, Hp, Wp))
    for i in range(k):
        for j in range(k):
            cols6[:, :, i, j] = xp[:, :, i:i + stride * Hp:stride, j:j + stride * Wp:stride]
    cols = cols6.reshape(B, C * k * k, Hp * Wp)
    wmat = weight.array.reshape(O, C * k * k)
    out = np.matmul(wmat, cols).reshape(B, O, Hp, Wp)

    tape = _tape_of(x, weight)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        gmat = g.reshape(B, O, Hp * Wp)
        gw = None
        if weight.tape:
            gw = np.tensordot(gmat, cols, axes=([0, 2], [0, 2])).reshape(O, C, k, k)
        gx = None
        if x.tape:
            dcols = np.matmul(wmat.T, gmat).reshape(B, C, k, k, Hp, Wp)
            dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * Hp:stride, j:j + stride * Wp:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        return gx, gw

    return tape._register("conv2d", (x, weight), out, bwd)


def batchnorm2d(x, gamma, beta, eps: float = 1e-5, mode: str = "train",
                running_mean: Optional[np.ndarray] = None,
                running_var: Optional[np.ndarray] = None,
                momentum: float = 0.1) -> Tensor:
    """Per-channel normalization of a (B, C, H, W) tensor.

    Train mode normalizes with batch statistics over (B, H, W) and, when
    running buffers are given, updates them in place with the given
    momentum (population variance). Eval mode normalizes with the running
    buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d: need 4-D input, got {x.shape}")
    C = x.shape[1]
    if gamma.size != C or beta.size != C:
        raise ValueError(
            f"batchnorm2d: channel mismatch, input has {C} channels, "
            f"gamma {gamma.size}, beta {beta.size}")
    g = reshape(gamma, (1, C, 1, 1))
    b = reshape(beta, (1, C, 1, 1))
    if mode == "train":
        mu = reduce_mean(x, axes=(0, 2, 3), keepdims=True)
        xc = sub(x, mu)
        var = reduce_mean(mul(xc, xc), axes=(0, 2, 3), keepdims=True)
        if running_mean is not None:
            running_mean *= (1.0 - momentum)
            running_mean += momentum * mu.array.reshape(C)
        if running_var is not None:
            running_var *= (1.0 - momentum)
            running_var += momentum * var.array.reshape(C)
        inv = div(1.0, sqrt(add(var, eps)))
        xhat = mul(xc, inv)
    elif mode == "eval":
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm2d eval mode needs running_mean and running_var")
        rm = Tensor(np.asarray(running_mean, dtype=np.float64).reshape(1, C, 1, 1))
        rv = np.asarray(running_var, dtype=np.float64).reshape(1, C, 1, 1)
        xhat = mul(sub(x, rm), Tensor(1.0 / np.sqrt(rv + eps)))
    else:
        raise ValueError(f"batchnorm2d: unknown mode '{mode}'")
    return add(mul(xhat, g), b)


def batchnorm1d(x, gamma, beta, eps: float = 1e-5, mode: str = "train",
                running_mean=None, running_var=None, momentum: float = 0.1) -> Tensor:
    """BatchNorm over an (N, C) token matrix; statistics taken over N."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"batchnorm1d: need 2-D input, got {x.shape}")
    n, c = x.shape
    x4 = reshape(permute(x, (1, 0)), (1, c, n, 1))
    out = batchnorm2d(x4, gamma, beta, eps=eps, mode=mode,
                      running_mean=running_mean, running_var=running_var,
                      momentum=momentum)
    return permute(reshape(out, (c, n)), (1, 0))


def resample_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of a (B, C, H, W) tensor.

    Exact identity when the output size equals the input size.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"resample_bilinear: need 4-D input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resample_bilinear: output size {out_h}x{out_w} must be >= 1")
    B, C, H, W = x.shape

    def _axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            src = np.zeros(n_out)
        else:
            src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.floor(src).astype(np.intp)
        lo = np.minimum(lo, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = _axis(H, out_h)
    x0, x1, fx = _axis(W, out_w)
    wy = fy[:, None]
    wx = fx[None, :]
    a = x.array
    out = ((1 - wy) * (1 - wx) * a[:, :, y0[:, None], x0[None, :]]
           + (1 - wy) * wx * a[:, :, y0[:, None], x1[None, :]]
           + wy * (1 - wx) * a[:, :, y1[:, None], x0[None, :]]
           + wy * wx * a[:, :, y1[:, None], x1[None, :]])

    tape = _tape_of(x)
    if tape is None:
        return Tensor(out)

    def bwd(g):
        gx = np.zeros((B, C, H, W))
        yy0 = np.broadcast_to(y0[:, None], (out_h, out_w))
        yy1 = np.broadcast_to(y1[:, None], (out_h, out_w))
        xx0 = np.broadcast_to(x0[None, :], (out_h, out_w))
        xx1 = np.broadcast_to(x1[None, :], (out_h, out_w))
        for corner_y, corner_x, w in (
                (yy0, xx0, (1 - wy) * (1 - wx)),
                (yy0, xx1, (1 - wy) * wx),
                (yy1, xx0, wy * (1 - wx)),
                (yy1, xx1, wy * wx)):
            np.add.at(gx, (slice(None), slice(None), corner_y, corner_x), g * w)
        return (gx,)

    return tape._register("resample", (x,), out, bwd)


def l2_normalize(x, axis=None) -> Tensor:
    """Scale slices along ``axis`` (all axes when None) to unit L2 norm.

    A tiny additive guard inside the square root keeps the zero vector at
    zero instead of dividing by zero.
    """
    x = as_tensor(x)
    if axis is None:
        n2 = reduce_sum(mul(x, x), axes=None, keepdims=True)
    else:
        n2 = reduce_sum(mul(x, x), axes=axis, keepdims=True)
    return mul(x, div(1.0, sqrt(add(n2, 1e-24))))


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

class Gradients:
    """Mapping from tape node id to gradient tensor."""

    def __init__(self, by_node: dict):
        self._by_node = by_node

    def _key(self, key):
        if isinstance(key, Tensor):
            if key.node_id is None:
                raise KeyError("tensor is not tracked on a tape")
            return key.node_id
        return key

    def __getitem__(self, key) -> Tensor:
        return self._by_node[self._key(key)]

    def __contains__(self, key):
        return self._key(key) in self._by_node

    def get(self, key, default=None):
        return self._by_node.get(self._key(key), default)

    def wrt(self, tensor: Tensor) -> Tensor:
        return self[tensor]


def backward(loss: Tensor, tape: Optional[Tape] = None, free: bool = True) -> Gradients:
    """Reverse-mode sweep from a scalar loss.

    Returns gradients for every node that received one, with tracked
    leaves that the loss does not depend on filled with zeros. The tape is
    freed afterwards unless ``free`` is False.
    """
    if tape is None:
        tape = loss.tape
    if tape is None or loss.tape is not tape:
        raise ValueError("loss is not recorded on the given tape")
    if loss.array.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.array)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.bwd is None:
            continue
        parts = node.bwd(g)
        for pid, part in zip(node.parents, parts):
            if pid is None or part is None:
                continue
            acc = grads.get(pid)
            grads[pid] = part if acc is None else acc + part

    by_node = {}
    for nid, node in enumerate(tape.nodes):
        arr = grads.get(nid)
        if node.kind == "leaf" and arr is None:
            arr = np.zeros(node.shape)
        if arr is not None:
            by_node[nid] = Tensor(arr)
    if free:
        tape.free()
    return Gradients(by_node)


def grad_check(f, inputs, eps: float = 1e-5) -> float:
    """Compare tape gradients of a scalar expression against central differences.

    ``f`` is called with one tensor per entry of ``inputs`` and must return
    a scalar tensor. Returns the maximum over all input elements of
    |analytic - numeric| / max(1e-8, |numeric|).
    """
    arrays = [np.array(x.array if isinstance(x, Tensor) else x, dtype=np.float64)
              for x in inputs]
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = f(*leaves)
    if out.array.size != 1:
        raise ValueError("grad_check: f must produce a scalar")
    if not np.isfinite(out.item()):
        raise ValueError("grad_check: non-finite forward value")
    grads = backward(out, tape)
    analytic = [grads[leaf].array for leaf in leaves]

    def value_at(arrs):
        return f(*[Tensor(a) for a in arrs]).item()

    max_rel = 0.0
    for i, base in enumerate(arrays):
        for j in range(base.size):
            orig = base.flat[j]
            base.flat[j] = orig + eps
            fp = value_at(arrays)
            base.flat[j] = orig - eps
            fm = value_at(arrays)
            base.flat[j] = orig
            numeric = (fp - fm) / (2.0 * eps)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("grad_check: non-finite value during finite differences")
            rel = abs(analytic[i].flat[j] - numeric) / max(1e-8, abs(numeric))
            if rel > max_rel:
                max_rel = rel
    return max_rel
