"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and records the operations applied to it.
Calling :meth:`Tensor.backward` on a scalar result walks the recorded graph in
reverse topological order and deposits gradients into every reachable leaf
tensor that has ``requires_grad`` set. Gradients accumulate across repeated
backward calls until cleared.

Training code runs in single precision; gradient checks build the same graphs
in double precision (see :func:`set_default_dtype`).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created parameters and constants."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the default dtype (used by gradient checks)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, statistics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """An ndarray with an optional gradient and a backward closure.

    ``_parents`` holds the input tensors of the producing op and ``_backward``
    maps the incoming gradient to one gradient per parent (or None for
    non-differentiable parents). Leaves have no backward closure.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # keep numpy from absorbing Tensors into object arrays: binary ufuncs
    # with an ndarray on the left must defer to the reflected Tensor op
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        self.data = np.asarray(data, dtype=_default_dtype if np.asarray(data).dtype.kind != "f" else None)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # ---- basic introspection ----

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"expected a scalar tensor, got shape {self.shape}")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A leaf view of the same data, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # ---- graph engine ----

    def backward(self) -> None:
        """Backpropagate from a scalar loss.

        Raises ValueError if this tensor is not a scalar. Gradients are
        accumulated into ``.grad`` of every reachable requires-grad leaf;
        calling backward again without clearing adds on top.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    # ---- helpers for op construction ----

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # ---- arithmetic ----

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data
        return _make(out_data, (self, other), lambda g: (
            _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._coerce(other)
        out_data = self.data - other.data
        return _make(out_data, (self, other), lambda g: (
            _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        return _make(a * b, (self, other), lambda g: (
            _unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        return _make(a / b, (self, other), lambda g: (
            _unbroadcast(g / b, self.shape), _unbroadcast(-g * a / (b * b), other.shape)))

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        out_data = a ** exponent
        return _make(out_data, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other):
        other = self._coerce(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul operands must have at least 2 dimensions")
        a, b = self.data, other.data
        out_data = a @ b

        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
            return ga, gb

        return _make(out_data, (self, other), backward)

    # ---- reductions ----

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).astype(self.data.dtype, copy=False),)

        return _make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    # ---- shape manipulation ----

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        src = self.shape
        return _make(out_data, (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        out_data = self.data.transpose(axes)
        return _make(out_data, (self,), lambda g: (g.transpose(inv),))

    def __getitem__(self, index):
        out_data = self.data[index]
        src_shape, src_dtype = self.shape, self.data.dtype

        def backward(g):
            dx = np.zeros(src_shape, dtype=src_dtype)
            np.add.at(dx, index, g)
            return (dx,)

        return _make(out_data, (self,), backward)

    # ---- elementwise nonlinearities ----

    def exp(self):
        out_data = np.exp(self.data)
        return _make(out_data, (self,), lambda g: (g * out_data,))

    def log(self):
        a = self.data
        return _make(np.log(a), (self,), lambda g: (g / a,))

    def tanh(self):
        out_data = np.tanh(self.data)
        return _make(out_data, (self,), lambda g: (g * (1.0 - out_data * out_data),))

    def sigmoid(self):
        out_data = expit(self.data)
        return _make(out_data, (self,), lambda g: (g * out_data * (1.0 - out_data),))

    def relu(self):
        a = self.data
        out_data = np.maximum(a, 0.0)
        return _make(out_data, (self,), lambda g: (g * (a > 0.0),))

    def softplus(self):
        """log(1 + exp(x)), computed stably; the building block of the
        logit-space binary cross-entropy."""
        a = self.data
        out_data = np.logaddexp(0.0, a)
        return _make(out_data, (self,), lambda g: (g * expit(a),))

    def softmax(self, axis: int = -1):
        """Numerically stable softmax along one axis.

        Dedicated primitive: the closed-form Jacobian-vector product avoids
        differentiating through the max subtraction.
        """
        a = self.data
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            return (out_data * (g - dot),)

        return _make(out_data, (self,), backward)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    else:
        out = Tensor(data)
    return out


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a leaf tensor in the default (or given) dtype."""
    arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
    return Tensor(arr, requires_grad=requires_grad)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors along an axis; gradient splits back."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out_data, tuple(tensors), backward)


def pad(x: Tensor, pad_width) -> Tensor:
    """Zero-pad like np.pad(mode="constant"); gradient is the inner slice."""
    out_data = np.pad(x.data, pad_width, mode="constant")
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))

    def backward(g):
        return (g[slices],)

    return _make(out_data, (x,), backward)


def embedding_lookup(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table; scatter-add on the way back."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    out_data = weight.data[ids]

    def backward(g):
        dw = np.zeros_like(weight.data)
        np.add.at(dw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (dw,)

    return _make(out_data, (weight,), backward)


def _same_pad_amount(extent: int, kernel: int, stride: int) -> tuple[int, int]:
    # TensorFlow "same" convention: output extent = ceil(extent / stride).
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    lo = total // 2
    return lo, total - lo


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1-D convolution over (batch, time, channels), stride 1, same padding.

    ``w`` has shape (kernel, in_channels, out_channels). The time extent is
    preserved exactly.
    """
    batch, time, cin = x.shape
    k, wcin, cout = w.shape
    if wcin != cin:
        raise ValueError(f"channel mismatch: input {cin}, kernel {wcin}")
    lo, hi = _same_pad_amount(time, k, 1)
    xp = np.pad(x.data, ((0, 0), (lo, hi), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (B, T, Cin, K)
    cols = windows.transpose(0, 1, 3, 2).reshape(batch, time, k * cin)
    w2 = w.data.reshape(k * cin, cout)
    out_data = cols @ w2
    if b is not None:
        out_data = out_data + b.data

    def backward(g):
        dcols = (g @ w2.T).reshape(batch, time, k, cin)
        dxp = np.zeros_like(xp)
        for i in range(k):
            dxp[:, i:i + time, :] += dcols[:, :, i, :]
        dx = dxp[:, lo:lo + time, :]
        dw = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           strides: tuple[int, int] = (2, 2)) -> Tensor:
    """2-D convolution over (batch, height, width, channels), same padding.

    ``w`` has shape (kh, kw, in_channels, out_channels). Output spatial
    extents are ceil(extent / stride).
    """
    batch, height, width, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ValueError(f"channel mismatch: input {cin}, kernel {wcin}")
    sh, sw = strides
    top, bottom = _same_pad_amount(height, kh, sh)
    left, right = _same_pad_amount(width, kw, sw)
    xp = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::sh, ::sw]                       # (B, OH, OW, Cin, kh, kw)
    oh, ow = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(batch, oh, ow, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out_data = cols @ w2
    if b is not None:
        out_data = out_data + b.data

    def backward(g):
        dcols = (g @ w2.T).reshape(batch, oh, ow, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + sh * oh:sh, j:j + sw * ow:sw, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, top:top + height, left:left + width, :]
        dw = (cols.reshape(-1, kh * kw * cin).T @ g.reshape(-1, cout)).reshape(kh, kw, cin, cout)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1, 2))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, backward)
