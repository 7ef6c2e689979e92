"""Network layers on top of the autodiff core.

All layers are deterministic given the ``numpy.random.Generator`` they are
constructed with: initialization consumes it once, and stochastic layers
(dropout, zoneout) consume it per training step in a fixed order. Evaluation
mode never draws randomness.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from rakugo_tts.autodiff import (
    Tensor,
    concat,
    conv1d,
    conv2d,
    embedding_lookup,
    get_default_dtype,
)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(get_default_dtype())


class Module:
    """Base class with parameter/buffer registration and train/eval modes.

    Assigning a requires-grad Tensor registers a parameter; assigning a
    Module (or ModuleList) registers a child. Buffers (non-trained state such
    as batch-norm running statistics) are registered explicitly.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def update_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in self._buffers:
            raise KeyError(f"unknown buffer {name!r}")
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, self._buffers[name]
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items: list[Module] = []
        for item in items:
            self.append(item)

    def append(self, item: Module) -> None:
        self._children[str(len(self._items))] = item
        self._items.append(item)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


_ACTIVATIONS = {
    None: lambda x: x,
    "relu": lambda x: x.relu(),
    "tanh": lambda x: x.tanh(),
    "sigmoid": lambda x: x.sigmoid(),
}


class Dense(Module):
    """Affine layer with an optional activation; input shape (..., in_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 activation: str | None = None, bias: bool = True):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.w = Tensor(glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=self.w.dtype), requires_grad=True) if bias else None
        self.activation = activation
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        y = x @ self.w
        if self.b is not None:
            y = y + self.b
        return _ACTIVATIONS[self.activation](y)


class Embedding(Module):
    """Learned lookup table; ids of any shape map to vectors of ``dim``."""

    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.table = Tensor(glorot_uniform(rng, (vocab, dim), vocab, dim), requires_grad=True)
        self.vocab, self.dim = vocab, dim

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise ValueError(f"ids out of range for vocab {self.vocab}")
        return embedding_lookup(self.table, ids)


class Conv1d(Module):
    """Same-padded stride-1 1-D convolution over (batch, time, channels).

    ``bias=False`` drops the bias term; use it when batch normalization
    follows, where a constant channel shift cancels and the bias would be a
    dead (zero-gradient) parameter.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        fan_in, fan_out = kernel * in_ch, kernel * out_ch
        self.w = Tensor(glorot_uniform(rng, (kernel, in_ch, out_ch), fan_in, fan_out),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_ch, dtype=self.w.dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.w, self.b)


class Conv2d(Module):
    """Same-padded strided 2-D convolution over (batch, height, width, channels)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: tuple[int, int],
                 strides: tuple[int, int], rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        kh, kw = kernel
        fan_in, fan_out = kh * kw * in_ch, kh * kw * out_ch
        self.w = Tensor(glorot_uniform(rng, (kh, kw, in_ch, out_ch), fan_in, fan_out),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_ch, dtype=self.w.dtype), requires_grad=True) if bias else None
        self.strides = strides

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, strides=self.strides)


class BatchNorm(Module):
    """Batch normalization over the trailing channel axis.

    Training mode normalizes with (biased) batch statistics and updates the
    running statistics; evaluation mode normalizes with the running
    statistics. A zero-variance channel is kept finite by the epsilon floor.
    """

    def __init__(self, num_features: int, eps: float = 1e-3, momentum: float = 0.99):
        super().__init__()
        dtype = get_default_dtype()
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_features, dtype=dtype))
        self.eps = eps
        self.momentum = momentum
        self.num_features = num_features

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.num_features:
            raise ValueError(f"expected {self.num_features} channels, got {x.shape[-1]}")
        if self.training:
            if int(np.prod(x.shape[:-1])) < 1:
                raise ValueError("batch normalization needs at least one element")
            axes = tuple(range(x.ndim - 1))
            mu = x.mean(axis=axes, keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=axes, keepdims=True)
            m = self.momentum
            self.update_buffer("running_mean",
                               m * self.running_mean + (1.0 - m) * mu.data.reshape(-1))
            self.update_buffer("running_var",
                               m * self.running_var + (1.0 - m) * var.data.reshape(-1))
            xhat = centered * ((var + self.eps) ** -0.5)
        else:
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * scale
        return xhat * self.gamma + self.beta


class Dropout(Module):
    """Inverted dropout; identity in evaluation mode."""

    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def __call__(self, x: Tensor, force: bool = False) -> Tensor:
        """Apply dropout; ``force`` applies it even in evaluation mode (used
        for synthesis-time pre-net variation)."""
        if self.p == 0.0 or not (self.training or force):
            return x
        keep = 1.0 - self.p
        mask = (self.rng.random(x.shape) < keep).astype(x.dtype.type) / keep
        return x * mask


class LSTMCell(Module):
    """LSTM cell with optional zoneout on both state vectors.

    Gate layout along the projection width is (input, forget, candidate,
    output); the forget gate carries a +1 bias at runtime. Zoneout keeps each
    state unit at its previous value with probability ``zoneout`` during
    training and interpolates deterministically in evaluation mode.
    """

    def __init__(self, in_dim: int, units: int, rng: np.random.Generator,
                 zoneout: float = 0.0, forget_bias: float = 1.0):
        super().__init__()
        if not 0.0 <= zoneout <= 1.0:
            raise ValueError(f"zoneout probability must be in [0, 1], got {zoneout}")
        self.wx = Tensor(glorot_uniform(rng, (in_dim, 4 * units), in_dim, 4 * units),
                         requires_grad=True)
        self.wh = Tensor(glorot_uniform(rng, (units, 4 * units), units, 4 * units),
                         requires_grad=True)
        self.b = Tensor(np.zeros(4 * units, dtype=self.wx.dtype), requires_grad=True)
        self.units = units
        self.zoneout = zoneout
        self.forget_bias = forget_bias
        self.rng = rng

    def initial_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.units), dtype=self.wx.dtype)
        return Tensor(z.copy()), Tensor(z.copy())

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        h_prev, c_prev = state
        u = self.units
        z = x @ self.wx + h_prev @ self.wh + self.b
        i = z[:, :u].sigmoid()
        f = (z[:, u:2 * u] + self.forget_bias).sigmoid()
        g = z[:, 2 * u:3 * u].tanh()
        o = z[:, 3 * u:].sigmoid()
        c_new = f * c_prev + i * g
        h_new = o * c_new.tanh()
        if self.zoneout > 0.0:
            p = self.zoneout
            if self.training:
                keep_h = (self.rng.random(h_new.shape) < p).astype(h_new.dtype.type)
                keep_c = (self.rng.random(c_new.shape) < p).astype(c_new.dtype.type)
                h_new = keep_h * h_prev + (1.0 - keep_h) * h_new
                c_new = keep_c * c_prev + (1.0 - keep_c) * c_new
            else:
                h_new = p * h_prev + (1.0 - p) * h_new
                c_new = p * c_prev + (1.0 - p) * c_new
        return h_new, c_new


class LSTM(Module):
    """Unidirectional LSTM over (batch, time, features).

    An optional (batch, time) validity mask freezes the state across padded
    steps so padding never contaminates it (in either time direction).
    """

    def __init__(self, in_dim: int, units: int, rng: np.random.Generator,
                 zoneout: float = 0.0, go_backwards: bool = False):
        super().__init__()
        self.cell = LSTMCell(in_dim, units, rng, zoneout=zoneout)
        self.go_backwards = go_backwards

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        batch, time = x.shape[0], x.shape[1]
        h, c = self.cell.initial_state(batch)
        steps = range(time - 1, -1, -1) if self.go_backwards else range(time)
        outputs: list[Tensor | None] = [None] * time
        for t in steps:
            h_new, c_new = self.cell(x[:, t, :], (h, c))
            if mask is not None:
                m = mask[:, t:t + 1].astype(h_new.dtype.type)
                h = m * h_new + (1.0 - m) * h
                c = m * c_new + (1.0 - m) * c
            else:
                h, c = h_new, c_new
            outputs[t] = h.reshape(batch, 1, self.cell.units)
        return concat(outputs, axis=1)


class BiLSTM(Module):
    """Bi-directional LSTM; output width is twice the per-direction units."""

    def __init__(self, in_dim: int, units_total: int, rng: np.random.Generator,
                 zoneout: float = 0.0):
        super().__init__()
        if units_total % 2 != 0:
            raise ValueError(f"total units must be even, got {units_total}")
        half = units_total // 2
        self.fwd = LSTM(in_dim, half, rng, zoneout=zoneout)
        self.bwd = LSTM(in_dim, half, rng, zoneout=zoneout, go_backwards=True)
        self.units_total = units_total

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return concat([self.fwd(x, mask), self.bwd(x, mask)], axis=-1)


class GRU(Module):
    """Gated recurrent unit (reset-before form) over (batch, time, features).

    Returns the output sequence; the final state is its last step.
    """

    def __init__(self, in_dim: int, units: int, rng: np.random.Generator):
        super().__init__()
        self.wx = Tensor(glorot_uniform(rng, (in_dim, 3 * units), in_dim, 3 * units),
                         requires_grad=True)
        self.wh_rz = Tensor(glorot_uniform(rng, (units, 2 * units), units, 2 * units),
                            requires_grad=True)
        self.wh_n = Tensor(glorot_uniform(rng, (units, units), units, units),
                           requires_grad=True)
        self.b = Tensor(np.zeros(3 * units, dtype=self.wx.dtype), requires_grad=True)
        self.units = units

    def __call__(self, x: Tensor) -> Tensor:
        batch, time = x.shape[0], x.shape[1]
        u = self.units
        h = Tensor(np.zeros((batch, u), dtype=self.wx.dtype))
        outputs = []
        for t in range(time):
            xt = x[:, t, :]
            zx = xt @ self.wx + self.b
            rz = zx[:, :2 * u] + h @ self.wh_rz
            r = rz[:, :u].sigmoid()
            z = rz[:, u:].sigmoid()
            n = (zx[:, 2 * u:] + (r * h) @ self.wh_n).tanh()
            h = z * h + (1.0 - z) * n
            outputs.append(h.reshape(batch, 1, u))
        return concat(outputs, axis=1)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with learned query/key/value projections.

    Heads are concatenated without an output projection. ``causal`` masks
    future key positions; ``dropout`` thins the value-mixing weights during
    training (the returned attention weights stay a proper distribution).
    """

    def __init__(self, query_dim: int, kv_dim: int, d_model: int, n_heads: int,
                 rng: np.random.Generator, causal: bool = False, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"model width {d_model} is not divisible by {n_heads} heads")
        self.wq = Tensor(glorot_uniform(rng, (query_dim, d_model), query_dim, d_model),
                         requires_grad=True)
        self.wk = Tensor(glorot_uniform(rng, (kv_dim, d_model), kv_dim, d_model),
                         requires_grad=True)
        self.wv = Tensor(glorot_uniform(rng, (kv_dim, d_model), kv_dim, d_model),
                         requires_grad=True)
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.causal = causal
        self.drop = Dropout(dropout, rng) if dropout > 0.0 else None

    def _split_heads(self, x: Tensor, batch: int, time: int) -> Tensor:
        return x.reshape(batch, time, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def __call__(self, query: Tensor, keys_values: Tensor,
                 key_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Attend ``query`` (B, Tq, query_dim) over ``keys_values``
        (B, Tk, kv_dim); returns (output (B, Tq, d_model), weights
        (B, heads, Tq, Tk))."""
        batch, tq = query.shape[0], query.shape[1]
        tk = keys_values.shape[1]
        q = self._split_heads(query @ self.wq, batch, tq)
        k = self._split_heads(keys_values @ self.wk, batch, tk)
        v = self._split_heads(keys_values @ self.wv, batch, tk)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.d_head))
        bias = np.zeros((batch, 1, tq, tk), dtype=scores.dtype.type)
        if self.causal:
            future = np.triu(np.ones((tq, tk), dtype=bool), k=1 + max(tk - tq, 0))
            bias = bias + np.where(future, -1e9, 0.0)[None, None]
        if key_mask is not None:
            bias = bias + np.where(key_mask[:, None, None, :], 0.0, -1e9)
        weights = (scores + bias).softmax(axis=-1)
        mixing = self.drop(weights) if (self.drop is not None and self.training) else weights
        out = (mixing @ v).transpose(0, 2, 1, 3).reshape(batch, tq, self.d_model)
        return out, weights
