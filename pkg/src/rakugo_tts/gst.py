"""Global style tokens: a reference encoder over mel spectrograms and a
bank of learned style tokens combined by multi-head attention.

The reference encoder compresses a mel spectrogram into a fixed-size
embedding; multi-head attention over the (tanh-activated) token bank turns
that embedding into a style vector that conditions the synthesizer. At
inference the attention weights can also be supplied by hand, bypassing
the reference encoder entirely.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from rakugo_tts import nn
from rakugo_tts.autodiff import Tensor, get_default_dtype, pad

N_TOKENS = 10
TOKEN_DIM = 512
REFERENCE_DIM = 128
MIN_REFERENCE_FRAMES = 64
REFERENCE_FILTERS = (128, 128, 256, 256, 512, 512)


@dataclass
class StyleEmbedding:
    """A style vector plus the per-head token weights that produced it."""

    vector: Tensor
    weights: Tensor

    def validate(self) -> None:
        w = self.weights.data
        if np.any(w < -1e-9):
            raise ValueError("style weights have negative entries")
        sums = w.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("style weights do not sum to 1 per head")


def _conv_extent(size: int, n_layers: int) -> int:
    """Spatial extent after n same-padded stride-2 layers."""
    for _ in range(n_layers):
        size = -(-size // 2)
    return size


class ReferenceEncoder(nn.Module):
    """Mel spectrogram -> fixed-size reference embedding.

    A stack of strided 2-D convolutions (batch norm, ReLU) halves the time
    and mel axes at every layer; the flattened feature maps feed a GRU whose
    final state is the embedding. Inputs shorter than ``min_frames`` are
    zero-padded so the stride chain always has room to operate.
    """

    def __init__(
        self,
        n_mels: int,
        rng: np.random.Generator,
        filters: Sequence[int] = REFERENCE_FILTERS,
        gru_units: int = REFERENCE_DIM,
        min_frames: int = MIN_REFERENCE_FRAMES,
    ):
        super().__init__()
        self.n_mels = n_mels
        self.min_frames = min_frames
        self.filters = tuple(filters)
        in_ch = 1
        for i, out_ch in enumerate(self.filters):
            setattr(self, f"conv{i}",
                    nn.Conv2d(in_ch, out_ch, (3, 3), (2, 2), rng=rng, bias=False))
            setattr(self, f"norm{i}", nn.BatchNorm(out_ch))
            in_ch = out_ch
        freq_extent = _conv_extent(n_mels, len(self.filters))
        self.gru = nn.GRU(freq_extent * self.filters[-1], gru_units, rng=rng)
        self.gru_units = gru_units

    def conv_features(self, mel: Tensor) -> Tensor:
        """Convolutional feature sequence, shape (batch, time', freq'*channels)."""
        if mel.ndim != 3:
            raise ValueError("reference mel must have shape (batch, frames, mels)")
        if mel.shape[1] == 0:
            raise ValueError("reference mel has no frames")
        if mel.shape[2] != self.n_mels:
            raise ValueError(f"expected {self.n_mels} mel bands, got {mel.shape[2]}")
        if mel.shape[1] < self.min_frames:
            mel = pad(mel, ((0, 0), (0, self.min_frames - mel.shape[1]), (0, 0)))
        x = mel.reshape(*mel.shape, 1)
        for i in range(len(self.filters)):
            x = getattr(self, f"norm{i}")(getattr(self, f"conv{i}")(x)).relu()
        batch, time, freq, ch = x.shape
        return x.reshape(batch, time, freq * ch)

    def __call__(self, mel: Tensor) -> Tensor:
        """Encode (batch, frames, mels) into a (batch, gru_units) embedding."""
        features = self.conv_features(mel)
        return self.gru(features)[:, -1, :]


class StyleTokenLayer(nn.Module):
    """Learned token bank queried by multi-head attention.

    The tokens pass through tanh and serve as both keys and values; the
    concatenated head outputs form the style vector. ``from_weights``
    reproduces the same combination from externally supplied weights.
    """

    def __init__(
        self,
        n_heads: int = 8,
        ref_dim: int = REFERENCE_DIM,
        n_tokens: int = N_TOKENS,
        token_dim: int = TOKEN_DIM,
        rng: np.random.Generator = None,
    ):
        super().__init__()
        if token_dim % n_heads != 0:
            raise ValueError(
                f"{n_heads} heads do not divide the {token_dim}-dim style space"
            )
        if rng is None:
            rng = np.random.default_rng()
        self.tokens = Tensor(
            rng.uniform(-0.5, 0.5, (n_tokens, token_dim)).astype(get_default_dtype()),
            requires_grad=True,
        )
        self.attention = nn.MultiHeadAttention(
            query_dim=ref_dim, kv_dim=token_dim, d_model=token_dim,
            n_heads=n_heads, rng=rng,
        )
        self.n_heads = n_heads
        self.n_tokens = n_tokens
        self.token_dim = token_dim

    def _tiled_tokens(self, batch: int) -> Tensor:
        base = Tensor(
            np.zeros((batch, self.n_tokens, self.token_dim), dtype=get_default_dtype())
        )
        return base + self.tokens.tanh().reshape(1, self.n_tokens, self.token_dim)

    def __call__(self, reference: Tensor) -> StyleEmbedding:
        """Attend a (batch, ref_dim) reference embedding over the token bank."""
        batch = reference.shape[0]
        query = reference.reshape(batch, 1, reference.shape[-1])
        out, weights = self.attention(query, self._tiled_tokens(batch))
        return StyleEmbedding(
            vector=out.reshape(batch, self.token_dim),
            weights=weights.reshape(batch, self.n_heads, self.n_tokens),
        )

    def projected_tokens(self) -> Tensor:
        """Value-projected tanh tokens, shape (heads, n_tokens, head_dim)."""
        values = self.tokens.tanh() @ self.attention.wv
        d_head = self.token_dim // self.n_heads
        return values.reshape(self.n_tokens, self.n_heads, d_head).transpose(1, 0, 2)

    def from_weights(self, weights: np.ndarray) -> StyleEmbedding:
        """Combine tokens under manual per-head weights, shape (heads, n_tokens)."""
        weights = np.asarray(weights, dtype=get_default_dtype())
        if weights.shape != (self.n_heads, self.n_tokens):
            raise ValueError(
                f"expected weights of shape ({self.n_heads}, {self.n_tokens}), "
                f"got {weights.shape}"
            )
        if np.any(weights < 0):
            raise ValueError("token weights must be non-negative")
        sums = weights.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ValueError(f"weight row {bad} sums to {sums[bad]:.6f}, expected 1")
        per_head = self.projected_tokens()
        mixed = Tensor(weights.reshape(self.n_heads, 1, self.n_tokens)) @ per_head
        vector = mixed.transpose(1, 0, 2).reshape(1, self.token_dim)
        return StyleEmbedding(
            vector=vector, weights=Tensor(weights.reshape(1, *weights.shape))
        )


class StyleExtractor(nn.Module):
    """Reference encoder and token layer wired together."""

    def __init__(
        self,
        n_mels: int,
        n_heads: int = 8,
        rng: np.random.Generator = None,
        filters: Sequence[int] = REFERENCE_FILTERS,
        gru_units: int = REFERENCE_DIM,
        n_tokens: int = N_TOKENS,
        token_dim: int = TOKEN_DIM,
    ):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng()
        self.encoder = ReferenceEncoder(
            n_mels, rng=rng, filters=filters, gru_units=gru_units
        )
        self.token_layer = StyleTokenLayer(
            n_heads=n_heads, ref_dim=gru_units, n_tokens=n_tokens,
            token_dim=token_dim, rng=rng,
        )

    def __call__(self, mel: Tensor) -> StyleEmbedding:
        return self.token_layer(self.encoder(mel))


def save_token_weights(path, weights: np.ndarray) -> None:
    """Write per-head token weights as a text file, one head per row."""
    np.savetxt(path, np.asarray(weights, dtype=np.float64), fmt="%.8f")


def load_token_weights(path, n_heads: int = 8, n_tokens: int = N_TOKENS) -> np.ndarray:
    """Read per-head token weights written by save_token_weights."""
    arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if arr.shape != (n_heads, n_tokens):
        raise ValueError(
            f"expected {n_heads} rows of {n_tokens} weights, got shape {arr.shape}"
        )
    return arr
