"""Attention mechanisms for the sequence-to-sequence decoder.

Forward attention constrains alignment so probability mass can only stay
put or advance one encoder step per decoder step. A learned transition
agent emits the per-step move probability u, and a content-based additive
attention supplies the per-step content distribution that reweights the
propagated mass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from rakugo_tts import nn
from rakugo_tts.autodiff import Tensor, concat, get_default_dtype

_MASK_FILL = -1e9


class AdditiveAttention(nn.Module):
    """Content-based attention: v . tanh(W_q q + W_k k + b) energies.

    Keys can be projected once per utterance and reused across decoder steps.
    """

    def __init__(self, query_dim: int, key_dim: int, attn_dim: int, rng: np.random.Generator):
        super().__init__()
        self.wq = Tensor(
            nn.glorot_uniform(rng, (query_dim, attn_dim), query_dim, attn_dim),
            requires_grad=True,
        )
        self.wk = Tensor(
            nn.glorot_uniform(rng, (key_dim, attn_dim), key_dim, attn_dim),
            requires_grad=True,
        )
        self.b = Tensor(
            np.zeros(attn_dim, dtype=get_default_dtype()), requires_grad=True
        )
        self.v = Tensor(
            nn.glorot_uniform(rng, (attn_dim, 1), attn_dim, 1), requires_grad=True
        )
        self.attn_dim = attn_dim

    def project_keys(self, keys: Tensor) -> Tensor:
        """Precompute W_k k for a (batch, steps, key_dim) sequence."""
        return keys @ self.wk

    def probabilities(
        self,
        query: Tensor,
        projected_keys: Tensor,
        key_mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        """Softmax content distribution over encoder steps, shape (batch, steps)."""
        hidden = (projected_keys + (query @ self.wq).reshape(-1, 1, self.attn_dim) + self.b).tanh()
        energies = (hidden @ self.v).reshape(hidden.shape[0], hidden.shape[1])
        if key_mask is not None:
            bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, _MASK_FILL)
            energies = energies + bias.astype(get_default_dtype())
        return energies.softmax(axis=-1)


def expected_position(alignment: np.ndarray) -> np.ndarray:
    """Mean encoder index under an alignment distribution (last axis)."""
    alignment = np.asarray(alignment)
    positions = np.arange(alignment.shape[-1])
    return (alignment * positions).sum(axis=-1)


def forward_attention_recursion(alpha_prev, u_prev, y) -> Tensor:
    """One alignment update: mass stays or advances one step, reweighted by y.

    alpha(n) is proportional to ((1 - u) alpha_prev(n) + u alpha_prev(n-1)) y(n),
    renormalized over n. All arguments broadcast over a leading batch axis;
    y rows must already be probability distributions.
    """
    alpha_prev = alpha_prev if isinstance(alpha_prev, Tensor) else Tensor(alpha_prev)
    u_prev = u_prev if isinstance(u_prev, Tensor) else Tensor(u_prev)
    y = y if isinstance(y, Tensor) else Tensor(y)
    y_sums = y.data.sum(axis=-1)
    if np.any(np.abs(y_sums - 1.0) > 1e-4):
        worst = float(np.abs(y_sums - 1.0).max())
        raise ValueError(f"content distribution y is not normalized (off by {worst:.2e})")
    batch, steps = alpha_prev.shape
    zeros = Tensor(np.zeros((batch, 1), dtype=alpha_prev.data.dtype))
    shifted = concat([zeros, alpha_prev[:, : steps - 1]], axis=1)
    raw = ((1.0 - u_prev) * alpha_prev + u_prev * shifted) * y
    total = raw.sum(axis=-1, keepdims=True)
    return raw / (total + 1e-20)


@dataclass
class AttentionState:
    """Forward-attention state carried across decoder steps."""

    alignment: Tensor
    u: Tensor
    context: Tensor

    def validate(self) -> None:
        sums = self.alignment.data.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("alignment no longer sums to 1")
        if np.any(self.alignment.data < -1e-12):
            raise ValueError("alignment has negative entries")


class ForwardAttention(nn.Module):
    """Forward attention with a transition agent.

    The content distribution comes from additive attention; the transition
    probability u is a sigmoid projection of (context, query, pre-net output)
    computed after each step and applied at the next one.
    """

    def __init__(
        self,
        query_dim: int,
        key_dim: int,
        value_dim: int,
        prenet_dim: int,
        attn_dim: int,
        rng: np.random.Generator,
    ):
        super().__init__()
        self.content = AdditiveAttention(query_dim, key_dim, attn_dim, rng)
        self.agent = nn.Dense(
            value_dim + query_dim + prenet_dim, 1, rng=rng, activation="sigmoid"
        )
        self.value_dim = value_dim

    def init_state(self, batch: int, n_steps: int) -> AttentionState:
        dtype = get_default_dtype()
        alignment = np.zeros((batch, n_steps), dtype=dtype)
        alignment[:, 0] = 1.0
        return AttentionState(
            alignment=Tensor(alignment),
            u=Tensor(np.full((batch, 1), 0.5, dtype=dtype)),
            context=Tensor(np.zeros((batch, self.value_dim), dtype=dtype)),
        )

    def step(
        self,
        state: AttentionState,
        query: Tensor,
        prenet_out: Tensor,
        projected_keys: Tensor,
        values: Tensor,
        key_mask: Optional[np.ndarray] = None,
    ) -> Tuple[Tensor, AttentionState]:
        """Advance one decoder step; returns (context, new state)."""
        y = self.content.probabilities(query, projected_keys, key_mask=key_mask)
        alignment = forward_attention_recursion(state.alignment, state.u, y)
        batch, steps = alignment.shape
        context = (alignment.reshape(batch, 1, steps) @ values).reshape(
            batch, values.shape[-1]
        )
        u = self.agent(concat([context, query, prenet_out], axis=-1))
        return context, AttentionState(alignment=alignment, u=u, context=context)
