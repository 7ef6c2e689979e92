"""Sequence-to-sequence mel-spectrogram synthesizers.

Two backbones share one implementation: a recurrent encoder-decoder with
forward attention ("tacotron2"), and a variant that adds self-attention
streams on both sides ("sa-tacotron"). The encoder turns phoneme IDs, plus
optional style and context conditioning vectors, into per-phoneme feature
sequences; the autoregressive decoder emits one mel frame per step with a
stop probability, and a convolutional post-net refines the whole sequence
with a residual correction.

Width parameters follow one reference configuration and can be shrunk
uniformly through ``ModelConfig.scale`` for fast gradient checking; the
mel band count and conditioning dimensions are never scaled.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from rakugo_tts import nn
from rakugo_tts.attention import AdditiveAttention, AttentionState, ForwardAttention
from rakugo_tts.autodiff import Tensor, concat, get_default_dtype

BACKBONE_TACOTRON2 = "tacotron2"
BACKBONE_SA_TACOTRON = "sa-tacotron"
BACKBONES = (BACKBONE_TACOTRON2, BACKBONE_SA_TACOTRON)


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of one synthesizer instance.

    ``scale`` shrinks every learned width (rounded, floor 1) so miniature
    models stay structurally identical; widths consumed per attention head
    are rounded up to head multiples. ``n_mels``, ``style_dim`` and
    ``context_dim`` are interface dimensions and are never scaled.
    """

    vocab_size: int
    backbone: str = BACKBONE_TACOTRON2
    n_mels: int = 80
    style_dim: int = 0
    context_dim: int = 0
    scale: float = 1.0
    prenet_dropout: float = 0.5
    postnet_dropout: float = 0.5
    zoneout: float = 0.1
    sa_dropout: float = 0.05
    stop_threshold: float = 0.5
    max_steps_factor: int = 30
    inference_prenet_dropout: bool = True
    l2_weight: float = 1e-6

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if not 0.0 < self.scale <= 1.0:
            raise ValueError("scale must be in (0, 1]")

    def scaled(self, width: int, multiple_of: int = 1) -> int:
        n = max(1, round(width * self.scale))
        if multiple_of > 1 and n % multiple_of:
            n += multiple_of - n % multiple_of
        return n

    @property
    def is_sa(self) -> bool:
        return self.backbone == BACKBONE_SA_TACOTRON

    @property
    def embed_dim(self) -> int:
        return self.scaled(512)

    @property
    def conv_width(self) -> int:
        return self.scaled(512)

    @property
    def encoder_width(self) -> int:
        return self.scaled(512, multiple_of=2)

    @property
    def sa_width(self) -> int:
        return self.scaled(32, multiple_of=2)

    @property
    def prenet_width(self) -> int:
        return self.scaled(256)

    @property
    def decoder_width(self) -> int:
        return self.scaled(1024, multiple_of=2)

    @property
    def attn_width(self) -> int:
        return self.scaled(128)

    @property
    def concat_width(self) -> int:
        width = self.decoder_width + self.encoder_width
        if self.is_sa:
            width += self.sa_width
        return width


@dataclass
class EncoderOutput:
    """Per-phoneme feature sequences produced by the encoder."""

    lstm_stream: Tensor
    sa_stream: Optional[Tensor] = None
    mask: Optional[np.ndarray] = None

    @property
    def batch(self) -> int:
        return self.lstm_stream.shape[0]

    @property
    def n_steps(self) -> int:
        return self.lstm_stream.shape[1]


@dataclass
class DecoderState:
    """Mutable decoding state carried across decoder steps."""

    prev_frame: Tensor
    prenet_out: Tensor
    lstm1_state: Tuple[Tensor, Tensor]
    lstm2_state: Tuple[Tensor, Tensor]
    fwd_state: AttentionState
    fwd_keys: Tensor
    sa_keys: Optional[Tensor] = None
    sa_context: Optional[Tensor] = None
    history: List[Tensor] = field(default_factory=list)


@dataclass
class LossBreakdown:
    """Training loss and its components; ``total`` is their sum."""

    before_mse: Tensor
    after_mse: Tensor
    stop_bce: Tensor
    l2: Tensor
    total: Tensor

    def scalars(self) -> dict:
        return {
            "before_mse": float(self.before_mse.data),
            "after_mse": float(self.after_mse.data),
            "stop_bce": float(self.stop_bce.data),
            "l2": float(self.l2.data),
            "total": float(self.total.data),
        }


@dataclass
class SynthesisResult:
    """Autoregressive decoding output for one utterance."""

    mel: np.ndarray
    mel_before_postnet: np.ndarray
    stop_probabilities: np.ndarray
    alignment: np.ndarray
    truncated: bool

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


def _tile_over_time(vec: Tensor, batch: int, time: int) -> Tensor:
    base = Tensor(np.zeros((batch, time, vec.shape[-1]), dtype=get_default_dtype()))
    return base + vec.reshape(vec.shape[0], 1, vec.shape[-1])


class TacotronModel(nn.Module):
    """Encoder-attention-decoder mel synthesizer with optional SA streams."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        c = config

        self.phoneme_embedding = nn.Embedding(c.vocab_size, c.embed_dim, rng=rng)
        in_ch = c.embed_dim + c.style_dim + c.context_dim
        for i in range(3):
            setattr(self, f"enc_conv{i}",
                    nn.Conv1d(in_ch, c.conv_width, 5, rng=rng, bias=False))
            setattr(self, f"enc_norm{i}", nn.BatchNorm(c.conv_width))
            in_ch = c.conv_width
        self.encoder_lstm = nn.BiLSTM(c.conv_width, c.encoder_width, rng=rng,
                                      zoneout=c.zoneout)
        if c.is_sa:
            self.enc_sa_attn = nn.MultiHeadAttention(
                c.encoder_width, c.encoder_width, c.sa_width, 2, rng=rng,
                dropout=c.sa_dropout,
            )
            self.enc_sa_dense = nn.Dense(c.sa_width, c.sa_width, rng=rng,
                                         activation="tanh")
            self.enc_sa_res = nn.Dense(c.encoder_width, c.sa_width, rng=rng,
                                       bias=False)

        self.prenet_fc1 = nn.Dense(c.n_mels, c.prenet_width, rng=rng,
                                   activation="relu")
        self.prenet_fc2 = nn.Dense(c.prenet_width, c.prenet_width, rng=rng,
                                   activation="relu")
        self.prenet_drop = nn.Dropout(c.prenet_dropout, rng)

        context_total = c.encoder_width + (c.sa_width if c.is_sa else 0)
        self.decoder_lstm1 = nn.LSTMCell(c.prenet_width + context_total,
                                         c.decoder_width, rng=rng, zoneout=c.zoneout)
        self.decoder_lstm2 = nn.LSTMCell(c.decoder_width, c.decoder_width, rng=rng,
                                         zoneout=c.zoneout)
        self.fwd_attention = ForwardAttention(
            query_dim=c.decoder_width, key_dim=c.encoder_width,
            value_dim=c.encoder_width, prenet_dim=c.prenet_width,
            attn_dim=c.attn_width, rng=rng,
        )
        if c.is_sa:
            self.sa_attention = AdditiveAttention(
                query_dim=c.decoder_width, key_dim=c.sa_width,
                attn_dim=c.attn_width, rng=rng,
            )
            self.dec_sa_attn = nn.MultiHeadAttention(
                c.concat_width, c.concat_width, c.concat_width, 2, rng=rng,
                causal=True, dropout=c.sa_dropout,
            )
            self.dec_sa_dense = nn.Dense(c.concat_width, c.concat_width, rng=rng,
                                         activation="tanh")

        self.frame_proj = nn.Dense(c.concat_width, c.n_mels, rng=rng)
        self.stop_proj = nn.Dense(c.concat_width, 1, rng=rng)

        widths = [c.n_mels] + [c.scaled(512)] * 4 + [c.n_mels]
        for i in range(5):
            setattr(self, f"post_conv{i}",
                    nn.Conv1d(widths[i], widths[i + 1], 5, rng=rng, bias=False))
            setattr(self, f"post_norm{i}", nn.BatchNorm(widths[i + 1]))
        self.post_drop = nn.Dropout(c.postnet_dropout, rng)

    # ------------------------------------------------------------------ #
    # encoder
    # ------------------------------------------------------------------ #

    def encode(
        self,
        phoneme_ids: np.ndarray,
        style: Optional[Tensor] = None,
        context: Optional[Tensor] = None,
        mask: Optional[np.ndarray] = None,
    ) -> EncoderOutput:
        """Encode (batch, steps) phoneme IDs plus optional conditioning.

        ``style`` and ``context`` are per-utterance vectors broadcast over
        every phoneme position before the convolutional stack.
        """
        ids = np.asarray(phoneme_ids)
        if ids.ndim == 1:
            ids = ids.reshape(1, -1)
        if ids.shape[1] == 0:
            raise ValueError("empty phoneme sequence")
        batch, time = ids.shape
        x = self.phoneme_embedding(ids)
        for name, vec, want in (("style", style, self.config.style_dim),
                                ("context", context, self.config.context_dim)):
            if want == 0:
                if vec is not None:
                    raise ValueError(f"model takes no {name} conditioning")
                continue
            if vec is None:
                raise ValueError(f"model requires a {name} vector of dim {want}")
            if not isinstance(vec, Tensor):
                vec = Tensor(np.asarray(vec, dtype=get_default_dtype()))
            if vec.ndim == 1:
                vec = vec.reshape(1, vec.shape[-1])
            if vec.shape[-1] != want or vec.shape[0] not in (1, batch):
                raise ValueError(
                    f"{name} vector has shape {vec.shape}, expected "
                    f"({batch}, {want})"
                )
            if vec.shape[0] == 1 and batch > 1:
                vec = _tile_over_time(vec, 1, batch).reshape(batch, want)
            x = concat([x, _tile_over_time(vec, batch, time)], axis=-1)
        for i in range(3):
            x = getattr(self, f"enc_norm{i}")(getattr(self, f"enc_conv{i}")(x)).relu()
        lstm_stream = self.encoder_lstm(x, mask)
        sa_stream = None
        if self.config.is_sa:
            attended, _ = self.enc_sa_attn(lstm_stream, lstm_stream, key_mask=mask)
            sa_stream = self.enc_sa_res(lstm_stream) + self.enc_sa_dense(attended)
        return EncoderOutput(lstm_stream=lstm_stream, sa_stream=sa_stream, mask=mask)

    # ------------------------------------------------------------------ #
    # decoder
    # ------------------------------------------------------------------ #

    def init_decoder_state(self, encoder_output: EncoderOutput) -> DecoderState:
        """Fresh decoding state: zero frame, zero contexts, alignment at 0."""
        c = self.config
        batch = encoder_output.batch
        dtype = get_default_dtype()
        state = DecoderState(
            prev_frame=Tensor(np.zeros((batch, c.n_mels), dtype=dtype)),
            prenet_out=Tensor(np.zeros((batch, c.prenet_width), dtype=dtype)),
            lstm1_state=self.decoder_lstm1.initial_state(batch),
            lstm2_state=self.decoder_lstm2.initial_state(batch),
            fwd_state=self.fwd_attention.init_state(batch, encoder_output.n_steps),
            fwd_keys=self.fwd_attention.content.project_keys(
                encoder_output.lstm_stream
            ),
        )
        if c.is_sa:
            state.sa_keys = self.sa_attention.project_keys(encoder_output.sa_stream)
            state.sa_context = Tensor(np.zeros((batch, c.sa_width), dtype=dtype))
        return state

    def _advance(
        self,
        state: DecoderState,
        encoder_output: EncoderOutput,
        force_prenet_dropout: Optional[bool] = None,
    ) -> Tuple[Tensor, DecoderState]:
        """Run one decoder step up to the projection input vector."""
        if not isinstance(state, DecoderState):
            raise ValueError("decoder state is not initialized")
        c = self.config
        force = (c.inference_prenet_dropout if force_prenet_dropout is None
                 else force_prenet_dropout)
        h = self.prenet_drop(self.prenet_fc1(state.prev_frame), force=force)
        prenet_out = self.prenet_drop(self.prenet_fc2(h), force=force)

        pieces = [prenet_out, state.fwd_state.context]
        if c.is_sa:
            pieces.append(state.sa_context)
        h1, c1 = self.decoder_lstm1(concat(pieces, axis=-1), state.lstm1_state)
        h2, c2 = self.decoder_lstm2(h1, state.lstm2_state)

        ctx_fwd, fwd_state = self.fwd_attention.step(
            state.fwd_state, h2, prenet_out, state.fwd_keys,
            encoder_output.lstm_stream, key_mask=encoder_output.mask,
        )
        sa_context = None
        if c.is_sa:
            y_sa = self.sa_attention.probabilities(
                h2, state.sa_keys, key_mask=encoder_output.mask
            )
            batch, steps = y_sa.shape
            sa_context = (y_sa.reshape(batch, 1, steps)
                          @ encoder_output.sa_stream).reshape(batch, c.sa_width)
            vec = concat([h2, ctx_fwd, sa_context], axis=-1)
        else:
            vec = concat([h2, ctx_fwd], axis=-1)

        new_state = DecoderState(
            prev_frame=state.prev_frame,
            prenet_out=prenet_out,
            lstm1_state=(h1, c1),
            lstm2_state=(h2, c2),
            fwd_state=fwd_state,
            fwd_keys=state.fwd_keys,
            sa_keys=state.sa_keys,
            sa_context=sa_context,
            history=state.history,
        )
        return vec, new_state

    def _decoder_sa_block(self, seq: Tensor) -> Tensor:
        """Causal self-attention block over (batch, steps, concat_width)."""
        attended, _ = self.dec_sa_attn(seq, seq)
        return seq + self.dec_sa_dense(attended)

    def decode_step(
        self,
        state: DecoderState,
        encoder_output: EncoderOutput,
        force_prenet_dropout: Optional[bool] = None,
    ) -> Tuple[Tensor, Tensor, DecoderState]:
        """One autoregressive step: (mel frame, stop probability, new state)."""
        vec, state = self._advance(state, encoder_output, force_prenet_dropout)
        if self.config.is_sa:
            state.history = state.history + [vec]
            batch = vec.shape[0]
            seq = concat([v.reshape(batch, 1, v.shape[-1]) for v in state.history],
                         axis=1)
            out = self._decoder_sa_block(seq)[:, -1, :]
        else:
            out = vec
        frame = self.frame_proj(out)
        stop_prob = self.stop_proj(out).reshape(frame.shape[0]).sigmoid()
        state.prev_frame = frame
        return frame, stop_prob, state

    def teacher_forced(
        self,
        phoneme_ids: np.ndarray,
        targets: Tensor,
        style: Optional[Tensor] = None,
        context: Optional[Tensor] = None,
        in_mask: Optional[np.ndarray] = None,
        out_mask: Optional[np.ndarray] = None,
        force_prenet_dropout: Optional[bool] = None,
        feedback_prob: float = 0.0,
        feedback_rng: Optional[np.random.Generator] = None,
    ) -> Tuple[Tensor, Tensor, Tensor]:
        """Decode with ground-truth frames as inputs.

        With ``feedback_prob`` > 0, each decoder step instead consumes the
        model's own previous frame with that probability (one coin per step,
        shared across the batch), which trains the decoder to stay on
        trajectory when it later runs free. Gradients flow through fed-back
        frames. On the self-attention backbone feedback recomputes the causal
        block per step, so it costs O(steps^2).

        Returns (before-post-net mels, after-post-net mels, stop logits),
        shapes (batch, steps, n_mels) twice and (batch, steps).
        """
        if not isinstance(targets, Tensor):
            targets = Tensor(np.asarray(targets, dtype=get_default_dtype()))
        if not 0.0 <= feedback_prob < 1.0:
            raise ValueError("feedback_prob must be in [0, 1)")
        if feedback_prob > 0.0 and feedback_rng is None:
            raise ValueError("feedback_prob needs feedback_rng for its draws")
        encoder_output = self.encode(phoneme_ids, style=style, context=context,
                                     mask=in_mask)
        state = self.init_decoder_state(encoder_output)
        batch, steps = targets.shape[0], targets.shape[1]
        # training-mode dropout is governed by self.training; never forced here
        force = False if force_prenet_dropout is None else force_prenet_dropout
        vecs = []
        prev_pred: Optional[Tensor] = None
        for t in range(steps):
            if t > 0:
                if prev_pred is not None and feedback_rng.random() < feedback_prob:
                    state.prev_frame = prev_pred
                else:
                    state.prev_frame = targets[:, t - 1, :]
            vec, state = self._advance(state, encoder_output, force)
            vecs.append(vec.reshape(batch, 1, vec.shape[-1]))
            if feedback_prob > 0.0:
                if self.config.is_sa:
                    out_t = self._decoder_sa_block(concat(vecs, axis=1))[:, -1, :]
                else:
                    out_t = vec
                prev_pred = self.frame_proj(out_t)
        seq = concat(vecs, axis=1)
        if self.config.is_sa:
            seq = self._decoder_sa_block(seq)
        before = self.frame_proj(seq)
        stop_logits = self.stop_proj(seq).reshape(batch, steps)
        after = self.postnet_refine(before)
        return before, after, stop_logits

    # ------------------------------------------------------------------ #
    # post-net and loss
    # ------------------------------------------------------------------ #

    def postnet_refine(self, mel: Tensor) -> Tensor:
        """Residual refinement of a (batch, steps, n_mels) mel sequence."""
        x = mel
        for i in range(5):
            x = getattr(self, f"post_norm{i}")(getattr(self, f"post_conv{i}")(x))
            if i < 4:
                x = x.tanh()
            x = self.post_drop(x)
        return mel + x

    def l2_parameters(self) -> List[Tensor]:
        """Weight matrices subject to L2 regularization (biases excluded)."""
        return [p for _, p in self.named_parameters() if p.ndim >= 2]

    def compute_loss(
        self,
        before: Tensor,
        after: Tensor,
        targets: Tensor,
        stop_logits: Tensor,
        stop_targets: np.ndarray,
        l2_params: Optional[List[Tensor]] = None,
        out_mask: Optional[np.ndarray] = None,
    ) -> LossBreakdown:
        """Training loss: two masked MSE terms, stop-token BCE, and L2."""
        if not isinstance(targets, Tensor):
            targets = Tensor(np.asarray(targets, dtype=get_default_dtype()))
        if before.shape != targets.shape or after.shape != targets.shape:
            raise ValueError(
                f"prediction shapes {before.shape}/{after.shape} do not match "
                f"target shape {targets.shape}"
            )
        stop_targets = np.asarray(stop_targets, dtype=get_default_dtype())
        if tuple(stop_logits.shape) != tuple(stop_targets.shape):
            raise ValueError(
                f"stop logit shape {stop_logits.shape} does not match "
                f"target shape {stop_targets.shape}"
            )
        batch, steps, n_mels = targets.shape
        if out_mask is None:
            frame_mask = np.ones((batch, steps), dtype=get_default_dtype())
        else:
            frame_mask = np.asarray(out_mask, dtype=get_default_dtype())
        n_valid = float(frame_mask.sum())
        if n_valid == 0:
            raise ValueError("loss mask selects no frames")
        mel_mask = Tensor(frame_mask.reshape(batch, steps, 1))
        flat_mask = Tensor(frame_mask)

        def masked_mse(pred):
            err = (pred - targets) * mel_mask
            return (err * err).sum() / (n_valid * n_mels)

        before_mse = masked_mse(before)
        after_mse = masked_mse(after)
        bce = (stop_logits.softplus() - stop_logits * Tensor(stop_targets))
        stop_bce = (bce * flat_mask).sum() / n_valid
        l2 = Tensor(np.zeros((), dtype=get_default_dtype()))
        if l2_params and self.config.l2_weight > 0.0:
            for p in l2_params:
                l2 = l2 + (p * p).sum()
            l2 = l2 * self.config.l2_weight
        total = before_mse + after_mse + stop_bce + l2
        return LossBreakdown(before_mse=before_mse, after_mse=after_mse,
                             stop_bce=stop_bce, l2=l2, total=total)

    # ------------------------------------------------------------------ #
    # inference
    # ------------------------------------------------------------------ #

    def synthesize(
        self,
        phoneme_ids: np.ndarray,
        style: Optional[Tensor] = None,
        context: Optional[Tensor] = None,
        max_steps: Optional[int] = None,
        force_prenet_dropout: Optional[bool] = None,
    ) -> SynthesisResult:
        """Autoregressive decoding of one utterance.

        Stops when the stop probability crosses the configured threshold;
        ``truncated`` is set when the step budget ran out first. The post-net
        is applied to the finished sequence.
        """
        ids = np.asarray(phoneme_ids)
        if ids.ndim == 1:
            ids = ids.reshape(1, -1)
        if ids.shape[0] != 1:
            raise ValueError("synthesize decodes one utterance at a time")
        if max_steps is None:
            max_steps = self.config.max_steps_factor * ids.shape[1]
        if max_steps < 1:
            raise ValueError("max_steps must be at least 1")

        was_training = self.training
        self.eval()
        try:
            encoder_output = self.encode(ids, style=style, context=context)
            state = self.init_decoder_state(encoder_output)
            frames, stops, alignments = [], [], []
            truncated = True
            for _ in range(max_steps):
                frame, stop_prob, state = self.decode_step(
                    state, encoder_output, force_prenet_dropout
                )
                frames.append(frame.reshape(1, 1, self.config.n_mels))
                stops.append(float(stop_prob.data[0]))
                alignments.append(state.fwd_state.alignment.data[0].copy())
                if stops[-1] > self.config.stop_threshold:
                    truncated = False
                    break
            before = concat(frames, axis=1)
            after = self.postnet_refine(before)
        finally:
            self.train(was_training)
        return SynthesisResult(
            mel=after.data[0].copy(),
            mel_before_postnet=before.data[0].copy(),
            stop_probabilities=np.asarray(stops),
            alignment=np.asarray(alignments),
            truncated=truncated,
        )


def stop_targets_for(lengths: np.ndarray, steps: int) -> np.ndarray:
    """Stop-token targets: 1 at each utterance's final valid frame."""
    lengths = np.asarray(lengths)
    targets = np.zeros((lengths.shape[0], steps))
    for b, n in enumerate(lengths):
        if not 1 <= n <= steps:
            raise ValueError(f"length {n} outside [1, {steps}]")
        targets[b, n - 1] = 1.0
    return targets


def frame_mask_for(lengths: np.ndarray, steps: int) -> np.ndarray:
    """Validity mask (batch, steps) with ones over each utterance's frames."""
    lengths = np.asarray(lengths)
    return (np.arange(steps)[None, :] < lengths[:, None]).astype(np.float64)


def tacotron2_config(vocab_size: int, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, backbone=BACKBONE_TACOTRON2,
                       **overrides)


def sa_tacotron_config(vocab_size: int, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, backbone=BACKBONE_SA_TACOTRON,
                       **overrides)


def zero_sa_blocks(model: TacotronModel) -> None:
    """Zero the self-attention block projections.

    With the encoder block's residual and output projections at zero the SA
    stream is identically zero, and with the decoder block's dense at zero
    that block is the identity; the model then computes exactly what the
    plain backbone computes with matching shared weights.
    """
    if not model.config.is_sa:
        raise ValueError("model has no self-attention blocks")
    for t in (model.enc_sa_res.w, model.enc_sa_dense.w, model.enc_sa_dense.b,
              model.dec_sa_dense.w, model.dec_sa_dense.b):
        t.data[...] = 0.0
