"""Training pipeline: the 12 model variants, run configuration, the
teacher-forced training loop, persistence, and story-level synthesis.

A variant pairs one backbone (plain or self-attention) with one
conditioning scheme (none, style tokens, a 4-dim character-attribute
embedding, a 68-dim full-context embedding, or style tokens combined
with either embedding). Variant names match the system names used in
the synthetic listening-test corpus so trained models line up with the
score tables end to end.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from rakugo_tts import checkpoint as ckpt_io
from rakugo_tts import dsp, frontend, gst, model, nn, optim
from rakugo_tts.autodiff import Tensor, get_default_dtype, no_grad
from rakugo_tts.frontend import ContextLabels, CorpusManifest, PhonemeInventory
from rakugo_tts.model import LossBreakdown, ModelConfig, SynthesisResult, TacotronModel


# --------------------------------------------------------------------- #
# variants
# --------------------------------------------------------------------- #

CONTEXT_ATTR = frontend.EMBED_ATTR
CONTEXT_ALL = frontend.EMBED_ALL


@dataclass(frozen=True)
class ModelVariant:
    """One backbone plus one conditioning scheme."""

    name: str
    backbone: str
    use_gst: bool
    context_mode: Optional[str]


def _build_variants() -> Dict[str, ModelVariant]:
    conditionings = (
        ("", False, None),
        ("-GST-8", True, None),
        ("-ATTR", False, CONTEXT_ATTR),
        ("-ALL", False, CONTEXT_ALL),
        ("-GST-8-ATTR", True, CONTEXT_ATTR),
        ("-GST-8-ALL", True, CONTEXT_ALL),
    )
    variants = {}
    for prefix, backbone in (
        ("Taco", model.BACKBONE_TACOTRON2),
        ("SA-Taco", model.BACKBONE_SA_TACOTRON),
    ):
        for suffix, use_gst, mode in conditionings:
            name = prefix + suffix
            variants[name] = ModelVariant(
                name=name, backbone=backbone, use_gst=use_gst, context_mode=mode
            )
    return variants


VARIANTS: Dict[str, ModelVariant] = _build_variants()
VARIANT_NAMES: Tuple[str, ...] = tuple(VARIANTS)


def get_variant(name: Union[str, ModelVariant]) -> ModelVariant:
    """Look up a variant by name; accepts an already-resolved variant."""
    if isinstance(name, ModelVariant):
        return name
    if name not in VARIANTS:
        raise ValueError(
            f"unknown variant {name!r}; expected one of {', '.join(VARIANT_NAMES)}"
        )
    return VARIANTS[name]


# --------------------------------------------------------------------- #
# run configuration
# --------------------------------------------------------------------- #


@dataclass(frozen=True)
class TrainConfig:
    """One training run's knobs, serializable as key-value text.

    Defaults are desk-scale so a full run finishes on a laptop CPU;
    :meth:`paper_scale` restores the published training regime.
    """

    variant: str = "Taco"
    batch_size: int = 8
    learning_rate: float = 0.001
    lr_decay: float = 0.98
    lr_floor: float = 1e-5
    epochs: int = 300
    seed: int = 0
    scale: float = 0.125
    n_mels: int = 80
    sample_rate: int = 16000
    clip_norm: float = 1.0
    select_best: bool = False
    prenet_dropout: float = 0.5
    postnet_dropout: float = 0.5
    zoneout: float = 0.1
    feedback_prob: float = 0.0
    feedback_start: int = 1

    def __post_init__(self):
        get_variant(self.variant)
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 < self.scale <= 1.0:
            raise ValueError("scale must be in (0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.lr_floor < 0.0:
            raise ValueError("lr_floor must be non-negative")
        if self.n_mels < 1:
            raise ValueError("n_mels must be at least 1")
        for name in ("prenet_dropout", "postnet_dropout", "zoneout",
                     "feedback_prob"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.feedback_start < 1:
            raise ValueError("feedback_start must be at least 1")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """Published regime: batch 128, about 2,000 epochs, full widths."""
        values = dict(batch_size=128, epochs=2000, scale=1.0)
        values.update(overrides)
        return cls(**values)

    def to_text(self) -> str:
        """Render as ``key = value`` lines; the exact text is fingerprinted."""
        lines = ["# training run configuration"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse :meth:`to_text` output (or a hand-written config file)."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"line {lineno}: unknown configuration key {key!r}")
            values[key] = _parse_config_value(fields[key].type, value, key, lineno)
        return cls(**values)


def _parse_config_value(type_name: str, value: str, key: str, lineno: int):
    if type_name == "bool":
        lowered = value.lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise ValueError(f"line {lineno}: {key} expects true/false, got {value!r}")
    if type_name == "int":
        return int(value)
    if type_name == "float":
        return float(value)
    return value.strip("'\"")


def save_config(path: str, config: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config.to_text())


def load_config(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return TrainConfig.from_text(fh.read())


# --------------------------------------------------------------------- #
# variant assembly
# --------------------------------------------------------------------- #


class VariantSystem(nn.Module):
    """A synthesizer plus the conditioning front-ends its variant needs.

    Holds the sequence-to-sequence model and, depending on the variant, a
    style extractor (trained against the target mel as its reference) and
    a context-label embedding. ``mel_stats`` is attached by training or
    checkpoint loading so synthesis can invert feature normalization.
    """

    def __init__(
        self,
        variant: Union[str, ModelVariant],
        config: TrainConfig,
        rng: np.random.Generator,
    ):
        super().__init__()
        variant = get_variant(variant)
        self.variant = variant
        self.train_config = config
        self.mel_stats: Optional[dsp.MelStats] = None

        context_dim = 0
        if variant.context_mode == CONTEXT_ATTR:
            context_dim = frontend.ATTR_EMBED_DIM
        elif variant.context_mode == CONTEXT_ALL:
            context_dim = frontend.ALL_EMBED_DIM
        model_config = ModelConfig(
            vocab_size=len(PhonemeInventory()),
            backbone=variant.backbone,
            n_mels=config.n_mels,
            context_dim=context_dim,
            scale=config.scale,
            prenet_dropout=config.prenet_dropout,
            postnet_dropout=config.postnet_dropout,
            zoneout=config.zoneout,
        )
        if variant.use_gst:
            token_dim = model_config.scaled(gst.TOKEN_DIM, multiple_of=8)
            model_config = dataclasses.replace(model_config, style_dim=token_dim)

        self.model = TacotronModel(model_config, rng)
        if variant.use_gst:
            self.style = gst.StyleExtractor(
                n_mels=config.n_mels,
                n_heads=8,
                rng=rng,
                filters=tuple(model_config.scaled(f) for f in gst.REFERENCE_FILTERS),
                gru_units=model_config.scaled(gst.REFERENCE_DIM),
                token_dim=model_config.style_dim,
            )
        else:
            self.style = None
        if variant.context_mode is not None:
            self.context = frontend.ContextEmbedding(
                variant.context_mode, seed=int(rng.integers(0, 2**31 - 1))
            )
        else:
            self.context = None

    def l2_parameters(self) -> List[Tensor]:
        """Weight matrices under L2 regularization, across all components."""
        return [p for _, p in self.named_parameters() if p.ndim >= 2]

    def loss_for_batch(
        self,
        batch: "Batch",
        force_prenet_dropout: Optional[bool] = None,
        feedback_prob: float = 0.0,
        feedback_rng: Optional[np.random.Generator] = None,
    ) -> LossBreakdown:
        """Teacher-forced loss over one padded batch."""
        targets = Tensor(np.asarray(batch.mels, dtype=get_default_dtype()))
        style = self.style(targets).vector if self.style is not None else None
        context = self.context(batch.labels) if self.context is not None else None
        before, after, stop_logits = self.model.teacher_forced(
            batch.phoneme_ids,
            targets,
            style=style,
            context=context,
            in_mask=batch.in_mask,
            out_mask=batch.out_mask,
            force_prenet_dropout=force_prenet_dropout,
            feedback_prob=feedback_prob,
            feedback_rng=feedback_rng,
        )
        return self.model.compute_loss(
            before,
            after,
            targets,
            stop_logits,
            batch.stop_targets,
            l2_params=self.l2_parameters(),
            out_mask=batch.out_mask,
        )

    def style_vector(
        self,
        reference_mel: Optional[np.ndarray] = None,
        style_weights: Optional[np.ndarray] = None,
    ) -> Optional[Tensor]:
        """Resolve the style input for synthesis.

        Style-conditioned variants need exactly one source: a reference
        mel (normalized, shape (frames, n_mels)) or manual per-head token
        weights. Unconditioned variants take neither.
        """
        if self.style is None:
            if reference_mel is not None or style_weights is not None:
                raise ValueError(
                    f"variant {self.variant.name!r} takes no style reference"
                )
            return None
        if style_weights is not None:
            return self.style.token_layer.from_weights(style_weights).vector
        if reference_mel is not None:
            mel = np.asarray(reference_mel, dtype=get_default_dtype())
            if mel.ndim != 2:
                raise ValueError("reference mel must have shape (frames, n_mels)")
            return self.style(Tensor(mel.reshape(1, *mel.shape))).vector
        raise ValueError(
            f"variant {self.variant.name!r} needs a reference mel or token weights"
        )

    def context_vector(self, labels: Optional[ContextLabels]) -> Optional[Tensor]:
        """Resolve the context input; unconditioned variants ignore labels."""
        if self.context is None:
            return None
        if labels is None:
            raise ValueError(
                f"variant {self.variant.name!r} needs context labels"
            )
        return self.context([labels])

    def synthesize_utterance(
        self,
        phoneme_ids: np.ndarray,
        labels: Optional[ContextLabels] = None,
        reference_mel: Optional[np.ndarray] = None,
        style_weights: Optional[np.ndarray] = None,
        max_steps: Optional[int] = None,
        force_prenet_dropout: Optional[bool] = None,
    ) -> SynthesisResult:
        style = self.style_vector(reference_mel, style_weights)
        context = self.context_vector(labels)
        return self.model.synthesize(
            phoneme_ids,
            style=style,
            context=context,
            max_steps=max_steps,
            force_prenet_dropout=force_prenet_dropout,
        )


# --------------------------------------------------------------------- #
# features and batches
# --------------------------------------------------------------------- #


@dataclass
class UtteranceFeatures:
    """Model-ready view of one utterance: IDs, labels, normalized mel."""

    utt_id: str
    phoneme_ids: np.ndarray
    labels: ContextLabels
    mel: np.ndarray


def corpus_mel_stats(manifest: CorpusManifest, n_mels: int = 80) -> dsp.MelStats:
    """Pooled log-mel statistics over the training partition."""
    mels = []
    for utt in manifest.utterances_for("train"):
        if utt.audio_path is None:
            raise ValueError(f"utterance {utt.utt_id!r} has no audio file")
        mels.append(dsp.mel_spectrogram(dsp.read_wav(utt.audio_path), n_mels=n_mels))
    return dsp.MelStats.from_corpus(mels)


def utterance_features(
    utt: frontend.Utterance, stats: dsp.MelStats, n_mels: int = 80
) -> UtteranceFeatures:
    if utt.audio_path is None:
        raise ValueError(f"utterance {utt.utt_id!r} has no audio file")
    wav = dsp.read_wav(utt.audio_path)
    mel = dsp.mel_spectrogram(wav, stats=stats, n_mels=n_mels)
    return UtteranceFeatures(
        utt_id=utt.utt_id,
        phoneme_ids=np.asarray(utt.phoneme_ids, dtype=np.int64),
        labels=utt.labels,
        mel=mel.data,
    )


@dataclass
class Batch:
    """Padded arrays for one teacher-forced step."""

    phoneme_ids: np.ndarray
    in_mask: np.ndarray
    mels: np.ndarray
    out_mask: np.ndarray
    stop_targets: np.ndarray
    labels: List[ContextLabels]

    @property
    def size(self) -> int:
        return self.phoneme_ids.shape[0]


def make_batch(features: Sequence[UtteranceFeatures]) -> Batch:
    """Zero-pad a group of utterances to shared input/output lengths."""
    if not features:
        raise ValueError("cannot build an empty batch")
    dtype = get_default_dtype()
    in_lens = np.asarray([len(f.phoneme_ids) for f in features])
    out_lens = np.asarray([f.mel.shape[0] for f in features])
    t_in, t_out = int(in_lens.max()), int(out_lens.max())
    n_mels = features[0].mel.shape[1]
    ids = np.zeros((len(features), t_in), dtype=np.int64)
    mels = np.zeros((len(features), t_out, n_mels), dtype=dtype)
    for b, f in enumerate(features):
        if f.mel.shape[1] != n_mels:
            raise ValueError(
                f"utterance {f.utt_id!r} has {f.mel.shape[1]} mel bands, "
                f"batch uses {n_mels}"
            )
        ids[b, : in_lens[b]] = f.phoneme_ids
        mels[b, : out_lens[b]] = f.mel
    return Batch(
        phoneme_ids=ids,
        in_mask=model.frame_mask_for(in_lens, t_in).astype(dtype),
        mels=mels,
        out_mask=model.frame_mask_for(out_lens, t_out).astype(dtype),
        stop_targets=model.stop_targets_for(out_lens, t_out).astype(dtype),
        labels=[f.labels for f in features],
    )


# --------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------- #


class TrainingDiverged(RuntimeError):
    """Raised when a training or validation loss stops being finite."""


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    learning_rate: float
    train_loss: float
    validation_loss: float


@dataclass
class TrainResult:
    system: VariantSystem
    config: TrainConfig
    history: List[EpochRecord]
    mel_stats: dsp.MelStats
    optimizer: optim.Adam
    rng: np.random.Generator
    best_epoch: Optional[int] = None


LOSS_HISTORY_HEADER = ("epoch", "learning_rate", "train_loss", "validation_loss")


def save_loss_history(path: str, history: Sequence[EpochRecord]) -> None:
    """Write per-epoch losses as CSV with a fixed header."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_HISTORY_HEADER)
        for rec in history:
            writer.writerow(
                [rec.epoch, repr(rec.learning_rate), repr(rec.train_loss),
                 repr(rec.validation_loss)]
            )


def validation_loss(
    system: VariantSystem, features: Sequence[UtteranceFeatures], batch_size: int
) -> float:
    """Mean per-utterance loss with dropout and zoneout disabled."""
    if not features:
        raise ValueError("validation needs at least one utterance")
    was_training = system.training
    system.eval()
    try:
        total, count = 0.0, 0
        for start in range(0, len(features), batch_size):
            chunk = features[start : start + batch_size]
            with no_grad():
                loss = system.loss_for_batch(make_batch(chunk),
                                             force_prenet_dropout=False)
            total += float(loss.total.data) * len(chunk)
            count += len(chunk)
    finally:
        system.train(was_training)
    return total / count


def _diverged(kind: str, epoch: int, batch_index: int, loss: LossBreakdown) -> TrainingDiverged:
    parts = ", ".join(f"{k}={v:.6g}" for k, v in loss.scalars().items())
    return TrainingDiverged(
        f"non-finite {kind} loss at epoch {epoch}, batch {batch_index}: {parts}"
    )


def train(
    manifest: CorpusManifest,
    variant: Union[str, ModelVariant, None] = None,
    config: Optional[TrainConfig] = None,
) -> TrainResult:
    """Teacher-forced training of one variant on a prepared corpus.

    The corpus must already be length-filtered and hold non-empty train
    and validation partitions. Every stochastic choice (weight init,
    batch order, dropout, zoneout) comes from one generator seeded by the
    config, so a fixed seed reproduces the loss history exactly. Raises
    :class:`TrainingDiverged` as soon as any loss turns non-finite.
    """
    config = config if config is not None else TrainConfig()
    resolved = get_variant(variant if variant is not None else config.variant)
    config = dataclasses.replace(config, variant=resolved.name)

    rng = np.random.default_rng(config.seed)
    system = VariantSystem(resolved, config, rng)
    stats = corpus_mel_stats(manifest, n_mels=config.n_mels)
    system.mel_stats = stats

    train_feats = [
        utterance_features(u, stats, config.n_mels)
        for u in manifest.utterances_for("train")
    ]
    val_feats = [
        utterance_features(u, stats, config.n_mels)
        for u in manifest.utterances_for("validation")
    ]
    if not train_feats:
        raise ValueError("train partition is empty")
    if not val_feats:
        raise ValueError("validation partition is empty")

    optimizer = optim.Adam(
        system.parameters(), lr=config.learning_rate, clip_norm=config.clip_norm
    )
    history: List[EpochRecord] = []
    best: Tuple[float, Optional[int], Optional[dict]] = (np.inf, None, None)

    for epoch in range(1, config.epochs + 1):
        lr = max(config.lr_floor, config.learning_rate * config.lr_decay ** (epoch - 1))
        optimizer.lr = lr
        system.train()
        order = rng.permutation(len(train_feats))
        weighted, seen = 0.0, 0
        feedback = config.feedback_prob if epoch >= config.feedback_start else 0.0
        for batch_index, start in enumerate(range(0, len(order), config.batch_size), start=1):
            chunk = [train_feats[i] for i in order[start : start + config.batch_size]]
            batch = make_batch(chunk)
            optimizer.zero_grad()
            loss = system.loss_for_batch(
                batch, feedback_prob=feedback, feedback_rng=rng
            )
            value = float(loss.total.data)
            if not np.isfinite(value):
                raise _diverged("training", epoch, batch_index, loss)
            loss.total.backward()
            optimizer.step()
            weighted += value * batch.size
            seen += batch.size
        train_loss = weighted / seen
        val_loss = validation_loss(system, val_feats, config.batch_size)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(
                f"non-finite validation loss at epoch {epoch}: {val_loss}"
            )
        history.append(EpochRecord(epoch, lr, train_loss, val_loss))
        if config.select_best and val_loss < best[0]:
            best = (val_loss, epoch, ckpt_io.collect_state(system))

    best_epoch = None
    if config.select_best and best[2] is not None:
        ckpt_io.restore_state(system, best[2])
        best_epoch = best[1]
    return TrainResult(
        system=system,
        config=config,
        history=history,
        mel_stats=stats,
        optimizer=optimizer,
        rng=rng,
        best_epoch=best_epoch,
    )


# --------------------------------------------------------------------- #
# persistence
# --------------------------------------------------------------------- #


def save_system(
    path: str,
    system: VariantSystem,
    optimizer: Optional[optim.Adam] = None,
    rng: Optional[np.random.Generator] = None,
    metadata: Optional[dict] = None,
) -> ckpt_io.Checkpoint:
    """Checkpoint a system (and optionally its optimizer and RNG) to disk."""
    arrays = ckpt_io.collect_state(system)
    if system.mel_stats is not None:
        arrays["melstats/mean"] = np.asarray(system.mel_stats.mean, dtype=np.float64)
        arrays["melstats/std"] = np.asarray(system.mel_stats.std, dtype=np.float64)
    meta = dict(metadata or {})
    meta["variant"] = system.variant.name
    if optimizer is not None:
        named = list(system.named_parameters())
        if len(named) != len(optimizer.params) or any(
            p is not q for (_, p), q in zip(named, optimizer.params)
        ):
            raise ValueError("optimizer does not cover the system's parameters")
        for (name, _), m, v in zip(named, optimizer.m, optimizer.v):
            arrays[f"optim/m/{name}"] = m.copy()
            arrays[f"optim/v/{name}"] = v.copy()
        meta["optimizer"] = {"step": optimizer.step_count, "lr": optimizer.lr}
    ckpt = ckpt_io.Checkpoint(
        config_text=system.train_config.to_text(),
        arrays=arrays,
        rng_state=ckpt_io.rng_state(rng) if rng is not None else None,
        metadata=meta,
    )
    ckpt_io.save_checkpoint(ckpt, path)
    return ckpt


def load_system(
    path: str,
    expected_config: Union[TrainConfig, str, None] = None,
) -> Tuple[VariantSystem, ckpt_io.Checkpoint]:
    """Rebuild a system from a checkpoint written by :func:`save_system`.

    ``expected_config`` (a config or its text) guards against loading a
    checkpoint trained under a different configuration.
    """
    expected_text = None
    if isinstance(expected_config, TrainConfig):
        expected_text = expected_config.to_text()
    elif isinstance(expected_config, str):
        expected_text = expected_config
    ckpt = ckpt_io.load_checkpoint(path, expected_config=expected_text)
    config = TrainConfig.from_text(ckpt.config_text)
    system = VariantSystem(
        get_variant(config.variant), config, np.random.default_rng(config.seed)
    )
    state = {
        name: arr
        for name, arr in ckpt.arrays.items()
        if name.startswith("param/") or name.startswith("buffer/")
    }
    ckpt_io.restore_state(system, state)
    if "melstats/mean" in ckpt.arrays and "melstats/std" in ckpt.arrays:
        system.mel_stats = dsp.MelStats(
            mean=ckpt.arrays["melstats/mean"], std=ckpt.arrays["melstats/std"]
        )
    return system, ckpt


def load_optimizer_state(
    system: VariantSystem, ckpt: ckpt_io.Checkpoint, optimizer: optim.Adam
) -> None:
    """Restore Adam moments saved by :func:`save_system` for resuming."""
    meta = ckpt.metadata.get("optimizer")
    if meta is None:
        raise ValueError("checkpoint holds no optimizer state")
    named = [name for name, _ in system.named_parameters()]
    state = {
        "step": int(meta["step"]),
        "lr": float(meta["lr"]),
        "m": [ckpt.arrays[f"optim/m/{name}"] for name in named],
        "v": [ckpt.arrays[f"optim/v/{name}"] for name in named],
    }
    optimizer.load_state_dict(state)


# --------------------------------------------------------------------- #
# synthesis to audio
# --------------------------------------------------------------------- #


def mel_to_waveform(
    mel_matrix: np.ndarray,
    stats: Optional[dsp.MelStats],
    sample_rate: int,
    iterations: int = 60,
) -> dsp.Waveform:
    """Invert a (frames, n_mels) normalized mel matrix to audio."""
    params = dsp.StftParams.for_rate(sample_rate)
    spec = dsp.MelSpectrogram(
        data=np.asarray(mel_matrix, dtype=np.float64),
        frame_shift=params.frame_shift / float(sample_rate),
        sample_rate=sample_rate,
        stats=stats,
    )
    return dsp.griffin_lim(spec, iterations=iterations)


@dataclass
class StorySentence:
    """One story sentence: phoneme IDs plus per-sentence conditioning."""

    phoneme_ids: np.ndarray
    labels: Optional[ContextLabels] = None
    reference_mel: Optional[np.ndarray] = None
    style_weights: Optional[np.ndarray] = None


def synthesize_story(
    system: VariantSystem,
    sentences: Sequence[StorySentence],
    pauses: Sequence[float],
    mel_stats: Optional[dsp.MelStats] = None,
    sample_rate: Optional[int] = None,
    gl_iterations: int = 60,
    max_steps: Optional[int] = None,
    force_prenet_dropout: Optional[bool] = None,
) -> dsp.Waveform:
    """Synthesize sentences, join them with silent pauses, set the level.

    One pause duration (seconds) is required per sentence boundary. Each
    sentence is decoded, inverted with Griffin-Lim, and the concatenated
    waveform is normalized to an active speech level of -26 dBov.
    """
    if not sentences:
        raise ValueError("story needs at least one sentence")
    if len(pauses) != len(sentences) - 1:
        raise ValueError(
            f"expected {len(sentences) - 1} pause durations for "
            f"{len(sentences)} sentences, got {len(pauses)}"
        )
    pauses = [float(p) for p in pauses]
    if any(p < 0 for p in pauses):
        raise ValueError("pause durations must be non-negative")
    stats = mel_stats if mel_stats is not None else system.mel_stats
    if stats is None:
        raise ValueError("no mel statistics available to invert the features")
    rate = sample_rate if sample_rate is not None else system.train_config.sample_rate

    pieces: List[np.ndarray] = []
    for i, sentence in enumerate(sentences):
        result = system.synthesize_utterance(
            sentence.phoneme_ids,
            labels=sentence.labels,
            reference_mel=sentence.reference_mel,
            style_weights=sentence.style_weights,
            max_steps=max_steps,
            force_prenet_dropout=force_prenet_dropout,
        )
        wav = mel_to_waveform(result.mel, stats, rate, iterations=gl_iterations)
        pieces.append(wav.samples)
        if i < len(pauses):
            pieces.append(np.zeros(int(round(pauses[i] * rate))))
    joined = dsp.Waveform(np.concatenate(pieces), rate)
    return dsp.level_normalize(joined, target_dbov=-26.0)
