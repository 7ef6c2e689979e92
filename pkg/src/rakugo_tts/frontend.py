"""Linguistic frontend: symbol inventory, context labels, transcripts, corpus records.

The inventory covers 44 symbols: 5 vowels, 35 consonants, the geminate
marker ``cl``, and the pause symbols ``pau`` (comma), ``sil`` (sentence
boundary), and ``qsil`` (question-mark boundary). Context labels describe
who is speaking and in what situation, with ``hanashika`` marking narration
that belongs to no character.
"""
from __future__ import annotations

import logging
import os
import wave
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from rakugo_tts import nn

logger = logging.getLogger(__name__)

VOWELS: Tuple[str, ...] = ("a", "e", "i", "o", "u")

CONSONANTS: Tuple[str, ...] = (
    "b", "by", "ch", "d", "dy", "f", "fy", "g", "gw", "gy",
    "h", "hy", "j", "k", "kw", "ky", "m", "my", "n", "N",
    "ng", "ny", "p", "py", "r", "ry", "s", "sh", "t", "ts",
    "ty", "v", "w", "y", "z",
)

GEMINATE = "cl"
PAUSES: Tuple[str, ...] = ("pau", "sil", "qsil")

# Symbols that each count as one mora: vowels, moraic nasal, geminate.
MORA_SYMBOLS = frozenset(VOWELS) | {"N", GEMINATE}

PARTITIONS: Tuple[str, ...] = ("train", "validation", "test")


class PhonemeInventory:
    """Fixed ordered symbol set with a dense, stable symbol-to-ID map."""

    def __init__(self) -> None:
        self.symbols: Tuple[str, ...] = VOWELS + CONSONANTS + (GEMINATE,) + PAUSES
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("inventory contains duplicate symbols")
        if len(self.symbols) != 44:
            raise ValueError(f"inventory must hold 44 symbols, got {len(self.symbols)}")
        self._ids: Dict[str, int] = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._ids

    def id_of(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise ValueError(f"unknown symbol {symbol!r}") from None

    def symbol_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.symbols):
            raise ValueError(f"symbol ID {idx} out of range 0..{len(self.symbols) - 1}")
        return self.symbols[idx]


CONTEXT_VOCABULARIES: Dict[str, Tuple[str, ...]] = {
    "gender": ("hanashika", "male", "female"),
    "age": ("hanashika", "child", "young", "middle_aged", "old"),
    "social_rank": (
        "hanashika", "samurai", "artisan", "merchant", "other_townsperson",
        "countryperson", "with_other_dialect", "modern", "other",
    ),
    "individuality": ("hanashika", "fool"),
    "condition": (
        "neutral", "admiring", "admonishing", "affected", "angry",
        "begging", "buttering_up", "cheerful", "complaining", "confident",
        "confused", "convinced", "crying", "depressed", "drinking",
        "drunk", "eating", "encouraging", "excited", "feeling_sick",
        "sleepy", "feeling_sorry", "finding_it_easier_than_expected", "freezing",
        "frustrated", "ghostly", "happy", "hesitating", "interested",
        "justifying", "kakegoe", "loud_voice", "laughing", "leaning_on_someone",
        "lecturing", "looking_down", "panicked", "pet_directed_speech",
        "playing_dumb", "putting_up_with", "rebellious", "refusing", "sad",
        "scared", "seducing", "shocked", "shouting", "sketchy", "small_voice",
        "soothing", "straining", "surprised", "suspicious", "swaggering",
        "teasing", "telling_off", "tired", "trying_to_remember",
        "underestimating", "unpleasant",
    ),
    "relationship": ("hanashika", "narrative", "soliloquy", "superior", "inferior"),
    "n_companion": ("hanashika", "narrative", "soliloquy", "one", "two_or_more"),
    "distance": ("hanashika", "narrative", "near", "middle", "far"),
    "part": ("makura", "main_part", "ochi"),
}

CONTEXT_FIELDS: Tuple[str, ...] = tuple(CONTEXT_VOCABULARIES)

# Character-attribute subset: fields that identify who is speaking.
ATTR_FIELDS: Tuple[str, ...] = ("gender", "age", "social_rank", "individuality")

# Per-field embedding widths for the full label set; they sum to 68.
ALL_EMBEDDING_DIMS: Dict[str, int] = {
    "gender": 4,
    "age": 8,
    "social_rank": 12,
    "individuality": 4,
    "condition": 24,
    "relationship": 4,
    "n_companion": 4,
    "distance": 4,
    "part": 4,
}

ATTR_EMBED_DIM = 4
ALL_EMBED_DIM = sum(ALL_EMBEDDING_DIMS.values())

EMBED_ATTR = "attr"
EMBED_ALL = "all"


@dataclass(frozen=True)
class ContextLabels:
    """One categorical value per context field, validated against the vocabularies."""

    gender: str = "hanashika"
    age: str = "hanashika"
    social_rank: str = "hanashika"
    individuality: str = "hanashika"
    condition: str = "neutral"
    relationship: str = "hanashika"
    n_companion: str = "hanashika"
    distance: str = "hanashika"
    part: str = "main_part"

    def __post_init__(self) -> None:
        for name in CONTEXT_FIELDS:
            value = getattr(self, name)
            vocab = CONTEXT_VOCABULARIES[name]
            if value not in vocab:
                raise ValueError(
                    f"invalid value {value!r} for context field {name!r}"
                )

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "ContextLabels":
        unknown = set(mapping) - set(CONTEXT_FIELDS)
        if unknown:
            raise ValueError(f"unknown context fields: {sorted(unknown)}")
        return cls(**dict(mapping))

    def to_mapping(self) -> Dict[str, str]:
        return {name: getattr(self, name) for name in CONTEXT_FIELDS}

    def indices(self, fields: Sequence[str] = CONTEXT_FIELDS) -> Tuple[int, ...]:
        return tuple(
            CONTEXT_VOCABULARIES[name].index(getattr(self, name)) for name in fields
        )


def tokenize_transcript(text: str, inventory: PhonemeInventory) -> np.ndarray:
    """Convert a whitespace-separated symbol string to a phoneme-ID sequence.

    Punctuation is expected to be pre-rendered as pause symbols (``pau`` for
    commas, ``sil``/``qsil`` for sentence ends), so tokenization is a pure
    order-preserving lookup.
    """
    ids = []
    for position, token in enumerate(text.split()):
        if token not in inventory:
            raise ValueError(f"unknown symbol {token!r} at position {position}")
        ids.append(inventory.id_of(token))
    return np.asarray(ids, dtype=np.int64)


def mora_count(symbols: Iterable[str]) -> int:
    """Count morae in a symbol sequence: vowels, N, and cl each count one."""
    return sum(1 for s in symbols if s in MORA_SYMBOLS)


@dataclass
class Utterance:
    """One corpus sentence: symbol IDs plus context and optional audio metadata."""

    utt_id: str
    phoneme_ids: np.ndarray
    labels: ContextLabels
    audio_path: Optional[str] = None
    duration: Optional[float] = None

    def validate(self, inventory: PhonemeInventory) -> None:
        ids = np.asarray(self.phoneme_ids)
        if ids.ndim != 1 or ids.size < 3:
            raise ValueError(
                f"utterance {self.utt_id!r} needs at least 3 symbols, got {ids.size}"
            )
        first = inventory.symbol_of(int(ids[0]))
        last = inventory.symbol_of(int(ids[-1]))
        if first != "sil":
            raise ValueError(f"utterance {self.utt_id!r} must begin with sil, got {first!r}")
        if last not in ("sil", "qsil"):
            raise ValueError(
                f"utterance {self.utt_id!r} must end with sil or qsil, got {last!r}"
            )

    def symbols(self, inventory: PhonemeInventory) -> List[str]:
        return [inventory.symbol_of(int(i)) for i in self.phoneme_ids]


@dataclass
class CorpusManifest:
    """Utterance records plus a disjoint train/validation/test assignment."""

    utterances: List[Utterance] = field(default_factory=list)
    partition: Dict[str, str] = field(default_factory=dict)

    def validate(self, inventory: Optional[PhonemeInventory] = None) -> None:
        ids = [u.utt_id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate utterance IDs in manifest")
        missing = set(ids) - set(self.partition)
        if missing:
            raise ValueError(f"utterances without partition assignment: {sorted(missing)}")
        extra = set(self.partition) - set(ids)
        if extra:
            raise ValueError(f"partition entries without utterances: {sorted(extra)}")
        bad = {p for p in self.partition.values() if p not in PARTITIONS}
        if bad:
            raise ValueError(f"unknown partitions: {sorted(bad)}")
        if inventory is not None:
            for utt in self.utterances:
                utt.validate(inventory)
        for utt in self.utterances:
            if utt.audio_path is not None and not os.path.exists(utt.audio_path):
                raise ValueError(
                    f"audio file missing for utterance {utt.utt_id!r}: {utt.audio_path}"
                )

    def utterances_for(self, part: str) -> List[Utterance]:
        if part not in PARTITIONS:
            raise ValueError(f"unknown partition {part!r}")
        return [u for u in self.utterances if self.partition[u.utt_id] == part]

    def counts(self) -> Dict[str, int]:
        out = {p: 0 for p in PARTITIONS}
        for part in self.partition.values():
            out[part] += 1
        return out


def save_manifest(
    manifest: CorpusManifest,
    transcript_path: str,
    partition_path: str,
    inventory: PhonemeInventory,
) -> None:
    """Write transcript lines (``id|symbols|key=value ...``) and partition lines."""
    with open(transcript_path, "w", encoding="utf-8") as fh:
        for utt in manifest.utterances:
            symbols = " ".join(utt.symbols(inventory))
            labels = " ".join(
                f"{name}={getattr(utt.labels, name)}" for name in CONTEXT_FIELDS
            )
            fh.write(f"{utt.utt_id}|{symbols}|{labels}\n")
    with open(partition_path, "w", encoding="utf-8") as fh:
        for utt in manifest.utterances:
            fh.write(f"{utt.utt_id}|{manifest.partition[utt.utt_id]}\n")


def _wav_duration(path: str) -> float:
    with wave.open(path, "rb") as fh:
        return fh.getnframes() / float(fh.getframerate())


def load_manifest(
    transcript_path: str,
    partition_path: str,
    inventory: PhonemeInventory,
    audio_dir: Optional[str] = None,
) -> CorpusManifest:
    """Read a manifest written by :func:`save_manifest`.

    When ``audio_dir`` is given, each utterance whose ``<id>.wav`` exists there
    gets its audio path and header-derived duration attached.
    """
    utterances: List[Utterance] = []
    with open(transcript_path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != 3:
                raise ValueError(
                    f"{transcript_path}:{lineno}: expected 3 |-separated fields, got {len(parts)}"
                )
            utt_id, symbol_text, label_text = parts
            mapping = {}
            for item in label_text.split():
                if "=" not in item:
                    raise ValueError(
                        f"{transcript_path}:{lineno}: malformed label item {item!r}"
                    )
                key, value = item.split("=", 1)
                mapping[key] = value
            utt = Utterance(
                utt_id=utt_id,
                phoneme_ids=tokenize_transcript(symbol_text, inventory),
                labels=ContextLabels.from_mapping(mapping),
            )
            if audio_dir is not None:
                candidate = os.path.join(audio_dir, f"{utt_id}.wav")
                if os.path.exists(candidate):
                    utt.audio_path = candidate
                    utt.duration = _wav_duration(candidate)
            utterances.append(utt)

    partition: Dict[str, str] = {}
    with open(partition_path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != 2:
                raise ValueError(
                    f"{partition_path}:{lineno}: expected 'id|partition', got {line!r}"
                )
            partition[parts[0]] = parts[1]

    manifest = CorpusManifest(utterances=utterances, partition=partition)
    manifest.validate(inventory)
    return manifest


def filter_utterances(
    manifest: CorpusManifest,
    durations: Optional[Mapping[str, float]] = None,
) -> CorpusManifest:
    """Drop train/validation utterances shorter than 0.5 s or at least 20 s long.

    The test partition is never touched. Durations come from the supplied
    mapping, falling back to each utterance's own ``duration`` field.
    """
    kept: List[Utterance] = []
    partition: Dict[str, str] = {}
    for utt in manifest.utterances:
        part = manifest.partition[utt.utt_id]
        if part == "test":
            kept.append(utt)
            partition[utt.utt_id] = part
            continue
        duration = utt.duration
        if durations is not None and utt.utt_id in durations:
            duration = durations[utt.utt_id]
        if duration is None:
            raise ValueError(
                f"no duration available for {part} utterance {utt.utt_id!r}"
            )
        if duration < 0.5 or duration >= 20.0:
            logger.info(
                "filtered %s utterance %s (duration %.3f s)", part, utt.utt_id, duration
            )
            continue
        kept.append(utt)
        partition[utt.utt_id] = part
    return CorpusManifest(utterances=kept, partition=partition)


def _attr_tuple_count() -> int:
    count = 1
    for name in ATTR_FIELDS:
        count *= len(CONTEXT_VOCABULARIES[name])
    return count


def attr_tuple_index(labels: ContextLabels) -> int:
    """Mixed-radix index of the (gender, age, social_rank, individuality) tuple."""
    index = 0
    for name in ATTR_FIELDS:
        vocab = CONTEXT_VOCABULARIES[name]
        index = index * len(vocab) + vocab.index(getattr(labels, name))
    return index


class ContextEmbedding(nn.Module):
    """Learned context-label embedding.

    ``attr`` mode looks up one joint 4-dim table over the character-attribute
    tuple; ``all`` mode concatenates one learned table per field for a 68-dim
    vector. Both are deterministic given the model parameters.
    """

    def __init__(self, mode: str, seed: int = 0):
        super().__init__()
        if mode not in (EMBED_ATTR, EMBED_ALL):
            raise ValueError(f"unknown context-embedding mode {mode!r}")
        self.mode = mode
        rng = np.random.default_rng(seed)
        if mode == EMBED_ATTR:
            self.dim = ATTR_EMBED_DIM
            self.table = nn.Embedding(_attr_tuple_count(), ATTR_EMBED_DIM, rng=rng)
        else:
            self.dim = ALL_EMBED_DIM
            for name in CONTEXT_FIELDS:
                vocab = CONTEXT_VOCABULARIES[name]
                setattr(
                    self,
                    f"table_{name}",
                    nn.Embedding(len(vocab), ALL_EMBEDDING_DIMS[name], rng=rng),
                )

    def __call__(self, labels):
        from rakugo_tts import autodiff

        batch = [labels] if isinstance(labels, ContextLabels) else list(labels)
        if not batch:
            raise ValueError("context embedding needs at least one label set")
        if self.mode == EMBED_ATTR:
            ids = np.asarray([attr_tuple_index(lb) for lb in batch], dtype=np.int64)
            return self.table(ids)
        pieces = []
        for name in CONTEXT_FIELDS:
            vocab = CONTEXT_VOCABULARIES[name]
            ids = np.asarray(
                [vocab.index(getattr(lb, name)) for lb in batch], dtype=np.int64
            )
            pieces.append(getattr(self, f"table_{name}")(ids))
        return autodiff.concat(pieces, axis=-1)
