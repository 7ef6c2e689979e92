"""Deterministic synthetic corpus: audio, transcripts, and a listener score table.

Stands in for a private storytelling-speech database. Audio is built from
per-phoneme two-harmonic tones with a fixed rule: character attributes set
the pitch register, the condition label sets the level, and the story part
sets the speaking rate. The same sentence pool is reused across speakers so
a conditioned model can learn what an unconditioned one cannot resolve.
"""
from __future__ import annotations

import csv
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from rakugo_tts import dsp
from rakugo_tts.frontend import (
    ContextLabels,
    CorpusManifest,
    PhonemeInventory,
    PAUSES,
    Utterance,
    save_manifest,
    tokenize_transcript,
)

PHONE_SECONDS = 0.06

# Character-attribute tuples and the pitch register (Hz) each one speaks at.
SPEAKERS: Tuple[Tuple[ContextLabels, float], ...] = (
    (ContextLabels(), 160.0),
    (ContextLabels(gender="male", age="old", social_rank="merchant"), 110.0),
    (ContextLabels(gender="female", age="young", social_rank="artisan"), 220.0),
    (
        ContextLabels(gender="male", age="child", social_rank="other", individuality="fool"),
        280.0,
    ),
)

# Condition label -> waveform amplitude.
CONDITION_LEVELS: Dict[str, float] = {
    "neutral": 0.40,
    "happy": 0.45,
    "angry": 0.55,
    "loud_voice": 0.70,
    "shouting": 0.85,
    "small_voice": 0.10,
}

# Story part -> per-phoneme duration multiplier.
PART_RATES: Dict[str, float] = {"makura": 1.0, "main_part": 0.9, "ochi": 1.1}

VOWEL_MULTIPLIERS: Dict[str, float] = {"a": 1.0, "e": 1.12, "i": 1.25, "o": 0.9, "u": 0.8}

_SITUATIONS: Tuple[Tuple[str, str, str], ...] = (
    ("hanashika", "hanashika", "hanashika"),
    ("narrative", "narrative", "narrative"),
    ("superior", "one", "near"),
    ("inferior", "one", "middle"),
    ("soliloquy", "soliloquy", "narrative"),
    ("superior", "two_or_more", "far"),
)


def _phone_wave(
    symbol: str,
    register: float,
    level: float,
    n_samples: int,
    sample_rate: int,
    inventory: PhonemeInventory,
) -> np.ndarray:
    if symbol in PAUSES or symbol == "cl":
        return np.zeros(n_samples)
    t = np.arange(n_samples) / sample_rate
    if symbol in VOWEL_MULTIPLIERS:
        freq = register * VOWEL_MULTIPLIERS[symbol]
        amplitude = level
    else:
        # consonants get a stable symbol-specific timbre at reduced level
        idx = inventory.id_of(symbol)
        freq = register * (0.75 + 0.5 * idx / (len(inventory) - 1))
        amplitude = 0.6 * level
    wave = amplitude * (np.sin(2 * np.pi * freq * t) + 0.5 * np.sin(4 * np.pi * freq * t))
    fade = min(n_samples // 8, int(0.005 * sample_rate))
    if fade > 0:
        ramp = np.linspace(0.0, 1.0, fade)
        wave[:fade] *= ramp
        wave[-fade:] *= ramp[::-1]
    return wave


def synthesize_utterance_audio(
    symbols: Sequence[str],
    labels: ContextLabels,
    register: float,
    sample_rate: int,
    inventory: PhonemeInventory,
) -> dsp.Waveform:
    """Render one utterance with the fixed label-driven rule."""
    level = CONDITION_LEVELS.get(labels.condition, 0.4)
    rate = PART_RATES.get(labels.part, 1.0)
    n_phone = int(round(PHONE_SECONDS * rate * sample_rate))
    pieces = [
        _phone_wave(s, register, level, n_phone, sample_rate, inventory) for s in symbols
    ]
    return dsp.Waveform(np.concatenate(pieces), sample_rate)


def _make_sentences(rng: np.random.Generator, count: int, phones_range: Tuple[int, int]) -> List[str]:
    consonants = ["k", "s", "t", "n", "h", "m", "r", "w", "g", "d", "b", "ch", "sh"]
    vowels = list(VOWEL_MULTIPLIERS)
    sentences = []
    for i in range(count):
        n_content = int(rng.integers(phones_range[0], phones_range[1] + 1))
        symbols = ["sil"]
        while len(symbols) < n_content + 1:
            symbols.append(str(rng.choice(consonants)))
            symbols.append(str(rng.choice(vowels)))
            if rng.random() < 0.08 and len(symbols) < n_content:
                symbols.append("pau")
        # question sentences roughly 3:7 against plain ones
        symbols.append("qsil" if rng.random() < 0.3 else "sil")
        sentences.append(" ".join(symbols))
    return sentences


def generate_synthetic_corpus(
    out_dir: str,
    seed: int = 0,
    n_utterances: int = 32,
    phones_range: Tuple[int, int] = (8, 14),
    sample_rate: int = 16000,
) -> CorpusManifest:
    """Generate audio, transcripts, and partition files under ``out_dir``.

    The same seed always produces byte-identical files. Each sentence from a
    shared pool is spoken by several characters, so pitch register is only
    predictable from the context labels, never from the text alone.
    """
    if n_utterances < 3:
        raise ValueError("need at least 3 utterances so every partition is non-empty")
    rng = np.random.default_rng(seed)
    inventory = PhonemeInventory()
    wav_dir = os.path.join(out_dir, "wavs")
    os.makedirs(wav_dir, exist_ok=True)

    n_sentences = max(3, (n_utterances + len(SPEAKERS) - 1) // len(SPEAKERS))
    sentences = _make_sentences(rng, n_sentences, phones_range)
    conditions = list(CONDITION_LEVELS)
    parts = list(PART_RATES)

    utterances: List[Utterance] = []
    for i in range(n_utterances):
        sentence = sentences[i % n_sentences]
        speaker_labels, register = SPEAKERS[(i // n_sentences) % len(SPEAKERS)]
        relationship, n_companion, distance = _SITUATIONS[int(rng.integers(len(_SITUATIONS)))]
        labels = ContextLabels(
            gender=speaker_labels.gender,
            age=speaker_labels.age,
            social_rank=speaker_labels.social_rank,
            individuality=speaker_labels.individuality,
            condition=str(rng.choice(conditions)),
            relationship=relationship,
            n_companion=n_companion,
            distance=distance,
            part=parts[i % len(parts)],
        )
        symbols = sentence.split()
        wav = synthesize_utterance_audio(symbols, labels, register, sample_rate, inventory)
        utt_id = f"utt_{i:04d}"
        path = os.path.join(wav_dir, f"{utt_id}.wav")
        dsp.write_wav(path, wav)
        utterances.append(
            Utterance(
                utt_id=utt_id,
                phoneme_ids=tokenize_transcript(sentence, inventory),
                labels=labels,
                audio_path=path,
                duration=wav.duration,
            )
        )

    order = rng.permutation(n_utterances)
    n_test = max(1, int(round(0.15 * n_utterances)))
    n_val = max(1, int(round(0.15 * n_utterances)))
    partition: Dict[str, str] = {}
    for rank, idx in enumerate(order):
        if rank < n_test:
            part = "test"
        elif rank < n_test + n_val:
            part = "validation"
        else:
            part = "train"
        partition[utterances[idx].utt_id] = part

    manifest = CorpusManifest(utterances=utterances, partition=partition)
    manifest.validate(inventory)
    save_manifest(
        manifest,
        os.path.join(out_dir, "transcripts.txt"),
        os.path.join(out_dir, "partitions.txt"),
        inventory,
    )
    return manifest


QUESTIONS = ("Q1", "Q2", "Q3", "Q4")

ABS_SYSTEM = "AbS"

# Latent quality per system on the normalized scale; AbS anchors the top.
_SYSTEM_QUALITY: Dict[str, float] = {
    "AbS": 1.6,
    "Taco": 0.1,
    "Taco-GST-8": 0.35,
    "Taco-ATTR": 0.25,
    "Taco-ALL": 0.15,
    "Taco-GST-8-ATTR": 0.45,
    "Taco-GST-8-ALL": 0.3,
    "SA-Taco": 0.0,
    "SA-Taco-GST-8": 0.3,
    "SA-Taco-ATTR": 0.2,
    "SA-Taco-ALL": 0.1,
    "SA-Taco-GST-8-ATTR": 0.4,
    "SA-Taco-GST-8-ALL": 0.25,
}

SCORE_SYSTEMS = tuple(_SYSTEM_QUALITY)

SCORE_HEADER = ("listener", "story", "system", "question", "score")


def generate_synthetic_scores(
    seed: int = 0,
    n_listeners: int = 12,
    n_stories: int = 3,
    systems: Sequence[str] = SCORE_SYSTEMS,
) -> List[Tuple[str, str, str, str, int]]:
    """Deterministic stand-in for a listening test.

    Each listener has a bias and a scale; each system a latent quality with
    per-question offsets; seeded noise fills in the rest. Scores land on the
    1-5 integer scale with one record per (listener, story, system, question).
    """
    rng = np.random.default_rng(seed)
    listener_bias = rng.normal(0.0, 0.4, n_listeners)
    listener_scale = rng.uniform(0.7, 1.3, n_listeners)
    question_offset = {"Q1": 0.0, "Q2": -0.2, "Q3": 0.1, "Q4": -0.1}
    story_offset = rng.normal(0.0, 0.2, n_stories)
    records: List[Tuple[str, str, str, str, int]] = []
    for li in range(n_listeners):
        listener = f"L{li:02d}"
        for si in range(n_stories):
            story = f"story{si}"
            for system in systems:
                quality = _SYSTEM_QUALITY.get(system, 0.0)
                for question in QUESTIONS:
                    latent = (
                        3.0
                        + listener_bias[li]
                        + listener_scale[li]
                        * (quality + question_offset[question] + story_offset[si])
                        + rng.normal(0.0, 0.5)
                    )
                    score = int(np.clip(np.rint(latent), 1, 5))
                    records.append((listener, story, system, question, score))
    return records


def save_score_csv(path: str, records: Sequence[Tuple[str, str, str, str, int]]) -> None:
    """Write a listener score table with the standard header."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_HEADER)
        writer.writerows(records)
