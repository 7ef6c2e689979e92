"""Command-line interface.

Subcommands cover the full desk-scale workflow: generate the synthetic
corpus and listening-test scores, train a variant, synthesize utterances
or a pause-stitched story from a checkpoint, run the listening-test
statistics, and emit the evaluation plots.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from typing import List, Optional, Sequence, Tuple

import numpy as np

from rakugo_tts import checkpoint as ckpt_io
from rakugo_tts import corpus, dsp, evalstats, frontend, gst, pipeline, plots


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rakugo-tts",
        description="Sequence-to-sequence rakugo speech synthesis workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="generate the synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--utterances", type=int, default=32)
    p.add_argument("--listeners", type=int, default=12,
                   help="synthetic listeners for the score table")
    p.add_argument("--stories", type=int, default=3,
                   help="synthetic stories for the score table")
    p.add_argument("--no-scores", action="store_true",
                   help="skip writing the synthetic listening-test scores")

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", help="variant name (overrides the config)")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--epochs", type=int, help="override the epoch budget")
    p.add_argument("--seed", type=int, help="override the seed")
    p.add_argument("--batch-size", type=int, help="override the batch size")
    p.add_argument("--scale", type=float, help="override the width scale")
    p.add_argument("--n-mels", type=int, help="override the mel band count")

    p = sub.add_parser("synthesize", help="synthesize utterances from a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True,
                   help="corpus directory with transcripts and partitions")
    p.add_argument("--out", required=True, help="directory for WAV files")
    p.add_argument("--partition", default="test",
                   choices=("train", "validation", "test", "all"))
    p.add_argument("--utterances", help="comma-separated utterance IDs")
    p.add_argument("--gst-weights", help="style token weight file (heads x tokens)")
    p.add_argument("--gl-iterations", type=int, default=60)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--deterministic", action="store_true",
                   help="disable synthesis-time pre-net dropout")

    p = sub.add_parser("story", help="synthesize a story with reference pauses")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True,
                   help="transcript file: id|symbols|key=value labels per line")
    p.add_argument("--pauses", required=True,
                   help="text file with one pause duration (s) per boundary")
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--gst-weights", help="style token weight file (heads x tokens)")
    p.add_argument("--gl-iterations", type=int, default=60)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--deterministic", action="store_true",
                   help="disable synthesis-time pre-net dropout")

    p = sub.add_parser("eval-stats", help="normalize scores and run the tests")
    p.add_argument("--scores", required=True, help="score CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--questions", help="comma-separated subset, e.g. Q1,Q4")
    p.add_argument("--systems", help="comma-separated system subset")
    p.add_argument("--m", type=int,
                   help="Bonferroni family size (default: all pairs)")

    p = sub.add_parser("plots", help="emit evaluation plots from a score CSV")
    p.add_argument("--scores", required=True, help="score CSV")
    p.add_argument("--out", required=True, help="output directory")

    return parser


# ------------------------------------------------------------------ #
# shared helpers
# ------------------------------------------------------------------ #


def _load_corpus(corpus_dir: str) -> frontend.CorpusManifest:
    transcripts = os.path.join(corpus_dir, "transcripts.txt")
    partitions = os.path.join(corpus_dir, "partitions.txt")
    for path in (transcripts, partitions):
        if not os.path.exists(path):
            raise ValueError(f"corpus directory is missing {os.path.basename(path)}")
    return frontend.load_manifest(
        transcripts, partitions, frontend.PhonemeInventory(),
        audio_dir=os.path.join(corpus_dir, "wavs"),
    )


def _read_pauses(path: str) -> List[float]:
    pauses = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                pauses.append(float(line))
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: expected a pause duration in seconds, "
                    f"got {line!r}"
                )
    return pauses


def _read_script(path: str) -> List[Tuple[str, np.ndarray, frontend.ContextLabels]]:
    """Parse story lines of the transcript format: id|symbols|key=value ..."""
    inventory = frontend.PhonemeInventory()
    sentences = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("|")
            if len(parts) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 'id|symbols|labels', got {line!r}"
                )
            utt_id, symbols, label_text = parts
            mapping = {}
            for item in label_text.split():
                if "=" not in item:
                    raise ValueError(
                        f"{path}:{lineno}: malformed label item {item!r}"
                    )
                key, value = item.split("=", 1)
                mapping[key] = value
            sentences.append((
                utt_id,
                frontend.tokenize_transcript(symbols, inventory),
                frontend.ContextLabels.from_mapping(mapping),
            ))
    if not sentences:
        raise ValueError(f"{path}: no sentences found")
    return sentences


def _load_style_weights(path: Optional[str], system) -> Optional[np.ndarray]:
    if path is None:
        return None
    if system.style is None:
        raise ValueError(
            f"variant {system.variant.name!r} takes no style token weights"
        )
    layer = system.style.token_layer
    return gst.load_token_weights(
        path, n_heads=layer.n_heads, n_tokens=layer.n_tokens
    )


def _safe_for_pcm(wav: dsp.Waveform) -> dsp.Waveform:
    """Scale down if level normalization pushed peaks past full scale."""
    peak = float(np.max(np.abs(wav.samples))) if wav.samples.size else 0.0
    if peak <= 1.0:
        return wav
    return dsp.Waveform(wav.samples / peak, wav.sample_rate)


# ------------------------------------------------------------------ #
# subcommands
# ------------------------------------------------------------------ #


def _cmd_synth_corpus(args) -> int:
    manifest = corpus.generate_synthetic_corpus(
        args.out, seed=args.seed, n_utterances=args.utterances
    )
    counts = manifest.counts()
    print(f"wrote {len(manifest.utterances)} utterances to {args.out} "
          f"(train {counts['train']}, validation {counts['validation']}, "
          f"test {counts['test']})")
    if not args.no_scores:
        records = corpus.generate_synthetic_scores(
            seed=args.seed, n_listeners=args.listeners, n_stories=args.stories
        )
        scores_path = os.path.join(args.out, "scores.csv")
        corpus.save_score_csv(scores_path, records)
        print(f"wrote {len(records)} synthetic scores to {scores_path}")
    return 0


def _resolve_train_config(args) -> pipeline.TrainConfig:
    config = (
        pipeline.load_config(args.config)
        if args.config
        else pipeline.TrainConfig()
    )
    overrides = {}
    if args.variant is not None:
        overrides["variant"] = args.variant
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.scale is not None:
        overrides["scale"] = args.scale
    if args.n_mels is not None:
        overrides["n_mels"] = args.n_mels
    return dataclasses.replace(config, **overrides)


def _cmd_train(args) -> int:
    config = _resolve_train_config(args)
    manifest = frontend.filter_utterances(_load_corpus(args.corpus))
    os.makedirs(args.out, exist_ok=True)

    result = pipeline.train(manifest, config=config)
    variant = result.config.variant
    ckpt_path = os.path.join(args.out, f"{variant}.ckpt")
    pipeline.save_system(
        ckpt_path, result.system, optimizer=result.optimizer, rng=result.rng,
        metadata={"epochs_trained": len(result.history),
                  "best_epoch": result.best_epoch},
    )
    history_path = os.path.join(args.out, f"{variant}-loss.csv")
    pipeline.save_loss_history(history_path, result.history)
    last = result.history[-1]
    print(f"trained {variant} for {last.epoch} epochs: "
          f"train {last.train_loss:.4f}, validation {last.validation_loss:.4f}")
    print(f"wrote {ckpt_path}")
    print(f"wrote {history_path}")
    return 0


def _style_inputs_for(system, utt, weights):
    """Per-utterance style source: explicit weights, else the utterance's own
    audio as reference."""
    if system.style is None:
        return None, None
    if weights is not None:
        return None, weights
    if utt.audio_path is None:
        raise ValueError(
            f"utterance {utt.utt_id!r} has no audio to use as a style "
            f"reference; pass --gst-weights"
        )
    feats = pipeline.utterance_features(
        utt, system.mel_stats, system.train_config.n_mels
    )
    return feats.mel, None


def _cmd_synthesize(args) -> int:
    system, _ = pipeline.load_system(args.checkpoint)
    if system.mel_stats is None:
        raise ValueError("checkpoint carries no mel statistics")
    manifest = _load_corpus(args.input)
    if args.partition == "all":
        utterances = list(manifest.utterances)
    else:
        utterances = manifest.utterances_for(args.partition)
    if args.utterances:
        wanted = set(args.utterances.split(","))
        by_id = {u.utt_id: u for u in manifest.utterances}
        missing = sorted(wanted - set(by_id))
        if missing:
            raise ValueError(f"unknown utterance IDs: {', '.join(missing)}")
        utterances = [by_id[i] for i in sorted(wanted)]
    if not utterances:
        raise ValueError("no utterances selected")
    weights = _load_style_weights(args.gst_weights, system)
    force = False if args.deterministic else None

    os.makedirs(args.out, exist_ok=True)
    rate = system.train_config.sample_rate
    for utt in utterances:
        reference, w = _style_inputs_for(system, utt, weights)
        result = system.synthesize_utterance(
            utt.phoneme_ids,
            labels=utt.labels,
            reference_mel=reference,
            style_weights=w,
            max_steps=args.max_steps,
            force_prenet_dropout=force,
        )
        wav = pipeline.mel_to_waveform(
            result.mel, system.mel_stats, rate, iterations=args.gl_iterations
        )
        wav = _safe_for_pcm(dsp.level_normalize(wav))
        path = os.path.join(args.out, f"{utt.utt_id}.wav")
        dsp.write_wav(path, wav)
        note = " (step budget hit)" if result.truncated else ""
        print(f"wrote {path}: {result.n_frames} frames, "
              f"{wav.duration:.2f} s{note}")
    return 0


def _cmd_story(args) -> int:
    system, _ = pipeline.load_system(args.checkpoint)
    script = _read_script(args.input)
    pauses = _read_pauses(args.pauses)
    weights = _load_style_weights(args.gst_weights, system)
    sentences = [
        pipeline.StorySentence(ids, labels=labels, style_weights=weights)
        for _, ids, labels in script
    ]
    force = False if args.deterministic else None
    wav = _safe_for_pcm(pipeline.synthesize_story(
        system, sentences, pauses,
        gl_iterations=args.gl_iterations, max_steps=args.max_steps,
        force_prenet_dropout=force,
    ))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    dsp.write_wav(args.out, wav)
    level = dsp.active_level_dbov(wav.samples, wav.sample_rate)
    print(f"wrote {args.out}: {len(script)} sentences, "
          f"{wav.duration:.2f} s, {level:.1f} dBov")
    return 0


def _split_option(value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    items = [v.strip() for v in value.split(",") if v.strip()]
    return items or None


def _cmd_eval_stats(args) -> int:
    records = evalstats.load_score_csv(args.scores)
    systems = _split_option(args.systems)
    if systems is not None:
        keep = set(systems) | {evalstats.ABS_SYSTEM}
        known = {r.system for r in records}
        unknown = sorted(set(systems) - known)
        if unknown:
            raise ValueError(f"unknown systems: {', '.join(unknown)}")
        records = [r for r in records if r.system in keep]
    normalized = evalstats.normalize_scores(records)

    questions = _split_option(args.questions)
    present = sorted({r.question for r in normalized})
    if questions is None:
        questions = present
    else:
        unknown = sorted(set(questions) - set(present))
        if unknown:
            raise ValueError(f"unknown questions: {', '.join(unknown)}")

    os.makedirs(args.out, exist_ok=True)
    normalized_path = os.path.join(args.out, "normalized.csv")
    with open(normalized_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(corpus.SCORE_HEADER)
        for r in normalized:
            writer.writerow([r.listener, r.story, r.system, r.question,
                             repr(r.score)])

    tests_path = os.path.join(args.out, "tests.csv")
    n_tests = 0
    with open(tests_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["question", "system_a", "system_b", "statistic", "p_value",
             "corrected_p"]
            + [f"significant_{a}" for a in evalstats.SIGNIFICANCE_LEVELS]
        )
        for question in questions:
            for t in evalstats.pairwise_tests(normalized, question, m=args.m):
                writer.writerow(
                    [t.question, t.system_a, t.system_b, repr(t.statistic),
                     repr(t.p_value), repr(t.corrected_p)]
                    + [int(t.significant[a]) for a in evalstats.SIGNIFICANCE_LEVELS]
                )
                n_tests += 1

    means_path = os.path.join(args.out, "means.csv")
    with open(means_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["question", "system", "mean_score"])
        for question in questions:
            means = evalstats.mean_scores_by_system(normalized, question)
            for system in sorted(means):
                writer.writerow([question, system, repr(means[system])])

    print(f"wrote {normalized_path} ({len(normalized)} records)")
    print(f"wrote {tests_path} ({n_tests} tests over {len(questions)} questions)")
    print(f"wrote {means_path}")
    return 0


def _cmd_plots(args) -> int:
    records = evalstats.load_score_csv(args.scores)
    normalized = evalstats.normalize_scores(records)
    written = plots.emit_plots(normalized, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "synth-corpus": _cmd_synth_corpus,
    "train": _cmd_train,
    "synthesize": _cmd_synthesize,
    "story": _cmd_story,
    "eval-stats": _cmd_eval_stats,
    "plots": _cmd_plots,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, pipeline.TrainingDiverged,
            ckpt_io.CorruptCheckpoint, ckpt_io.FingerprintMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
