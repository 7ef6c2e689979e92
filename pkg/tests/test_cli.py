"""End-to-end tests for the command-line interface."""

import os

import numpy as np
import pytest

from rakugo_tts import cli, dsp, evalstats, gst, pipeline
from rakugo_tts.corpus import SCORE_SYSTEMS


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


MINI_CONFIG = (
    "variant = Taco\n"
    "batch_size = 8\n"
    "epochs = 2\n"
    "scale = 0.0625\n"
    "n_mels = 20\n"
    "seed = 0\n"
)


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    rc = run_cli("synth-corpus", "--out", out, "--seed", 3,
                 "--utterances", 8, "--listeners", 4, "--stories", 2)
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "mini.cfg"
    path.write_text(MINI_CONFIG)
    return path


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory, corpus_dir, config_path):
    out = tmp_path_factory.mktemp("train")
    rc = run_cli("train", "--corpus", corpus_dir, "--out", out,
                 "--config", config_path)
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def gst_train_dir(tmp_path_factory, corpus_dir, config_path):
    out = tmp_path_factory.mktemp("train_gst")
    rc = run_cli("train", "--corpus", corpus_dir, "--out", out,
                 "--config", config_path, "--variant", "Taco-GST-8",
                 "--epochs", 1)
    assert rc == 0
    return out


class TestSynthCorpus:
    def test_writes_corpus_files(self, corpus_dir):
        assert (corpus_dir / "transcripts.txt").exists()
        assert (corpus_dir / "partitions.txt").exists()
        assert (corpus_dir / "wavs" / "utt_0000.wav").exists()

    def test_writes_scores(self, corpus_dir):
        records = evalstats.load_score_csv(corpus_dir / "scores.csv")
        assert {r.system for r in records} == set(SCORE_SYSTEMS)
        assert len(records) == 4 * 2 * len(SCORE_SYSTEMS) * 4

    def test_no_scores_flag(self, tmp_path):
        rc = run_cli("synth-corpus", "--out", tmp_path / "c", "--seed", 1,
                     "--utterances", 4, "--no-scores")
        assert rc == 0
        assert not (tmp_path / "c" / "scores.csv").exists()

    def test_same_seed_is_byte_identical(self, tmp_path, corpus_dir):
        rc = run_cli("synth-corpus", "--out", tmp_path / "again", "--seed", 3,
                     "--utterances", 8, "--no-scores")
        assert rc == 0
        original = (corpus_dir / "transcripts.txt").read_bytes()
        assert (tmp_path / "again" / "transcripts.txt").read_bytes() == original


class TestTrain:
    def test_writes_checkpoint_and_history(self, train_dir):
        assert (train_dir / "Taco.ckpt").exists()
        history = (train_dir / "Taco-loss.csv").read_text().splitlines()
        assert history[0] == "epoch,learning_rate,train_loss,validation_loss"
        assert len(history) == 3

    def test_checkpoint_reloads(self, train_dir):
        system, ckpt = pipeline.load_system(train_dir / "Taco.ckpt")
        assert system.variant.name == "Taco"
        assert system.mel_stats is not None
        assert ckpt.metadata["epochs_trained"] == 2

    def test_variant_flag_overrides_config(self, gst_train_dir):
        assert (gst_train_dir / "Taco-GST-8.ckpt").exists()
        system, _ = pipeline.load_system(gst_train_dir / "Taco-GST-8.ckpt")
        assert system.style is not None

    def test_unknown_variant_fails(self, corpus_dir, tmp_path, capsys):
        rc = run_cli("train", "--corpus", corpus_dir, "--out", tmp_path,
                     "--variant", "Tacotron-99")
        assert rc == 1
        assert "unknown variant" in capsys.readouterr().err

    def test_missing_corpus_fails(self, tmp_path, capsys):
        rc = run_cli("train", "--corpus", tmp_path / "nowhere",
                     "--out", tmp_path / "out")
        assert rc == 1
        assert "transcripts.txt" in capsys.readouterr().err

    def test_bad_config_file_fails(self, corpus_dir, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs = 2\nwarp_factor = 9\n")
        rc = run_cli("train", "--corpus", corpus_dir, "--out", tmp_path,
                     "--config", cfg)
        assert rc == 1
        assert "warp_factor" in capsys.readouterr().err


class TestSynthesize:
    def test_writes_test_partition_wavs(self, train_dir, corpus_dir, tmp_path):
        out = tmp_path / "wavs"
        rc = run_cli("synthesize", "--checkpoint", train_dir / "Taco.ckpt",
                     "--input", corpus_dir, "--out", out,
                     "--gl-iterations", 4, "--max-steps", 40,
                     "--deterministic")
        assert rc == 0
        written = sorted(os.listdir(out))
        assert written and all(name.endswith(".wav") for name in written)
        wav = dsp.read_wav(out / written[0])
        assert wav.sample_rate == 16000
        assert wav.samples.size > 0

    def test_utterance_subset(self, train_dir, corpus_dir, tmp_path):
        out = tmp_path / "one"
        rc = run_cli("synthesize", "--checkpoint", train_dir / "Taco.ckpt",
                     "--input", corpus_dir, "--out", out,
                     "--utterances", "utt_0002",
                     "--gl-iterations", 4, "--max-steps", 40,
                     "--deterministic")
        assert rc == 0
        assert os.listdir(out) == ["utt_0002.wav"]

    def test_unknown_utterance_fails(self, train_dir, corpus_dir, tmp_path, capsys):
        rc = run_cli("synthesize", "--checkpoint", train_dir / "Taco.ckpt",
                     "--input", corpus_dir, "--out", tmp_path / "x",
                     "--utterances", "utt_9999")
        assert rc == 1
        assert "utt_9999" in capsys.readouterr().err

    def test_weights_rejected_without_style_layer(self, train_dir, corpus_dir,
                                                  tmp_path, capsys):
        rc = run_cli("synthesize", "--checkpoint", train_dir / "Taco.ckpt",
                     "--input", corpus_dir, "--out", tmp_path / "x",
                     "--gst-weights", tmp_path / "w.txt")
        assert rc == 1
        assert "style token weights" in capsys.readouterr().err

    def test_style_variant_uses_reference_audio(self, gst_train_dir, corpus_dir,
                                                tmp_path):
        out = tmp_path / "styled"
        rc = run_cli("synthesize",
                     "--checkpoint", gst_train_dir / "Taco-GST-8.ckpt",
                     "--input", corpus_dir, "--out", out,
                     "--utterances", "utt_0001",
                     "--gl-iterations", 4, "--max-steps", 40,
                     "--deterministic")
        assert rc == 0
        assert (out / "utt_0001.wav").exists()

    def test_style_variant_accepts_weight_file(self, gst_train_dir, corpus_dir,
                                               tmp_path):
        weights = np.zeros((8, 10))
        weights[:, 3] = 1.0
        gst.save_token_weights(tmp_path / "w.txt", weights)
        out = tmp_path / "weighted"
        rc = run_cli("synthesize",
                     "--checkpoint", gst_train_dir / "Taco-GST-8.ckpt",
                     "--input", corpus_dir, "--out", out,
                     "--utterances", "utt_0001",
                     "--gst-weights", tmp_path / "w.txt",
                     "--gl-iterations", 4, "--max-steps", 40,
                     "--deterministic")
        assert rc == 0
        assert (out / "utt_0001.wav").exists()


SCRIPT = """\
# two-line story
line_01|sil k a pau t o sil|gender=male age=middle_aged social_rank=merchant \
individuality=hanashika condition=neutral relationship=inferior \
n_companion=one distance=middle part=main_part
line_02|sil m e d a qsil|gender=female age=young social_rank=samurai \
individuality=hanashika condition=happy relationship=superior \
n_companion=two_or_more distance=far part=ochi
"""


class TestStory:
    @pytest.fixture()
    def script_path(self, tmp_path):
        path = tmp_path / "story.txt"
        path.write_text(SCRIPT)
        return path

    @pytest.fixture()
    def pause_path(self, tmp_path):
        path = tmp_path / "pauses.txt"
        path.write_text("# one boundary\n0.30\n")
        return path

    def test_story_roundtrip(self, train_dir, script_path, pause_path, tmp_path):
        out = tmp_path / "story.wav"
        rc = run_cli("story", "--checkpoint", train_dir / "Taco.ckpt",
                     "--input", script_path, "--pauses", pause_path,
                     "--out", out, "--gl-iterations", 4, "--max-steps", 40,
                     "--deterministic")
        assert rc == 0
        wav = dsp.read_wav(out)
        assert wav.duration > 0.3
        # peak-protected write: never clipped, never louder than the target
        assert np.abs(wav.samples).max() <= 1.0
        level = dsp.active_level_dbov(wav.samples, wav.sample_rate)
        assert level <= -26.0 + 0.2

    def test_pause_count_mismatch_fails(self, train_dir, script_path,
                                        tmp_path, capsys):
        pauses = tmp_path / "p.txt"
        pauses.write_text("0.1\n0.2\n0.3\n")
        rc = run_cli("story", "--checkpoint", train_dir / "Taco.ckpt",
                     "--input", script_path, "--pauses", pauses,
                     "--out", tmp_path / "s.wav")
        assert rc == 1
        assert "pause durations" in capsys.readouterr().err

    def test_malformed_pause_fails(self, train_dir, script_path, tmp_path, capsys):
        pauses = tmp_path / "p.txt"
        pauses.write_text("0.1 seconds\n")
        rc = run_cli("story", "--checkpoint", train_dir / "Taco.ckpt",
                     "--input", script_path, "--pauses", pauses,
                     "--out", tmp_path / "s.wav")
        assert rc == 1
        assert "pause duration" in capsys.readouterr().err

    def test_malformed_script_fails(self, train_dir, pause_path, tmp_path, capsys):
        script = tmp_path / "bad.txt"
        script.write_text("line_01 sil k a sil\n")
        rc = run_cli("story", "--checkpoint", train_dir / "Taco.ckpt",
                     "--input", script, "--pauses", pause_path,
                     "--out", tmp_path / "s.wav")
        assert rc == 1
        assert "id|symbols|labels" in capsys.readouterr().err

    def test_empty_script_fails(self, train_dir, pause_path, tmp_path, capsys):
        script = tmp_path / "empty.txt"
        script.write_text("# nothing here\n\n")
        rc = run_cli("story", "--checkpoint", train_dir / "Taco.ckpt",
                     "--input", script, "--pauses", pause_path,
                     "--out", tmp_path / "s.wav")
        assert rc == 1
        assert "no sentences" in capsys.readouterr().err

    def test_style_story_requires_weights(self, gst_train_dir, script_path,
                                          pause_path, tmp_path, capsys):
        rc = run_cli("story", "--checkpoint",
                     gst_train_dir / "Taco-GST-8.ckpt",
                     "--input", script_path, "--pauses", pause_path,
                     "--out", tmp_path / "s.wav", "--max-steps", 40)
        assert rc == 1
        assert "reference mel or token weights" in capsys.readouterr().err

    def test_style_story_with_weights(self, gst_train_dir, script_path,
                                      pause_path, tmp_path):
        weights = np.full((8, 10), 0.1)
        gst.save_token_weights(tmp_path / "w.txt", weights)
        out = tmp_path / "styled.wav"
        rc = run_cli("story", "--checkpoint",
                     gst_train_dir / "Taco-GST-8.ckpt",
                     "--input", script_path, "--pauses", pause_path,
                     "--out", out, "--gst-weights", tmp_path / "w.txt",
                     "--gl-iterations", 4, "--max-steps", 40,
                     "--deterministic")
        assert rc == 0
        assert out.exists()


class TestEvalStats:
    def test_writes_all_tables(self, corpus_dir, tmp_path):
        out = tmp_path / "stats"
        rc = run_cli("eval-stats", "--scores", corpus_dir / "scores.csv",
                     "--out", out)
        assert rc == 0
        pairs = len(SCORE_SYSTEMS) * (len(SCORE_SYSTEMS) - 1) // 2
        tests = (out / "tests.csv").read_text().splitlines()
        assert len(tests) == 1 + 4 * pairs
        means = (out / "means.csv").read_text().splitlines()
        assert len(means) == 1 + 4 * len(SCORE_SYSTEMS)
        normalized = evalstats.load_score_csv(out / "normalized.csv")
        assert len(normalized) == 4 * 2 * len(SCORE_SYSTEMS) * 4

    def test_question_subset(self, corpus_dir, tmp_path):
        out = tmp_path / "q4"
        rc = run_cli("eval-stats", "--scores", corpus_dir / "scores.csv",
                     "--out", out, "--questions", "Q4")
        assert rc == 0
        tests = (out / "tests.csv").read_text().splitlines()
        pairs = len(SCORE_SYSTEMS) * (len(SCORE_SYSTEMS) - 1) // 2
        assert len(tests) == 1 + pairs
        assert all(row.startswith("Q4,") for row in tests[1:])

    def test_system_subset_keeps_reference(self, corpus_dir, tmp_path):
        out = tmp_path / "subset"
        rc = run_cli("eval-stats", "--scores", corpus_dir / "scores.csv",
                     "--out", out, "--systems", "Taco,SA-Taco",
                     "--questions", "Q1")
        assert rc == 0
        tests = (out / "tests.csv").read_text().splitlines()
        assert len(tests) == 1 + 3  # AbS is kept as the anchor

    def test_custom_family_size_changes_correction(self, corpus_dir, tmp_path):
        small = tmp_path / "small"
        big = tmp_path / "big"
        for out, m in ((small, 100), (big, 10000)):
            rc = run_cli("eval-stats", "--scores", corpus_dir / "scores.csv",
                         "--out", out, "--questions", "Q1", "--m", m)
            assert rc == 0
        rows_small = (small / "tests.csv").read_text().splitlines()[1:]
        rows_big = (big / "tests.csv").read_text().splitlines()[1:]
        corr_small = [float(r.split(",")[5]) for r in rows_small]
        corr_big = [float(r.split(",")[5]) for r in rows_big]
        assert all(s <= b for s, b in zip(corr_small, corr_big))
        assert any(s < b for s, b in zip(corr_small, corr_big))

    def test_family_size_below_pair_count_fails(self, corpus_dir, tmp_path, capsys):
        rc = run_cli("eval-stats", "--scores", corpus_dir / "scores.csv",
                     "--out", tmp_path, "--questions", "Q1", "--m", 5)
        assert rc == 1
        assert "smaller than the number of tests" in capsys.readouterr().err

    def test_unknown_question_fails(self, corpus_dir, tmp_path, capsys):
        rc = run_cli("eval-stats", "--scores", corpus_dir / "scores.csv",
                     "--out", tmp_path, "--questions", "Q9")
        assert rc == 1
        assert "Q9" in capsys.readouterr().err

    def test_unknown_system_fails(self, corpus_dir, tmp_path, capsys):
        rc = run_cli("eval-stats", "--scores", corpus_dir / "scores.csv",
                     "--out", tmp_path, "--systems", "VocoderX")
        assert rc == 1
        assert "VocoderX" in capsys.readouterr().err


class TestPlots:
    def test_emits_figures(self, corpus_dir, tmp_path, capsys):
        out = tmp_path / "figures"
        rc = run_cli("plots", "--scores", corpus_dir / "scores.csv",
                     "--out", out)
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines
        for line in lines:
            assert line.startswith("wrote ")
            assert os.path.exists(line[len("wrote "):])
        assert (out / "scores_Q4.svg").exists()

    def test_missing_scores_fails(self, tmp_path, capsys):
        rc = run_cli("plots", "--scores", tmp_path / "none.csv",
                     "--out", tmp_path)
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestParser:
    def test_no_command_exits(self):
        with pytest.raises(SystemExit):
            cli.main([])

    def test_unknown_command_exits(self):
        with pytest.raises(SystemExit):
            cli.main(["transcode"])
