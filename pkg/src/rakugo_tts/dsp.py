"""Signal processing: spectrograms, Griffin-Lim, level normalization, f0, rate.

Two operating modes share one code path: 48 kHz audio uses 50 ms frames,
12.5 ms shift, and a 4096-point FFT; 16 kHz audio scales those to 800/200
samples and a 1024-point FFT. Mel analysis always produces 80 bands.
"""
from __future__ import annotations

import struct
import os
import wave
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from rakugo_tts.frontend import MORA_SYMBOLS

SUPPORTED_RATES = (16000, 48000)
N_MELS = 80
LOG_FLOOR = 1e-5

# Active-speech level estimation: frames within this many dB of the loud
# (95th percentile) frames count as active speech.
ACTIVE_RANGE_DB = 15.9


@dataclass
class Waveform:
    """Mono audio samples at a supported sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate not in SUPPORTED_RATES:
            raise ValueError(
                f"sample rate must be one of {SUPPORTED_RATES}, got {self.sample_rate}"
            )
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")

    @property
    def duration(self) -> float:
        return self.samples.size / float(self.sample_rate)


@dataclass(frozen=True)
class StftParams:
    """Frame length, frame shift, and FFT size in samples."""

    frame_length: int
    frame_shift: int
    fft_size: int

    @classmethod
    def for_rate(cls, sample_rate: int) -> "StftParams":
        if sample_rate == 48000:
            return cls(2400, 600, 4096)
        if sample_rate == 16000:
            return cls(800, 200, 1024)
        raise ValueError(f"unsupported sample rate {sample_rate}")


def frame_count(n_samples: int, frame_length: int, frame_shift: int) -> int:
    """Number of full analysis frames: 1 + floor((n - length) / shift)."""
    if n_samples < frame_length:
        raise ValueError(
            f"input of {n_samples} samples is shorter than one {frame_length}-sample frame"
        )
    return 1 + (n_samples - frame_length) // frame_shift


def frame_signal(samples: np.ndarray, frame_length: int, frame_shift: int) -> np.ndarray:
    """Slice a signal into overlapping frames of shape (frames, frame_length)."""
    samples = np.asarray(samples)
    n = frame_count(samples.size, frame_length, frame_shift)
    windows = np.lib.stride_tricks.sliding_window_view(samples, frame_length)
    return windows[:: frame_shift][:n]


def _hann(length: int) -> np.ndarray:
    # Periodic Hann, suited to overlap-add at shift = length / 4.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def stft(samples: np.ndarray, params: StftParams) -> np.ndarray:
    """Complex STFT of shape (frames, fft_size // 2 + 1); Hann window, no padding."""
    frames = frame_signal(samples, params.frame_length, params.frame_shift)
    return np.fft.rfft(frames * _hann(params.frame_length), n=params.fft_size, axis=1)


def istft(spectrum: np.ndarray, params: StftParams) -> np.ndarray:
    """Windowed overlap-add inverse of :func:`stft`.

    Frames are weighted by the analysis window and the sum is normalized by
    the accumulated squared window, so istft(stft(x)) reproduces the interior
    of x up to edge taper.
    """
    n_frames = spectrum.shape[0]
    window = _hann(params.frame_length)
    frames = np.fft.irfft(spectrum, n=params.fft_size, axis=1)[:, : params.frame_length]
    length = (n_frames - 1) * params.frame_shift + params.frame_length
    out = np.zeros(length)
    norm = np.zeros(length)
    for t in range(n_frames):
        start = t * params.frame_shift
        out[start : start + params.frame_length] += frames[t] * window
        norm[start : start + params.frame_length] += window * window
    return out / np.maximum(norm, 1e-12)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    sample_rate: int,
    fft_size: int,
    n_mels: int = N_MELS,
    fmin: float = 0.0,
    fmax: Optional[float] = None,
) -> np.ndarray:
    """Triangular mel filterbank of shape (n_mels, fft_size // 2 + 1)."""
    if fmax is None:
        fmax = sample_rate / 2.0
    n_bins = fft_size // 2 + 1
    bin_freqs = np.arange(n_bins) * sample_rate / float(fft_size)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    weights = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        weights[m] = np.clip(np.minimum(up, down), 0.0, None)
    return weights


@dataclass
class MelStats:
    """Per-dimension mean and standard deviation over a corpus of log-mels."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_corpus(cls, mels: Iterable["MelSpectrogram"]) -> "MelStats":
        frames = np.concatenate([np.asarray(m.data) for m in mels], axis=0)
        if frames.size == 0:
            raise ValueError("cannot compute statistics over an empty corpus")
        mean = frames.mean(axis=0)
        std = frames.std(axis=0)
        return cls(mean=mean, std=np.maximum(std, 1e-12))


@dataclass
class MelSpectrogram:
    """Log-mel matrix of shape (frames, 80) plus its timing metadata."""

    data: np.ndarray
    frame_shift: float
    sample_rate: int
    stats: Optional[MelStats] = None

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"mel data must be 2-D, got shape {self.data.shape}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


def mel_spectrogram(
    wav: Waveform,
    stats: Optional[MelStats] = None,
    n_mels: int = N_MELS,
) -> MelSpectrogram:
    """Log-mel spectrogram; normalized per dimension when ``stats`` is given."""
    params = StftParams.for_rate(wav.sample_rate)
    magnitude = np.abs(stft(wav.samples, params))
    fb = mel_filterbank(wav.sample_rate, params.fft_size, n_mels=n_mels)
    mel = np.log(np.maximum(magnitude @ fb.T, LOG_FLOOR))
    if stats is not None:
        mel = (mel - stats.mean) / stats.std
    return MelSpectrogram(
        data=mel,
        frame_shift=params.frame_shift / float(wav.sample_rate),
        sample_rate=wav.sample_rate,
        stats=stats,
    )


def denormalize(mel: MelSpectrogram) -> MelSpectrogram:
    """Undo per-dimension normalization, returning a raw log-mel spectrogram."""
    if mel.stats is None:
        return mel
    return MelSpectrogram(
        data=mel.data * mel.stats.std + mel.stats.mean,
        frame_shift=mel.frame_shift,
        sample_rate=mel.sample_rate,
        stats=None,
    )


def spectral_convergence(
    magnitude: np.ndarray, samples: np.ndarray, params: StftParams
) -> float:
    """Relative Frobenius error between a target magnitude and |STFT(samples)|."""
    target_norm = np.linalg.norm(magnitude)
    if target_norm == 0.0:
        return 0.0
    reproduced = np.abs(stft(samples, params))
    return float(np.linalg.norm(reproduced - magnitude) / target_norm)


def reconstruct_phase(
    magnitude: np.ndarray, params: StftParams, iterations: int
) -> Tuple[np.ndarray, List[float]]:
    """Estimate a waveform whose STFT magnitude approximates the target.

    Starts from zero phase and alternates STFT analysis with magnitude
    replacement. Returns the waveform and the spectral-convergence error
    measured after each synthesis pass.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    spectrum = magnitude.astype(np.complex128)
    samples = istft(spectrum, params)
    errors = [spectral_convergence(magnitude, samples, params)]
    for _ in range(iterations - 1):
        analyzed = stft(samples, params)
        phase = analyzed / np.maximum(np.abs(analyzed), 1e-12)
        samples = istft(magnitude * phase, params)
        errors.append(spectral_convergence(magnitude, samples, params))
    return samples, errors


def griffin_lim(mel: MelSpectrogram, iterations: int = 60) -> Waveform:
    """Invert a log-mel spectrogram to audio via pseudo-inverse plus phase recovery.

    Normalized input is denormalized with its attached statistics first. The
    output is scaled down to peak amplitude <= 1 when needed.
    """
    raw = denormalize(mel)
    params = StftParams.for_rate(raw.sample_rate)
    fb = mel_filterbank(raw.sample_rate, params.fft_size, n_mels=raw.data.shape[1])
    mel_magnitude = np.exp(raw.data)
    linear = np.clip(mel_magnitude @ np.linalg.pinv(fb).T, 0.0, None)
    samples, _ = reconstruct_phase(linear, params, iterations)
    peak = np.max(np.abs(samples)) if samples.size else 0.0
    if peak > 1.0:
        samples = samples / peak
    return Waveform(samples=samples, sample_rate=raw.sample_rate)


def active_level_dbov(samples: np.ndarray, sample_rate: int) -> float:
    """Active-speech level in dB relative to a full-scale square wave.

    Splits the signal into 10 ms frames and averages the mean-square energy
    of frames within ``ACTIVE_RANGE_DB`` of the 95th-percentile frame energy,
    approximating an active-level meter that ignores pauses.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0 or np.max(np.abs(samples)) == 0.0:
        raise ValueError("cannot measure the level of an all-silent signal")
    frame = max(1, int(round(0.01 * sample_rate)))
    n_frames = samples.size // frame
    if n_frames == 0:
        energies = np.array([np.mean(samples**2)])
    else:
        energies = (samples[: n_frames * frame].reshape(n_frames, frame) ** 2).mean(axis=1)
    energies = energies[energies > 0.0]
    if energies.size == 0:
        raise ValueError("cannot measure the level of an all-silent signal")
    reference = np.percentile(energies, 95.0)
    active = energies[energies >= reference * 10.0 ** (-ACTIVE_RANGE_DB / 10.0)]
    return float(10.0 * np.log10(active.mean()))


def level_normalize(wav: Waveform, target_dbov: float = -26.0) -> Waveform:
    """Scale audio so its active-speech level equals the target in dBov."""
    level = active_level_dbov(wav.samples, wav.sample_rate)
    gain = 10.0 ** ((target_dbov - level) / 20.0)
    return Waveform(samples=wav.samples * gain, sample_rate=wav.sample_rate)


@dataclass
class F0Track:
    """Per-frame fundamental frequency with a voicing decision every 5 ms."""

    f0: np.ndarray
    voiced: np.ndarray
    frame_shift: float = 0.005

    def voiced_values(self) -> np.ndarray:
        return self.f0[self.voiced]


def estimate_f0(
    wav: Waveform,
    fmin: float = 60.0,
    fmax: float = 500.0,
    frame_shift: float = 0.005,
    window: float = 0.04,
    threshold: float = 0.3,
) -> F0Track:
    """Normalized-autocorrelation pitch tracker.

    Each 40 ms window is scored over candidate lags for 60-500 Hz; a frame is
    voiced when its best normalized autocorrelation exceeds the periodicity
    threshold. Peak lags are refined by parabolic interpolation. Unvoiced
    frames carry NaN.
    """
    sr = wav.sample_rate
    hop = int(round(frame_shift * sr))
    length = int(round(window * sr))
    lag_lo = int(np.ceil(sr / fmax))
    lag_hi = int(np.floor(sr / fmin))
    if lag_hi + 1 >= length:
        raise ValueError("analysis window too short for the requested pitch floor")
    if wav.samples.size < length:
        return F0Track(f0=np.zeros(0), voiced=np.zeros(0, dtype=bool), frame_shift=frame_shift)

    frames = frame_signal(wav.samples, length, hop)
    n = frames.shape[0]
    f0 = np.full(n, np.nan)
    voiced = np.zeros(n, dtype=bool)
    for t in range(n):
        x = frames[t] - frames[t].mean()
        energy = float(np.dot(x, x))
        if energy < 1e-10:
            continue
        # r[lag] = sum x[i] x[i+lag] normalized by the energies of both segments
        corr = np.correlate(x, x, mode="full")[length - 1 :]
        csum = np.concatenate([[0.0], np.cumsum(x * x)])
        lags = np.arange(lag_lo, lag_hi + 1)
        head = csum[length - lags] - csum[0]
        tail = csum[length] - csum[lags]
        denom = np.sqrt(head * tail)
        valid = denom > 1e-12
        r = np.zeros(lags.size)
        r[valid] = corr[lags[valid]] / denom[valid]
        best = float(r.max())
        if best < threshold:
            continue
        # Prefer the shortest strong peak so harmonics do not halve the pitch.
        is_peak = np.ones(lags.size, dtype=bool)
        is_peak[1:] &= r[1:] >= r[:-1]
        is_peak[:-1] &= r[:-1] >= r[1:]
        strong = np.flatnonzero(is_peak & (r >= max(threshold, 0.85 * best)))
        idx = int(strong[0]) if strong.size else int(np.argmax(r))
        lag = float(lags[idx])
        if 0 < idx < lags.size - 1:
            r_lo, r_mid, r_hi = r[idx - 1], r[idx], r[idx + 1]
            curvature = r_lo - 2.0 * r_mid + r_hi
            if curvature < 0.0:
                delta = 0.5 * (r_lo - r_hi) / curvature
                lag += float(np.clip(delta, -0.5, 0.5))
        voiced[t] = True
        f0[t] = sr / lag
    return F0Track(f0=f0, voiced=voiced, frame_shift=frame_shift)


def f0_cov(tracks: Sequence[F0Track]) -> float:
    """Coefficient of variation of f0 pooled over the voiced frames of all tracks."""
    values = np.concatenate([t.voiced_values() for t in tracks]) if tracks else np.zeros(0)
    if values.size == 0:
        raise ValueError("no voiced frames to summarize")
    return float(values.std() / values.mean())


def speech_rate(symbols: Sequence[str], duration: float) -> float:
    """Morae per second: vowels, N, and cl each count one mora."""
    if duration <= 0.0:
        raise ValueError(f"duration must be positive, got {duration}")
    return sum(1 for s in symbols if s in MORA_SYMBOLS) / duration


def corpus_rate_cov(rates: Sequence[float]) -> float:
    """Coefficient of variation (std / mean) of per-sentence speech rates."""
    values = np.asarray(rates, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no rates to summarize")
    return float(values.std() / values.mean())


def write_wav(path: str, wav: Waveform) -> None:
    """Write mono 16-bit PCM."""
    scaled = np.clip(wav.samples, -1.0, 1.0)
    pcm = (scaled * 32767.0).round().astype("<i2")
    with wave.open(os.fspath(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path: str) -> Waveform:
    """Read mono 16-bit PCM into float samples in [-1, 1]."""
    with wave.open(os.fspath(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit samples, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples=samples, sample_rate=rate)


MEL_MAGIC = b"MELSPEC1"


def save_mel(path: str, mel: MelSpectrogram) -> None:
    """Serialize a mel spectrogram.

    Layout: 8-byte magic ``MELSPEC1``; little-endian uint32 frame count, mel
    count, and sample rate; little-endian float64 frame shift in seconds; then
    row-major float32 data. Normalization statistics are not stored.
    """
    data = mel.data.astype("<f4")
    header = MEL_MAGIC + struct.pack(
        "<IIId", data.shape[0], data.shape[1], mel.sample_rate, mel.frame_shift
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def load_mel(path: str) -> MelSpectrogram:
    """Read a mel spectrogram written by :func:`save_mel`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header_size = len(MEL_MAGIC) + struct.calcsize("<IIId")
    if len(blob) < header_size:
        raise ValueError(f"{path}: truncated mel file ({len(blob)} bytes)")
    if blob[: len(MEL_MAGIC)] != MEL_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:len(MEL_MAGIC)]!r}")
    n_frames, n_mels, sample_rate, frame_shift = struct.unpack(
        "<IIId", blob[len(MEL_MAGIC) : header_size]
    )
    expected = header_size + 4 * n_frames * n_mels
    if len(blob) != expected:
        raise ValueError(
            f"{path}: expected {expected} bytes for {n_frames}x{n_mels} frames, got {len(blob)}"
        )
    data = np.frombuffer(blob[header_size:], dtype="<f4").reshape(n_frames, n_mels)
    return MelSpectrogram(
        data=data.astype(np.float64),
        frame_shift=frame_shift,
        sample_rate=int(sample_rate),
    )
