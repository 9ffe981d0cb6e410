"""Waveform I/O, log-mel features and band-limited resampling."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from osdkit import _backend

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms at 16 kHz
HOP_LENGTH = 160  # 10 ms at 16 kHz
N_FFT = 512
N_MELS = 128
PRE_EMPHASIS = 0.97
LOG_FLOOR = 1e-10
PCM_SCALE = 32767.0

# resampler design
SINC_ZEROS = 32  # zero crossings per side -> 64 taps per phase
SINC_RESOLUTION = 512
SINC_ROLLOFF = 0.9
KAISER_BETA = 8.6


class AudioError(Exception):
    """Base class for audio input problems."""


class MalformedWavError(AudioError):
    pass


class UnsupportedEncodingError(AudioError):
    pass


class ShortWaveformError(AudioError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains NaN or Inf")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM WAV file, averaging channels to mono."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n_frames = fh.getnframes()
            if width != 2:
                raise UnsupportedEncodingError(
                    f"{path}: {8 * width}-bit samples, only 16-bit PCM is supported"
                )
            raw = fh.readframes(n_frames)
    except wave.Error as exc:
        if "unknown format" in str(exc):
            raise UnsupportedEncodingError(f"{path}: {exc}") from exc
        raise MalformedWavError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise MalformedWavError(f"{path}: truncated header") from exc
    data = np.frombuffer(raw, dtype="<i2")
    if data.size % n_channels:
        raise MalformedWavError(f"{path}: payload is not a whole number of frames")
    # symmetric full scale; the lone -32768 code clips to -1
    data = np.clip(data.reshape(-1, n_channels).astype(np.float64) / PCM_SCALE, -1.0, 1.0)
    return Waveform(data.mean(axis=1), rate)


def write_wav(w: Waveform, path) -> None:
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * PCM_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def pre_emphasis(w: Waveform, coeff: float = PRE_EMPHASIS) -> Waveform:
    # coeff == 1 is accepted as the pure first-difference limit
    if not 0.0 <= coeff <= 1.0:
        raise ValueError(f"pre-emphasis coefficient out of range: {coeff}")
    x = w.samples
    y = x.copy()
    y[1:] -= coeff * x[:-1]
    return Waveform(y, w.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS):
    """Triangular filters on the HTK mel scale, spanning 0 Hz to Nyquist.

    Returns ``(weights, edges_hz)`` where weights is (n_fft//2+1, n_mels) and
    filter ``m`` rises from ``edges_hz[m]`` to ``edges_hz[m+1]`` and falls to
    ``edges_hz[m+2]``.
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    rising = (freqs[:, None] - lower) / (center - lower)
    falling = (upper - freqs[:, None]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights.setflags(write=False)
    edges.setflags(write=False)
    return weights, edges


def num_raw_frames(n_samples: int) -> int:
    return 1 + (n_samples - WIN_LENGTH) // HOP_LENGTH


def num_grid_frames(n_samples: int) -> int:
    """Frames on the 10 ms label grid covering ``n_samples`` at 16 kHz."""
    return n_samples // HOP_LENGTH


def log_mel(w: Waveform) -> np.ndarray:
    """Log mel filterbank energies, one row per 10 ms hop of a 25 ms window."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"log_mel expects {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    if len(w) < WIN_LENGTH:
        raise ShortWaveformError(
            f"waveform has {len(w)} samples, need at least {WIN_LENGTH}"
        )
    x = pre_emphasis(w).samples
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH]
    frames = frames * np.hamming(WIN_LENGTH)
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    weights, _ = mel_filterbank()
    return np.log(power @ weights + LOG_FLOOR)


def mean_normalize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return m - m.mean(axis=0, keepdims=True)


def features(w: Waveform) -> np.ndarray:
    """Mean-normalized log-mel aligned to the 10 ms label grid.

    The raw analysis yields ``num_raw_frames`` rows; the result has exactly
    ``num_grid_frames`` rows, the tail padded by repeating the last frame.
    Clips shorter than one window are zero-padded to a single window first.
    """
    n_grid = num_grid_frames(len(w))
    if n_grid == 0:
        return np.zeros((0, N_MELS))
    if len(w) < WIN_LENGTH:
        w = Waveform(np.pad(w.samples, (0, WIN_LENGTH - len(w))), w.sample_rate)
    feats = log_mel(w)
    if feats.shape[0] < n_grid:
        feats = np.concatenate([feats, np.repeat(feats[-1:], n_grid - feats.shape[0], axis=0)])
    return mean_normalize(feats[:n_grid])


@lru_cache(maxsize=4)
def _sinc_table(zeros: int = SINC_ZEROS, resolution: int = SINC_RESOLUTION,
                beta: float = KAISER_BETA) -> np.ndarray:
    u = np.arange(zeros * resolution + 1) / resolution
    window = np.i0(beta * np.sqrt(np.clip(1.0 - (u / zeros) ** 2, 0.0, None))) / np.i0(beta)
    table = np.append(np.sinc(u) * window, 0.0)
    table[zeros * resolution] = 0.0
    table.setflags(write=False)
    return table


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited resampling with a Kaiser-windowed sinc (64 taps per phase).

    Samples beyond either end of the input are treated as zeros.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), target_rate)
    n_out = int(round(len(w) * target_rate / w.sample_rate))
    cutoff = min(1.0, target_rate / w.sample_rate) * SINC_ROLLOFF
    y = _backend.sinc_resample(
        w.samples,
        _sinc_table(),
        w.sample_rate / target_rate,
        n_out,
        cutoff,
        SINC_RESOLUTION,
        SINC_ZEROS,
    )
    return Waveform(y, target_rate)
