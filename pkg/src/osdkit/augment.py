"""Labelled training clips: rasterized labels, overlap mixing, resampling and
noise augmentation, plus a seeded synthetic corpus for desk-scale runs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from osdkit.audio import SAMPLE_RATE, Waveform, read_wav, resample, write_wav

FRAME_RATE = 100
NON_SPEECH, SINGLE, OVERLAP = 0, 1, 2


def expected_frames(n_samples: int, sample_rate: int) -> int:
    return n_samples * FRAME_RATE // sample_rate


@dataclass
class LabeledClip:
    waveform: Waveform
    labels: np.ndarray
    provenance: str = "real"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        n = expected_frames(len(self.waveform), self.waveform.sample_rate)
        if self.labels.size != n:
            raise ValueError(f"{self.labels.size} labels for a clip of {n} frames")
        if self.labels.size and self.labels.max() > OVERLAP:
            raise ValueError("labels must be 0, 1 or 2")


def labels_from_segments(speaker_segments, duration: float) -> np.ndarray:
    """Rasterize (onset, offset, speaker) triples onto the 10 ms grid.

    A frame is active for a speaker when its centre lies in [onset, offset);
    the label is min(active speakers, 2).
    """
    n = int(round(duration * FRAME_RATE))
    centers = (np.arange(n) + 0.5) / FRAME_RATE
    per_speaker: dict = {}
    for onset, offset, speaker in speaker_segments:
        if offset < onset:
            raise ValueError(f"segment offset {offset} precedes onset {onset}")
        mask = per_speaker.setdefault(speaker, np.zeros(n, dtype=bool))
        mask |= (centers >= onset) & (centers < offset)
    count = sum((m.astype(np.int64) for m in per_speaker.values()), np.zeros(n, np.int64))
    return np.minimum(count, OVERLAP).astype(np.uint8)


def mix_overlap(a: LabeledClip, b: LabeledClip, gain_db: float) -> LabeledClip:
    """Sum two single-speaker clips; b is scaled by ``gain_db`` relative to a."""
    if a.waveform.sample_rate != b.waveform.sample_rate:
        raise ValueError(
            f"sample rates differ: {a.waveform.sample_rate} vs {b.waveform.sample_rate}"
        )
    if (a.labels == OVERLAP).any() or (b.labels == OVERLAP).any():
        raise ValueError("overlap mixing needs single-speaker clips (labels 0/1 only)")
    n = max(len(a.waveform), len(b.waveform))
    xa = np.pad(a.waveform.samples, (0, n - len(a.waveform)))
    xb = np.pad(b.waveform.samples, (0, n - len(b.waveform)))
    m = max(a.labels.size, b.labels.size)
    la = np.pad(a.labels, (0, m - a.labels.size)).astype(np.int64)
    lb = np.pad(b.labels, (0, m - b.labels.size)).astype(np.int64)
    wave_out = Waveform(xa + 10.0 ** (gain_db / 20.0) * xb, a.waveform.sample_rate)
    return LabeledClip(wave_out, np.minimum(la + lb, OVERLAP), "augmented")


def samplerate_roundtrip_augment(c: LabeledClip, low_rate: int = 8000) -> LabeledClip:
    """16 kHz -> ``low_rate`` -> 16 kHz, length matched to the input."""
    if c.waveform.sample_rate != SAMPLE_RATE:
        raise ValueError(f"round-trip augmentation expects {SAMPLE_RATE} Hz input")
    y = resample(resample(c.waveform, low_rate), SAMPLE_RATE).samples
    n = len(c.waveform)
    y = y[:n] if y.size >= n else np.pad(y, (0, n - y.size))
    return LabeledClip(Waveform(y, SAMPLE_RATE), c.labels.copy(), "augmented")


def speech_power(c: LabeledClip) -> float:
    hop = c.waveform.sample_rate // FRAME_RATE
    mask = np.repeat(c.labels > NON_SPEECH, hop)
    x = c.waveform.samples[: mask.size]
    if not mask.any():
        return 0.0
    return float(np.mean(x[mask] ** 2))


def add_noise(c: LabeledClip, snr_db: float, rng=None) -> LabeledClip:
    """Add white noise whose power sits ``snr_db`` below the speech-frame power."""
    if np.isinf(snr_db) and snr_db > 0:
        return LabeledClip(Waveform(c.waveform.samples.copy(), c.waveform.sample_rate),
                           c.labels.copy(), c.provenance)
    power = speech_power(c)
    if power == 0.0:
        raise ValueError("clip has no speech energy; SNR is undefined")
    rng = np.random.default_rng() if rng is None else rng
    noise = rng.standard_normal(len(c.waveform))
    noise *= np.sqrt(power / 10.0 ** (snr_db / 10.0) / np.mean(noise**2))
    return LabeledClip(
        Waveform(c.waveform.samples + noise, c.waveform.sample_rate), c.labels.copy(), "augmented"
    )


# --- synthetic corpus -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpeaker:
    """Band-limited noise with a syllable-rate amplitude envelope."""

    center_hz: float
    bandwidth_hz: float
    mod_hz: float

    def render(self, n: int, rng, sample_rate=SAMPLE_RATE) -> np.ndarray:
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        dist = np.abs(freqs - self.center_hz) / (self.bandwidth_hz / 2)
        spec *= np.where(dist < 1.0, 0.5 * (1.0 + np.cos(np.pi * dist)), 0.0)
        x = np.fft.irfft(spec, n)
        x /= np.sqrt(np.mean(x**2)) + 1e-12
        t = np.arange(n) / sample_rate
        env = 0.35 + 0.65 * np.abs(np.sin(np.pi * self.mod_hz * t + rng.uniform(0, np.pi)))
        return 0.1 * x * env


def speaker_pool(seed: int, n_speakers: int = 8):
    rng = np.random.default_rng([seed, 7919])
    centers = np.geomspace(350.0, 5200.0, n_speakers) * rng.uniform(0.93, 1.07, n_speakers)
    return [
        SyntheticSpeaker(float(c), float(c * rng.uniform(0.3, 0.45)), float(rng.uniform(3.0, 6.0)))
        for c in centers
    ]


def _activity(rng, n_frames, speech=(0.6, 2.5), silence=(0.4, 2.0)):
    """Alternating speech/silence runs on the 10 ms grid -> (onset, offset) list."""
    segs = []
    t = 0
    talking = rng.random() < 0.5
    while t < n_frames:
        lo, hi = speech if talking else silence
        d = int(round(rng.uniform(lo, hi) * FRAME_RATE))
        end = min(t + max(d, 1), n_frames)
        if talking:
            segs.append((t / FRAME_RATE, end / FRAME_RATE))
        t = end
        talking = not talking
    return segs


def single_speaker_clip(speaker: SyntheticSpeaker, segments, n_samples, rng) -> LabeledClip:
    duration = n_samples / SAMPLE_RATE
    labels = labels_from_segments([(a, b, 0) for a, b in segments], duration)
    active = np.repeat(labels.astype(np.float64), SAMPLE_RATE // FRAME_RATE)
    active = np.pad(active, (0, n_samples - active.size))
    x = speaker.render(n_samples, rng) * active
    return LabeledClip(Waveform(x, SAMPLE_RATE), labels, "synthetic")


def synth_clip(seed: int, index: int, duration_s: float = 10.0, pool=None,
               gain_range=(-5.0, 5.0), noise_snr_db=30.0):
    """One two-speaker clip and its ground-truth speaker segments."""
    pool = pool or speaker_pool(seed)
    rng = np.random.default_rng([seed, index])
    n_samples = int(round(duration_s * SAMPLE_RATE))
    n_frames = expected_frames(n_samples, SAMPLE_RATE)
    while True:
        i, j = rng.choice(len(pool), size=2, replace=False)
        if max(pool[i].center_hz, pool[j].center_hz) / min(pool[i].center_hz, pool[j].center_hz) > 1.5:
            break
    segs_a = _activity(rng, n_frames)
    segs_b = _activity(rng, n_frames)
    a = single_speaker_clip(pool[i], segs_a, n_samples, rng)
    b = single_speaker_clip(pool[j], segs_b, n_samples, rng)
    mixed = mix_overlap(a, b, rng.uniform(*gain_range))
    if mixed.labels.any() and np.isfinite(noise_snr_db):
        mixed = add_noise(mixed, noise_snr_db, rng)
    mixed.provenance = "synthetic"
    speakers = [(on, off, f"spk{i}") for on, off in segs_a] + [(on, off, f"spk{j}") for on, off in segs_b]
    return mixed, sorted(speakers)


def synth_corpus(seed: int, n_clips: int, duration_s: float = 10.0) -> list[LabeledClip]:
    pool = speaker_pool(seed)
    return [synth_clip(seed, k, duration_s, pool)[0] for k in range(n_clips)]


# --- corpus files ------------------------------------------------------------


def write_labels(labels, path) -> None:
    Path(path).write_bytes(np.asarray(labels, dtype=np.uint8).tobytes())


def read_labels(path) -> np.ndarray:
    labels = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).copy()
    if labels.size and labels.max() > OVERLAP:
        raise ValueError(f"{path}: label values must be 0, 1 or 2")
    return labels


def write_manifest(entries, path) -> None:
    """Write ``wav_path<TAB>label_path`` lines."""
    with open(path, "w") as fh:
        for wav, lab in entries:
            fh.write(f"{wav}\t{lab}\n")


def read_manifest(path) -> list[tuple[Path, Path]]:
    """Parse a manifest; relative paths resolve against the manifest's folder."""
    root = Path(path).parent
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'wav_path<TAB>label_path'")
        entries.append(tuple(p if Path(p).is_absolute() else root / p for p in map(Path, parts)))
    return entries


def load_clip(wav_path, label_path) -> LabeledClip:
    return LabeledClip(read_wav(wav_path), read_labels(label_path))


def save_clip(clip: LabeledClip, wav_path, label_path) -> None:
    write_wav(clip.waveform, wav_path)
    write_labels(clip.labels, label_path)
