"""Epoch loop over random 150-frame crops with optional augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from osdkit import augment, nn
from osdkit.audio import HOP_LENGTH, SAMPLE_RATE, Waveform, features
from osdkit.model import CRNN, collapse_to_binary, train_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    lr_max: float = 1e-3
    lr_min: float = 0.0
    seed: int = 0
    aug_overlap: bool = True
    overlap_quota: float = 1.0  # mixed crops per real clip per epoch
    aug_resample: bool = True
    aug_noise: bool = False
    noise_snr_db: float = 20.0


@dataclass
class Example:
    feats: np.ndarray
    labels: np.ndarray
    samples: np.ndarray | None = None


def prepare_examples(clips, aug_resample=False, keep_audio=False) -> list[Example]:
    examples = []
    for clip in clips:
        versions = [clip]
        if aug_resample:
            versions.append(augment.samplerate_roundtrip_augment(clip))
        for c in versions:
            f = features(c.waveform)
            examples.append(
                Example(f, c.labels[: f.shape[0]], c.waveform.samples if keep_audio else None)
            )
    return examples


def class_counts(examples, num_classes=3):
    labels = np.concatenate([e.labels for e in examples]).astype(np.int64)
    if num_classes == 2:
        labels = collapse_to_binary(labels)
    return np.bincount(labels, minlength=num_classes)


def _crop(feats, labels, start, window):
    f = feats[start : start + window]
    lab = labels[start : start + window]
    if f.shape[0] < window:
        pad = window - f.shape[0]
        f = np.concatenate([f, np.zeros((pad, f.shape[1]))])
        lab = np.concatenate([lab, np.zeros(pad, dtype=lab.dtype)])
    return f, lab


def _single_speaker_windows(examples, window, step=10):
    """(example, start) pairs whose crop contains no overlap frames."""
    spots = []
    for k, e in enumerate(examples):
        if e.samples is None:
            continue
        for s in range(0, max(e.labels.size - window, 0) + 1, step):
            if e.labels[s : s + window].max(initial=0) < augment.OVERLAP:
                spots.append((k, s))
    return spots


def _mixed_crop(examples, spots, rng, window):
    (ka, sa), (kb, sb) = (spots[i] for i in rng.choice(len(spots), 2, replace=False))
    n = window * HOP_LENGTH

    def piece(k, s):
        e = examples[k]
        x = e.samples[s * HOP_LENGTH : s * HOP_LENGTH + n]
        return augment.LabeledClip(Waveform(np.pad(x, (0, n - x.size)), SAMPLE_RATE),
                                   e.labels[s : s + window])

    mixed = augment.mix_overlap(piece(ka, sa), piece(kb, sb), rng.uniform(-5.0, 5.0))
    return features(mixed.waveform), mixed.labels


def epoch_batches(examples, rng, window, batch_size, tcfg: TrainConfig, spots=()):
    """Yield (features, labels) batches for one epoch."""
    items = []
    for k, e in enumerate(examples):
        T = e.labels.size
        for _ in range(max(1, T // window)):
            items.append(("crop", k, int(rng.integers(0, max(T - window, 0) + 1))))
    if tcfg.aug_overlap and len(spots) >= 2:
        n_real = sum(e.samples is not None for e in examples)
        items += [("mix", 0, 0)] * int(round(tcfg.overlap_quota * n_real))
    order = rng.permutation(len(items))
    for i in range(0, len(order), batch_size):
        feats, labels = [], []
        for j in order[i : i + batch_size]:
            kind, k, s = items[j]
            if kind == "crop":
                f, lab = _crop(examples[k].feats, examples[k].labels, s, window)
            else:
                f, lab = _mixed_crop(examples, spots, rng, window)
            feats.append(f)
            labels.append(lab)
        yield np.stack(feats), np.stack(labels).astype(np.int64)


def steps_per_epoch(examples, window, batch_size, tcfg: TrainConfig) -> int:
    n = sum(max(1, e.labels.size // window) for e in examples)
    if tcfg.aug_overlap:
        n += int(round(tcfg.overlap_quota * sum(e.samples is not None for e in examples)))
    return -(-n // batch_size)


def train(model: CRNN, clips, tcfg: TrainConfig, on_step=None, on_epoch=None):
    """Train ``model`` in place on labelled clips; returns per-step losses.

    ``on_step(epoch, step, loss, lr)`` and ``on_epoch(epoch, model, adam)``
    are optional callbacks.
    """
    rng = np.random.default_rng(tcfg.seed)
    keep_audio = tcfg.aug_overlap
    if tcfg.aug_noise:
        noisy = [augment.add_noise(c, tcfg.noise_snr_db, rng) if c.labels.any() else c for c in clips]
        clips = list(clips) + noisy
    examples = prepare_examples(clips, tcfg.aug_resample, keep_audio)
    window = model.cfg.seq_len
    counts = class_counts(examples, model.cfg.num_classes)
    weights = nn.class_weights_from_counts(counts)
    log.info("class counts %s -> weights %s", counts.tolist(), np.round(weights, 4).tolist())
    spots = _single_speaker_windows(examples, window) if tcfg.aug_overlap else []
    total = tcfg.epochs * steps_per_epoch(examples, window, tcfg.batch_size, tcfg)
    adam = nn.AdamState()
    losses = []
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        for feats, labels in epoch_batches(examples, rng, window, tcfg.batch_size, tcfg, spots):
            lr = nn.cosine_lr(min(step, total), total, tcfg.lr_max, tcfg.lr_min)
            loss = train_step(model, adam, feats, labels, weights, lr)
            losses.append(loss)
            if on_step is not None:
                on_step(epoch, step, loss, lr)
            step += 1
        if on_epoch is not None:
            on_epoch(epoch, model, adam)
    return losses
