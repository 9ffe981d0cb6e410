"""Sliding-window scoring of long clips, score-to-segment conversion and
precision-targeted threshold calibration."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from osdkit import nn

FRAME_SHIFT_S = 0.01
WINDOW = 150
STRIDE = 50


@dataclass(frozen=True)
class TimedSegment:
    onset: float
    offset: float
    label: object = None

    def __post_init__(self):
        if not 0 <= self.onset < self.offset:
            raise ValueError(f"bad segment [{self.onset}, {self.offset})")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


def window_starts(n_frames: int, window: int = WINDOW, stride: int = STRIDE) -> list[int]:
    """Starts 0, stride, 2*stride, ... plus an end-aligned window if needed."""
    if n_frames <= window:
        return [0]
    starts = list(range(0, n_frames - window + 1, stride))
    if starts[-1] + window < n_frames:
        starts.append(n_frames - window)
    return starts


def coverage_counts(n_frames: int, window: int = WINDOW, stride: int = STRIDE) -> np.ndarray:
    cover = np.zeros(max(n_frames, window), dtype=np.int64)
    for s in window_starts(n_frames, window, stride):
        cover[s : s + window] += 1
    return cover[:n_frames]


def sliding_posteriors(model, mel, batch_size: int = 8) -> np.ndarray:
    """Per-frame class probabilities for a (T, mel_bins) feature matrix.

    Each window's (T/6, K) softmax output is duplicated back to frame rate,
    summed into the track and divided by the number of windows covering each
    frame. Clips shorter than one window are zero-padded and cropped back.
    """
    mel = np.asarray(mel, dtype=np.float64)
    T = mel.shape[0]
    window = model.cfg.seq_len
    factor = model.cfg.time_factor
    if T < window:
        mel = np.concatenate([mel, np.zeros((window - T, mel.shape[1]))])
    starts = window_starts(max(T, window), window, STRIDE)
    total = np.zeros((max(T, window), model.cfg.num_classes))
    cover = np.zeros(max(T, window))
    for i in range(0, len(starts), batch_size):
        chunk = starts[i : i + batch_size]
        batch = np.stack([mel[s : s + window] for s in chunk])
        probs = nn.softmax(model.forward(batch, train=False)).astype(np.float64)
        frames = np.repeat(probs, factor, axis=1)
        for s, p in zip(chunk, frames):
            total[s : s + window] += p
            cover[s : s + window] += 1
    return (total / cover[:, None])[:T]


def sliding_score(model, mel, batch_size: int = 8) -> np.ndarray:
    """Overlap-class probability per 10 ms frame (the last output node)."""
    return sliding_posteriors(model, mel, batch_size)[:, -1]


def scores_to_segments(track, threshold: float, min_duration_s: float = 0.0):
    """Maximal runs of frames with score >= threshold as TimedSegments."""
    mask = np.asarray(track) >= threshold
    return mask_to_segments(mask, min_duration_s)


def mask_to_segments(mask, min_duration_s: float = 0.0, label="overlap"):
    mask = np.asarray(mask, dtype=bool)
    edges = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(np.int8), [0]])))
    segs = []
    for start, end in zip(edges[::2], edges[1::2]):
        onset = round(start * FRAME_SHIFT_S, 2)
        offset = round(end * FRAME_SHIFT_S, 2)
        if offset - onset + 1e-9 >= min_duration_s:
            segs.append(TimedSegment(onset, offset, label))
    return segs


def segments_to_mask(segments, n_frames: int) -> np.ndarray:
    """Frames whose centre falls inside any segment."""
    centers = (np.arange(n_frames) + 0.5) * FRAME_SHIFT_S
    mask = np.zeros(n_frames, dtype=bool)
    for s in segments:
        mask |= (centers >= s.onset) & (centers < s.offset)
    return mask


def _pr_curve(scores, positives):
    """Precision/recall for every distinct score used as a >= threshold."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(positives[order])
    fp = np.cumsum(~positives[order])
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    return s[last], tp[last], fp[last]


def calibrate_threshold(scored_dev, target_precision: float = 0.9):
    """Threshold with the best recall among those meeting ``target_precision``.

    ``scored_dev`` is a list of (score track, frame label track) pairs; label 2
    marks overlap. When no threshold meets the target the one with the highest
    precision is returned. Ties go to the higher threshold.
    Returns ``(threshold, precision, recall)``.
    """
    scored_dev = list(scored_dev)
    if not scored_dev:
        raise ValueError("empty calibration set")
    scores = np.concatenate([np.asarray(s, dtype=np.float64) for s, _ in scored_dev])
    positives = np.concatenate([np.asarray(l) == 2 for _, l in scored_dev])
    if scores.size != positives.size:
        raise ValueError("score and label tracks differ in length")
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValueError("calibration set contains no overlap frames")
    thr, tp, fp = _pr_curve(scores, positives)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    ok = precision >= target_precision
    if ok.any():
        idx = np.flatnonzero(ok)
        best = idx[recall[idx] == recall[idx].max()]
    else:
        best = np.flatnonzero(precision == precision.max())
    # thresholds are sorted descending, so the first index is the highest
    k = int(best[0])
    return float(thr[k]), float(precision[k]), float(recall[k])


def write_scores(track, path) -> None:
    with open(path, "w") as fh:
        for i, v in enumerate(np.asarray(track, dtype=np.float64)):
            fh.write(f"{i}\t{v:.6f}\n")


def read_scores(path) -> np.ndarray:
    values = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        idx, val = line.split("\t")
        if int(idx) != len(values):
            raise ValueError(f"{path}:{lineno}: frame index {idx} out of sequence")
        values.append(float(val))
    return np.asarray(values)
