"""Frame-level OSD precision/recall and diarization error rate."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from osdkit.inference import TimedSegment, segments_to_mask


@dataclass(frozen=True)
class DerBreakdown:
    der: float
    false_alarm: float
    miss: float
    confusion: float
    total_ref_speech: float


@dataclass(frozen=True)
class PrecisionRecall:
    """Frame precision/recall; ``None`` marks an undefined ratio (0/0)."""

    precision: float | None
    recall: float | None
    tp: int
    fp: int
    fn: int

    def __iter__(self):
        return iter((self.precision, self.recall))


def _as_mask(pred, n_frames, threshold):
    if isinstance(pred, (list, tuple)) and (not pred or isinstance(pred[0], TimedSegment)):
        return segments_to_mask(pred, n_frames)
    pred = np.asarray(pred)
    if pred.dtype == bool:
        return pred
    return pred >= threshold


def frame_precision_recall(pred, ref, threshold: float = 0.5) -> PrecisionRecall:
    """Overlap-class precision and recall on the 10 ms grid.

    ``pred`` is a score track (positive where score >= threshold), a boolean
    mask, or a list of TimedSegments; ``ref`` holds 0/1/2 frame labels.
    """
    ref = np.asarray(ref)
    mask = _as_mask(pred, ref.size, threshold)
    if mask.size != ref.size:
        raise ValueError(f"prediction has {mask.size} frames, reference {ref.size}")
    truth = ref == 2
    tp = int(np.sum(mask & truth))
    fp = int(np.sum(mask & ~truth))
    fn = int(np.sum(~mask & truth))
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return PrecisionRecall(precision, recall, tp, fp, fn)


def optimal_speaker_mapping(overlap) -> dict[int, int]:
    """One-to-one ref->hyp index mapping maximizing total matched time.

    Pairs with zero co-occurrence are left unmatched.
    """
    overlap = np.asarray(overlap, dtype=np.float64)
    if overlap.size == 0:
        return {}
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return {int(r): int(c) for r, c in zip(rows, cols) if overlap[r, c] > 0}


def _sweep(ref, hyp, collar=0.0):
    """Elementary intervals as (length, ref speakers, hyp speakers)."""
    events = []
    for rec in ref:
        events.append((rec.onset, 0, rec.speaker, 1))
        events.append((rec.offset, 0, rec.speaker, -1))
    for rec in hyp:
        events.append((rec.onset, 1, rec.speaker, 1))
        events.append((rec.offset, 1, rec.speaker, -1))
    if collar > 0:
        for rec in ref:
            for t in (rec.onset, rec.offset):
                events.append((t - collar, 2, None, 1))
                events.append((t + collar, 2, None, -1))
    events.sort(key=lambda e: e[0])
    active = (defaultdict(int), defaultdict(int))
    no_score = 0
    out = []
    prev = None
    i = 0
    while i < len(events):
        t = events[i][0]
        if prev is not None and t > prev and no_score == 0:
            r = frozenset(s for s, c in active[0].items() if c > 0)
            h = frozenset(s for s, c in active[1].items() if c > 0)
            if r or h:
                out.append((t - prev, r, h))
        while i < len(events) and events[i][0] == t:
            _, side, spk, delta = events[i]
            if side == 2:
                no_score += delta
            else:
                active[side][spk] += delta
            i += 1
        prev = t
    return out


def _file_errors(ref, hyp, collar):
    intervals = _sweep(ref, hyp, collar)
    ref_spk = sorted({r.speaker for r in ref})
    hyp_spk = sorted({h.speaker for h in hyp})
    ri = {s: k for k, s in enumerate(ref_spk)}
    hi = {s: k for k, s in enumerate(hyp_spk)}
    overlap = np.zeros((len(ref_spk), len(hyp_spk)))
    for length, rs, hs in intervals:
        for r in rs:
            for h in hs:
                overlap[ri[r], hi[h]] += length
    mapping = optimal_speaker_mapping(overlap)
    mapped = {ref_spk[r]: hyp_spk[h] for r, h in mapping.items()}
    total = fa = miss = conf = 0.0
    for length, rs, hs in intervals:
        n_ref, n_hyp = len(rs), len(hs)
        correct = sum(1 for r in rs if mapped.get(r) in hs)
        total += n_ref * length
        miss += max(n_ref - n_hyp, 0) * length
        fa += max(n_hyp - n_ref, 0) * length
        conf += (min(n_ref, n_hyp) - correct) * length
    return total, fa, miss, conf


def compute_der(ref, hyp, collar_s: float = 0.0) -> DerBreakdown:
    """DER over RTTM records, with one optimal speaker mapping per file.

    Overlapping reference speakers each count; times are taken exactly from
    record boundaries. ``collar_s`` removes +/- collar around every reference
    boundary from scoring.
    """
    by_file: dict = defaultdict(lambda: ([], []))
    for rec in ref:
        by_file[rec.file_id][0].append(rec)
    for rec in hyp:
        by_file[rec.file_id][1].append(rec)
    total = fa = miss = conf = 0.0
    for file_id in sorted(by_file):
        t, f, m, c = _file_errors(*by_file[file_id], collar_s)
        total += t
        fa += f
        miss += m
        conf += c
    if total <= 0:
        raise ValueError("reference contains no scored speech; DER is undefined")
    return DerBreakdown(
        der=(fa + miss + conf) / total,
        false_alarm=fa / total,
        miss=miss / total,
        confusion=conf / total,
        total_ref_speech=total,
    )
