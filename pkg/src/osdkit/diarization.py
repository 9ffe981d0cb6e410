"""Overlap-aware relabelling of diarization output.

SAD segments are cut into single-speaker and overlap pieces using OSD
segments; overlap pieces receive the second-ranked speaker as an extra label.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import NamedTuple

from osdkit.inference import TimedSegment

log = logging.getLogger(__name__)

_EPS = 1e-9


class RttmFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RttmRecord:
    file_id: str
    channel: int
    onset: float
    duration: float
    speaker: str

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"RTTM duration must be positive, got {self.duration}")
        if self.onset < 0:
            raise ValueError(f"RTTM onset must be non-negative, got {self.onset}")

    @property
    def offset(self) -> float:
        return self.onset + self.duration


@dataclass(frozen=True)
class SpeakerRanking:
    """Speakers of one SAD segment, most likely first."""

    onset: float
    offset: float
    speakers: tuple

    def __post_init__(self):
        if len(set(self.speakers)) != len(self.speakers):
            raise ValueError(f"duplicate speakers in ranking {self.speakers}")


class Piece(NamedTuple):
    segment: TimedSegment
    is_overlap: bool


def _union(intervals):
    merged = []
    for a, b in sorted(intervals):
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return merged


def split_sad_segment(sad: TimedSegment, osd) -> list[Piece]:
    """Tile ``sad`` into single-speaker and overlap pieces.

    Overlap pieces are the union of the OSD intervals clipped to the SAD
    segment; everything else in the segment is single-speaker. Intervals that
    only touch the segment boundary contribute nothing.
    """
    if not sad.onset < sad.offset:
        raise ValueError(f"malformed SAD segment [{sad.onset}, {sad.offset})")
    clipped = []
    for o in osd:
        a, b = max(o.onset, sad.onset), min(o.offset, sad.offset)
        if a < b:
            clipped.append((a, b))
    pieces = []
    cursor = sad.onset
    for a, b in _union(clipped):
        if a > cursor:
            pieces.append(Piece(TimedSegment(cursor, a, "single"), False))
        pieces.append(Piece(TimedSegment(a, b, "overlap"), True))
        cursor = b
    if cursor < sad.offset:
        pieces.append(Piece(TimedSegment(cursor, sad.offset, "single"), False))
    return pieces


def split_all(sad_list, osd_list) -> list[Piece]:
    """Split every SAD segment; OSD regions outside all SAD segments vanish."""
    osd_sorted = sorted(osd_list, key=lambda s: s.onset)
    starts = [s.onset for s in osd_sorted]
    out = []
    for sad in sorted(sad_list, key=lambda s: s.onset):
        hi = bisect.bisect_left(starts, sad.offset)
        out.extend(split_sad_segment(sad, [o for o in osd_sorted[:hi] if o.offset > sad.onset]))
    return out


def _ranking_for(piece: TimedSegment, rankings, starts):
    i = bisect.bisect_right(starts, piece.onset + _EPS) - 1
    while i >= 0:
        r = rankings[i]
        if r.onset <= piece.onset + _EPS and piece.offset <= r.offset + _EPS:
            return r
        i -= 1
    raise ValueError(f"no speaker ranking covers piece [{piece.onset}, {piece.offset})")


def merge_records(records):
    """Join abutting records of the same speaker (and overlap status)."""
    merged: list = []
    for rec, flag in sorted(records, key=lambda rf: (rf[0].file_id, rf[0].speaker, rf[0].onset)):
        if merged:
            prev, pflag = merged[-1]
            if (prev.file_id, prev.speaker, pflag) == (rec.file_id, rec.speaker, flag) and abs(
                prev.offset - rec.onset
            ) < _EPS:
                merged[-1] = (
                    RttmRecord(prev.file_id, prev.channel, prev.onset,
                               rec.offset - prev.onset, prev.speaker),
                    flag,
                )
                continue
        merged.append((rec, flag))
    return sorted(merged, key=lambda rf: (rf[0].onset, rf[0].speaker))


def assign_second_speaker(pieces, rankings, file_id="file", channel=1, stats=None):
    """Emit RTTM records: rank-1 speaker for every piece, plus rank-2 on overlaps.

    ``rankings`` are :class:`SpeakerRanking` entries whose intervals contain
    the pieces. Overlap pieces whose ranking holds a single speaker get one
    record and bump ``stats["single_speaker_overlaps"]`` when ``stats`` is a
    dict.
    """
    rankings = sorted(rankings, key=lambda r: r.onset)
    starts = [r.onset for r in rankings]
    out = []
    for seg, is_overlap in pieces:
        ranking = _ranking_for(seg, rankings, starts)
        if not ranking.speakers:
            raise ValueError(f"empty speaker ranking for [{seg.onset}, {seg.offset})")
        chosen = ranking.speakers[:2] if is_overlap else ranking.speakers[:1]
        if is_overlap and len(chosen) < 2:
            log.warning("overlap piece [%.2f, %.2f) has a one-speaker ranking", seg.onset, seg.offset)
            if stats is not None:
                stats["single_speaker_overlaps"] = stats.get("single_speaker_overlaps", 0) + 1
        for spk in chosen:
            out.append((RttmRecord(file_id, channel, seg.onset, seg.offset - seg.onset, spk), is_overlap))
    return [rec for rec, _ in merge_records(out)]


# --- file formats --------------------------------------------------------------


def format_time(t: float) -> str:
    """Two decimals with round-half-even on the shortest decimal repr."""
    return str(Decimal(repr(float(t))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def rttm_line(rec: RttmRecord) -> str:
    return (
        f"SPEAKER {rec.file_id} {rec.channel} {format_time(rec.onset)} "
        f"{format_time(rec.duration)} <NA> <NA> {rec.speaker} <NA> <NA>"
    )


def write_rttm(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rttm_line(rec) + "\n")


def read_rttm(path) -> list[RttmRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0] != "SPEAKER":
            continue
        if len(fields) != 10:
            raise RttmFormatError(f"{path}:{lineno}: expected 10 fields, found {len(fields)}")
        try:
            onset, dur = float(fields[3]), float(fields[4])
            channel = int(fields[2])
        except ValueError as exc:
            raise RttmFormatError(f"{path}:{lineno}: {exc}") from None
        if dur < 0:
            raise RttmFormatError(f"{path}:{lineno}: negative duration {dur}")
        if dur == 0:
            continue
        records.append(RttmRecord(fields[1], channel, onset, dur, fields[7]))
    return records


def read_segments(path) -> list[TimedSegment]:
    """Two-column ``onset offset`` text, or RTTM (all records, one file)."""
    text = Path(path).read_text()
    if any(line.split()[:1] == ["SPEAKER"] for line in text.splitlines()):
        return sorted(
            TimedSegment(r.onset, r.offset, r.speaker) for r in read_rttm(path)
        )
    segs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        try:
            segs.append(TimedSegment(float(fields[0]), float(fields[1])))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return segs


def write_segments(segments, path) -> None:
    with open(path, "w") as fh:
        for s in segments:
            fh.write(f"{format_time(s.onset)} {format_time(s.offset)}\n")


def read_rankings(path) -> list[SpeakerRanking]:
    rankings = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'onset offset spk1,spk2,...'")
        rankings.append(
            SpeakerRanking(float(fields[0]), float(fields[1]), tuple(s for s in fields[2].split(",") if s))
        )
    return rankings


def write_rankings(rankings, path) -> None:
    with open(path, "w") as fh:
        for r in rankings:
            fh.write(f"{format_time(r.onset)} {format_time(r.offset)} {','.join(r.speakers)}\n")


def write_pieces(pieces, path) -> None:
    with open(path, "w") as fh:
        for seg, is_overlap in pieces:
            kind = "overlap" if is_overlap else "single"
            fh.write(f"{format_time(seg.onset)} {format_time(seg.offset)} {kind}\n")


def read_pieces(path) -> list[Piece]:
    pieces = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 3 or fields[2] not in ("overlap", "single"):
            raise ValueError(f"{path}:{lineno}: expected 'onset offset overlap|single'")
        pieces.append(
            Piece(TimedSegment(float(fields[0]), float(fields[1]), fields[2]), fields[2] == "overlap")
        )
    return pieces
