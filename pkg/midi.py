"""
midi: Frame-Level MIDI Inference

Turns an F0 contour into a note track on the shared frame clock.

    flatten_midi      - per frame, keep whichever of two candidate notes is
                        closer to the sung pitch (ties go to the second)
    segment_quantize  - built-in candidate: split voiced runs at pitch jumps,
                        emit the rounded median of each segment
    residual_logf0    - ln(f0) - ln(midi_to_hz(m)), the pitch model's target
    key_shift_mv      - mean/variance transform of notes toward a singer's register

All comparisons happen in semitones. 0 always means rest/unvoiced.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dsp import HOP, SAMPLE_RATE, FrameSeries, f0_to_semitones, midi_to_hz
from errors import AlignmentError, DomainError, EmptyStatsError, FormatError

logger = logging.getLogger(__name__)

MIDI_TAGS = ("phoneme_based", "polyphonic", "flattened", "quantizer", "file")
NOTE_MIN = 12.0
NOTE_MAX = 120.0
JUMP_SEMITONES = 0.6


@dataclass
class MidiStream:
    notes: np.ndarray
    tag: str = "file"
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.notes = np.asarray(self.notes, dtype=np.float64).reshape(-1)
        if self.tag not in MIDI_TAGS:
            raise DomainError(f"unknown midi tag {self.tag!r}", module="midi")
        voiced = self.notes != 0
        bad = voiced & ((self.notes < NOTE_MIN) | (self.notes > NOTE_MAX))
        if np.any(bad) or not np.all(np.isfinite(self.notes)):
            first = int(np.argmax(bad)) if np.any(bad) else None
            raise DomainError("notes must be 0 or within [12, 120]", module="midi", frame=first)

    def __len__(self) -> int:
        return self.notes.size

    @property
    def voiced(self) -> np.ndarray:
        return self.notes > 0


@dataclass(frozen=True)
class KeyStats:
    """Register of a note track: mean/std over voiced frames (semitones)."""
    mean: float
    std: float
    n_voiced: int = 0

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "KeyStats":
        return cls(float(d["mean"]), float(d["std"]), int(d.get("n_voiced", 0)))


def _as_semitones(h: Union[FrameSeries, np.ndarray]) -> np.ndarray:
    if isinstance(h, FrameSeries):
        if h.kind != "f0_hz":
            raise DomainError(f"expected an f0_hz series, got {h.kind}", module="midi")
        return f0_to_semitones(h)
    return np.asarray(h, dtype=np.float64).reshape(-1)


# =============================================================================
# FUSION
# =============================================================================

def flatten_midi(h: Union[FrameSeries, np.ndarray], p: MidiStream, q: MidiStream) -> MidiStream:
    """
    m_i = q_i if |h_i - p_i| >= |h_i - q_i| else p_i; m_i = 0 where h_i = 0.

    h is either an f0 series (converted to semitones) or a semitone array.
    """
    semis = _as_semitones(h)
    if not semis.size == len(p) == len(q):
        raise AlignmentError(f"length mismatch: h={semis.size}, p={len(p)}, q={len(q)}",
                             module="midi")
    pick_q = np.abs(semis - p.notes) >= np.abs(semis - q.notes)
    m = np.where(pick_q, q.notes, p.notes)
    m[semis == 0] = 0.0
    return MidiStream(m, "flattened", p.hop, p.sample_rate)


# =============================================================================
# SEGMENT QUANTIZER
# =============================================================================

def _runs(mask: np.ndarray) -> List[Tuple[int, int]]:
    """[start, end) spans where mask is True."""
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0]))


def _running_median(x: np.ndarray, k: int) -> np.ndarray:
    half = k // 2
    return np.median(sliding_window_view(np.pad(x, half, mode="edge"), k), axis=1)


def _merge_short(segments: List[List[int]], semis: np.ndarray, min_frames: int) -> None:
    while len(segments) > 1:
        short = [i for i, (s, e) in enumerate(segments) if e - s < min_frames]
        if not short:
            return
        i = short[0]
        s, e = segments[i]
        own = np.median(semis[s:e])
        candidates = []
        if i > 0:
            ls, le = segments[i - 1]
            candidates.append((abs(np.median(semis[ls:le]) - own), i - 1))
        if i + 1 < len(segments):
            rs, re = segments[i + 1]
            candidates.append((abs(np.median(semis[rs:re]) - own), i + 1))
        _, j = min(candidates)
        lo, hi = min(i, j), max(i, j)
        segments[lo] = [segments[lo][0], segments[hi][1]]
        del segments[hi]


def segment_quantize(f0: FrameSeries, vuv: FrameSeries, min_note_frames: int = 10) -> MidiStream:
    """Piecewise-constant integer notes on voiced frames, 0 elsewhere."""
    if len(f0) != len(vuv):
        raise AlignmentError(f"f0 has {len(f0)} frames, vuv has {len(vuv)}", module="midi")
    if min_note_frames < 1:
        raise DomainError("min_note_frames must be >= 1", module="midi")
    voiced = (vuv.values > 0.5) & (f0.values > 0)
    semis = f0_to_semitones(np.where(voiced, f0.values, 0.0))
    notes = np.zeros(len(f0))
    for start, end in _runs(voiced):
        span = semis[start:end]
        smooth = _running_median(span, 5)
        cuts = np.nonzero(np.abs(np.diff(smooth)) > JUMP_SEMITONES)[0] + 1
        bounds = [0, *cuts.tolist(), span.size]
        segments = [[bounds[k], bounds[k + 1]] for k in range(len(bounds) - 1)]
        _merge_short(segments, span, min_note_frames)
        for s, e in segments:
            notes[start + s:start + e] = np.round(np.median(span[s:e]))
    notes = np.where(notes > 0, np.clip(notes, NOTE_MIN, NOTE_MAX), 0.0)
    return MidiStream(notes, "quantizer", f0.hop, f0.sample_rate)


# =============================================================================
# RESIDUAL
# =============================================================================

def residual_logf0(f0: FrameSeries, m: MidiStream) -> FrameSeries:
    """
    r_i = ln(f0_i) - ln(midi_to_hz(m_i)) on frames voiced in both.

    The returned series carries mask = True on those frames. Voiced frames
    over a rest note are excluded (masked), never fatal.
    """
    if len(f0) != len(m):
        raise AlignmentError(f"f0 has {len(f0)} frames, midi has {len(m)}", module="midi")
    in_mask = (f0.values > 0) & (m.notes > 0)
    r = np.zeros(len(f0))
    r[in_mask] = np.log(f0.values[in_mask]) - np.log(midi_to_hz(m.notes[in_mask]))
    return FrameSeries(r, "residual_logf0", f0.hop, f0.sample_rate, mask=in_mask)


def masked_fraction(f0: FrameSeries, m: MidiStream) -> float:
    """Share of voiced f0 frames that sit on a rest note."""
    voiced = f0.values > 0
    if not np.any(voiced):
        return 0.0
    return float(np.sum(voiced & (m.notes == 0)) / np.sum(voiced))


def apply_residual(m: MidiStream, r: FrameSeries) -> FrameSeries:
    if len(m) != len(r):
        raise AlignmentError(f"midi has {len(m)} frames, residual has {len(r)}", module="midi")
    keep = r.mask if r.mask is not None else m.notes > 0
    keep = keep & (m.notes > 0)
    f0 = np.zeros(len(m))
    f0[keep] = midi_to_hz(m.notes[keep]) * np.exp(r.values[keep])
    return FrameSeries(f0, "f0_hz", m.hop, m.sample_rate)


# =============================================================================
# KEY SHIFT
# =============================================================================

def key_stats(m: Union[MidiStream, np.ndarray]) -> KeyStats:
    notes = m.notes if isinstance(m, MidiStream) else np.asarray(m, dtype=np.float64)
    voiced = notes[notes > 0]
    if voiced.size == 0:
        raise EmptyStatsError("no voiced frames to measure key statistics", module="midi")
    return KeyStats(float(voiced.mean()), float(voiced.std()), int(voiced.size))


def pooled_key_stats(streams: List[MidiStream]) -> KeyStats:
    """Key statistics over the voiced frames of several streams together."""
    if not streams:
        raise EmptyStatsError("no streams to pool", module="midi")
    return key_stats(np.concatenate([s.notes for s in streams]))


def key_shift_mv(m: MidiStream, target: KeyStats, integer_shift: bool = False) -> MidiStream:
    src = key_stats(m)
    voiced = m.voiced
    out = m.notes.copy()
    if integer_shift:
        out[voiced] = m.notes[voiced] + np.round(target.mean - src.mean)
    else:
        ratio = target.std / src.std if src.std > 0 else 1.0
        out[voiced] = (m.notes[voiced] - src.mean) * ratio + target.mean
    clipped = voiced & ((out < NOTE_MIN) | (out > NOTE_MAX))
    if np.any(clipped):
        logger.warning("key shift pushed %d frames outside [12, 120]; clipping",
                       int(clipped.sum()))
        out[voiced] = np.clip(out[voiced], NOTE_MIN, NOTE_MAX)
    return MidiStream(out, m.tag, m.hop, m.sample_rate)


# =============================================================================
# TSV
# =============================================================================

def write_midi_tsv(path: Union[str, Path], m: MidiStream) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{i}\t{np.format_float_positional(v, trim='-')}" for i, v in enumerate(m.notes)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_midi_tsv(path: Union[str, Path], tag: str = "file", hop: int = HOP,
                  sample_rate: int = SAMPLE_RATE) -> MidiStream:
    notes = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            index, value = int(parts[0]), float(parts[1])
        except (IndexError, ValueError):
            raise FormatError(f"{path}:{lineno}: expected 'frame_index<TAB>note'", module="midi")
        if index != len(notes):
            raise FormatError(f"{path}:{lineno}: frame index {index}, expected {len(notes)}",
                              module="midi", frame=len(notes))
        notes.append(value)
    return MidiStream(np.asarray(notes), tag, hop, sample_rate)

