"""
inpaint: Stream Splicing for Lyric Edits

An edit plan tiles [0, T) with KEEP and REPLACE segments. KEEP frames are
copied from the audio-derived streams, REPLACE frames from streams predicted
for new text. The spliced bundle becomes the diffusion conditioner.

Splicing is a hard cut: copies are bit-exact on both sides of every
boundary unless a crossfade is explicitly requested.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from diffusion import Conditioner
from dsp import FeatureMatrix, FrameSeries
from errors import AlignmentError, ConfigError, FormatError, PlanError, SpliceError
from linguistic import LinguisticModel, ScoreLabel, linguistic_forward
from midi import MidiStream
from pitch import PitchModel, SingerEmbedding, compose_f0, pitch_forward

logger = logging.getLogger(__name__)

KEEP = "KEEP"
REPLACE = "REPLACE"


@dataclass(frozen=True)
class EditSegment:
    start: int
    end: int
    source: str = KEEP
    replacement_id: str = ""

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class EditPlan:
    segments: List[EditSegment]

    def __iter__(self):
        return iter(self.segments)

    def __len__(self) -> int:
        return len(self.segments)

    def replacement_ids(self) -> List[str]:
        return [s.replacement_id for s in self.segments if s.source == REPLACE]


@dataclass
class StreamBundle:
    hlf: FeatureMatrix
    logf0: FrameSeries
    vuv: FrameSeries
    loudness: FrameSeries

    def __post_init__(self):
        t_len = len(self.hlf)
        if not t_len == len(self.logf0) == len(self.vuv) == len(self.loudness):
            raise AlignmentError(f"bundle streams differ: hlf={t_len}, logf0={len(self.logf0)}, "
                                 f"vuv={len(self.vuv)}, loudness={len(self.loudness)}",
                                 module="inpaint")

    def __len__(self) -> int:
        return len(self.hlf)

    @classmethod
    def from_conditioner(cls, cond: Conditioner) -> "StreamBundle":
        return cls(cond.hlf, cond.logf0, cond.vuv, cond.loudness)

    def to_conditioner(self, singer: SingerEmbedding) -> Conditioner:
        return Conditioner(self.hlf, self.logf0, self.vuv, self.loudness, singer)


# =============================================================================
# PLAN
# =============================================================================

def validate_plan(plan: EditPlan, t_len: int) -> EditPlan:
    """
    Check the plan tiles [0, t_len) exactly and merge adjacent KEEP segments.

    REPLACE segments are never merged: each one is matched to its own bundle.
    """
    if not plan.segments:
        raise PlanError("edit plan is empty", boundary=0, module="inpaint")
    expected = 0
    for seg in plan.segments:
        if seg.source not in (KEEP, REPLACE):
            raise PlanError(f"unknown segment source {seg.source!r}", boundary=seg.start,
                            module="inpaint")
        if seg.end <= seg.start:
            raise PlanError(f"segment [{seg.start}, {seg.end}) is empty or reversed",
                            boundary=seg.start, module="inpaint")
        if seg.start > expected:
            raise PlanError(f"gap at frame {expected}", boundary=expected, module="inpaint")
        if seg.start < expected:
            raise PlanError(f"overlap at frame {seg.start}", boundary=seg.start, module="inpaint")
        if seg.end > t_len:
            raise PlanError(f"segment ends at {seg.end}, past the last frame {t_len}",
                            boundary=t_len, module="inpaint")
        if seg.source == REPLACE and not seg.replacement_id:
            raise PlanError("REPLACE segment without a replacement id", boundary=seg.start,
                            module="inpaint")
        expected = seg.end
    if expected != t_len:
        raise PlanError(f"plan stops at frame {expected} of {t_len}", boundary=expected,
                        module="inpaint")

    merged: List[EditSegment] = []
    for seg in plan.segments:
        if merged and seg.source == KEEP and merged[-1].source == KEEP:
            merged[-1] = EditSegment(merged[-1].start, seg.end, KEEP)
        else:
            merged.append(EditSegment(seg.start, seg.end, seg.source,
                                      seg.replacement_id if seg.source == REPLACE else ""))
    return EditPlan(merged)


# =============================================================================
# SPLICE
# =============================================================================

def _crossfade(values: np.ndarray, boundaries: Sequence[int], width: int,
               voiced: Optional[np.ndarray] = None) -> np.ndarray:
    out = values.copy()
    half = width // 2
    for b in boundaries:
        lo, hi = b - half, b + (width - half)
        if lo < 1 or hi >= out.size:
            continue
        if voiced is not None and not np.all(voiced[lo - 1:hi + 1]):
            continue
        ramp = np.arange(1, hi - lo + 1) / (hi - lo + 1)
        out[lo:hi] = (1.0 - ramp) * out[lo - 1] + ramp * out[hi]
    return out


def splice_streams(orig: StreamBundle, repl: Mapping[str, StreamBundle], plan: EditPlan,
                   crossfade_frames: int = 0) -> StreamBundle:
    plan = validate_plan(plan, len(orig))
    logger.debug("splicing %d frames: %d segments, %d replaced", len(orig), len(plan),
                 len(plan.replacement_ids()))
    parts: Dict[str, list] = {"hlf": [], "logf0": [], "vuv": [], "loudness": []}
    for seg in plan:
        if seg.source == KEEP:
            src, lo, hi = orig, seg.start, seg.end
        else:
            if seg.replacement_id not in repl:
                raise SpliceError(f"no replacement bundle {seg.replacement_id!r}",
                                  module="inpaint", frame=seg.start)
            src, lo, hi = repl[seg.replacement_id], 0, seg.length
            if len(src) != seg.length:
                raise SpliceError(f"segment [{seg.start}, {seg.end}) needs {seg.length} frames, "
                                  f"replacement {seg.replacement_id!r} has {len(src)}",
                                  module="inpaint", frame=seg.start)
        parts["hlf"].append(src.hlf.data[lo:hi])
        parts["logf0"].append(src.logf0.values[lo:hi])
        parts["vuv"].append(src.vuv.values[lo:hi])
        parts["loudness"].append(src.loudness.values[lo:hi])

    logf0 = np.concatenate(parts["logf0"])
    vuv = np.concatenate(parts["vuv"])
    loudness = np.concatenate(parts["loudness"])
    if crossfade_frames > 0:
        cuts = [seg.start for seg in plan.segments[1:]]
        logf0 = _crossfade(logf0, cuts, crossfade_frames, voiced=vuv > 0.5)
        loudness = _crossfade(loudness, cuts, crossfade_frames)

    hop, sr = orig.hlf.hop, orig.hlf.sample_rate
    return StreamBundle(
        FeatureMatrix(np.concatenate(parts["hlf"], axis=0), hop, sr, orig.hlf.tag),
        FrameSeries(logf0, "logf0", hop, sr),
        FrameSeries(vuv, "vuv", hop, sr),
        FrameSeries(loudness, "loudness_db", hop, sr),
    )


def build_replacement(label: ScoreLabel, midi_segment: MidiStream, singer: SingerEmbedding,
                      linguistic: LinguisticModel, pitch: PitchModel) -> StreamBundle:
    """Predict all four streams for one segment of new text."""
    if label.total_frames != len(midi_segment):
        raise AlignmentError(f"durations sum to {label.total_frames}, MIDI segment has "
                             f"{len(midi_segment)} frames", module="inpaint")
    if linguistic.cfg.hlf_dim != pitch.cfg.hlf_dim:
        raise ConfigError(f"linguistic hlf_dim {linguistic.cfg.hlf_dim} does not match pitch "
                          f"model {pitch.cfg.hlf_dim}", module="inpaint")
    hlf = linguistic_forward(label, linguistic)
    streams = pitch_forward(midi_segment, hlf, singer, pitch)
    f0 = compose_f0(midi_segment, streams.residual, streams.vuv)
    voiced = f0.values > 0
    logf0 = np.zeros(len(f0))
    logf0[voiced] = np.log(f0.values[voiced])
    hop, sr = midi_segment.hop, midi_segment.sample_rate
    return StreamBundle(hlf, FrameSeries(logf0, "logf0", hop, sr),
                        FrameSeries(voiced.astype(np.float64), "vuv", hop, sr),
                        streams.loudness)


# =============================================================================
# EDIT SCRIPT
# =============================================================================

def read_edit_script(path: Union[str, Path]) -> EditPlan:
    segments = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        try:
            start, end, source = int(parts[0]), int(parts[1]), parts[2].strip().upper()
        except (IndexError, ValueError):
            raise FormatError(f"{path}:{lineno}: expected 'start<TAB>end<TAB>KEEP|REPLACE"
                              f"<TAB>replacement_id'", module="inpaint")
        rid = parts[3].strip() if len(parts) > 3 else ""
        segments.append(EditSegment(start, end, source, "" if rid == "-" else rid))
    return EditPlan(segments)


def write_edit_script(path: Union[str, Path], plan: EditPlan) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{s.start}\t{s.end}\t{s.source}\t{s.replacement_id or '-'}\n"
                            for s in plan), encoding="utf-8")
