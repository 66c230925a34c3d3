"""
Errors: one hierarchy for the whole toolkit.

Every failure the pipeline can surface is an SVSError. Each carries optional
context (module, utterance id, frame index) so the CLI can report where a
run went wrong without a traceback.
"""

from typing import Optional, Sequence


class SVSError(ValueError):
    """Base error. Context fields are filled in as the error bubbles up."""

    def __init__(self, message: str, module: Optional[str] = None,
                 utt_id: Optional[str] = None, frame: Optional[int] = None):
        super().__init__(message)
        self.message = message
        self.module = module
        self.utt_id = utt_id
        self.frame = frame

    def with_context(self, module: Optional[str] = None, utt_id: Optional[str] = None,
                     frame: Optional[int] = None) -> "SVSError":
        """Fill in missing context in place and return self for re-raising."""
        if self.module is None:
            self.module = module
        if self.utt_id is None:
            self.utt_id = utt_id
        if self.frame is None:
            self.frame = frame
        return self

    def describe(self) -> str:
        parts = []
        if self.module:
            parts.append(f"module={self.module}")
        if self.utt_id:
            parts.append(f"utt={self.utt_id}")
        if self.frame is not None:
            parts.append(f"frame={self.frame}")
        prefix = " ".join(parts)
        return f"{prefix}: {self.message}" if prefix else self.message


class ConfigError(SVSError):
    """Invalid configuration value or unknown key."""


class ShapeError(SVSError):
    """Graph construction with incompatible shapes."""

    def __init__(self, op: str, a: Sequence[int], b: Sequence[int], **kw):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}", **kw)
        self.shapes = (tuple(a), tuple(b))


class DivergedTrainingError(SVSError):
    """Non-finite loss or gradient."""


class DomainError(SVSError):
    """Argument outside the mathematical domain (e.g. frequency <= 0)."""


class AlignmentError(SVSError):
    """Streams that must share a frame clock have different lengths."""


class DurationError(SVSError):
    """Invalid phoneme duration."""

    def __init__(self, index: int, value: int, **kw):
        super().__init__(f"duration at index {index} is {value}; must be >= 1", **kw)
        self.index = index


class VocabularyError(SVSError):
    """Phoneme id or symbol outside the vocabulary."""


class DatasetError(SVSError):
    """Training dataset failed validation before training started."""


class EmptyStatsError(SVSError):
    """Key statistics requested over a stream with no voiced frames."""


class StepError(SVSError):
    """Diffusion step index out of range or misused noise."""


class SamplingDivergedError(SVSError):
    """Non-finite values during the reverse diffusion loop."""

    def __init__(self, step: int, **kw):
        super().__init__(f"sampling diverged at step {step}", **kw)
        self.step = step


class PlanError(SVSError):
    """Edit plan does not tile [0, T) exactly."""

    def __init__(self, message: str, boundary: int, **kw):
        super().__init__(message, frame=boundary, **kw)
        self.boundary = boundary


class SpliceError(SVSError):
    """Replacement bundle does not fit its segment."""


class UndefinedMetricError(SVSError):
    """Metric undefined on the given inputs (no co-voiced frames, empty reference)."""


class FormatError(SVSError):
    """File does not have the expected magic or layout."""


class CorruptionError(SVSError):
    """File payload shorter or longer than its header promises."""

    def __init__(self, path: str, expected: int, actual: int, **kw):
        super().__init__(f"{path}: expected {expected} payload bytes, found {actual}", **kw)
        self.expected = expected
        self.actual = actual


class FrameClockError(SVSError):
    """Inputs disagree on hop size or sample rate."""
