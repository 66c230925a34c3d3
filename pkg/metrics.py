"""
metrics: Objective Evaluation

    mcd               - mel-cepstral distortion (dB), frame-aligned, c0 excluded
    f0_rmse_cents     - RMSE of 1200*log2(f0/f0_ref) over co-voiced frames
    f0_rmse_hz        - the same comparison in Hz
    f0_corr           - Pearson r of log-pitch over co-voiced frames
    token_error_rate  - Levenshtein distance / len(ref), for CER or WER

Every F0 metric reports the co-voiced frame count with its value.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import scipy.fft

from dsp import FeatureMatrix, FrameSeries
from errors import AlignmentError, UndefinedMetricError

logger = logging.getLogger(__name__)

N_CEPSTRA = 24
MCD_CONST = 10.0 / np.log(10.0)


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    unit: str
    frames: int = 0


# =============================================================================
# MCD
# =============================================================================

def cepstra(mel: Union[FeatureMatrix, np.ndarray], order: int = N_CEPSTRA) -> np.ndarray:
    """T x (order + 1) cepstra from a natural-log mel matrix (type-II DCT)."""
    data = mel.data if isinstance(mel, FeatureMatrix) else mel
    data = np.asarray(data, dtype=np.float64)
    if data.shape[1] < order + 1:
        raise AlignmentError(f"need at least {order + 1} mel bands, got {data.shape[1]}",
                             module="metrics")
    return scipy.fft.dct(data, type=2, norm="ortho", axis=1)[:, :order + 1]


def mcd(c: np.ndarray, c_ref: np.ndarray) -> float:
    """Mean over frames of (10/ln10) * sqrt(2 * sum_{d>=1} (c_d - c'_d)^2)."""
    c = np.asarray(c, dtype=np.float64)
    c_ref = np.asarray(c_ref, dtype=np.float64)
    if c.shape != c_ref.shape:
        raise AlignmentError(f"cepstra shapes differ: {c.shape} vs {c_ref.shape}",
                             module="metrics")
    if c.shape[0] == 0:
        raise UndefinedMetricError("MCD over zero frames", module="metrics")
    diff = c[:, 1:] - c_ref[:, 1:]
    return float(np.mean(MCD_CONST * np.sqrt(2.0 * np.sum(diff ** 2, axis=1))))


# =============================================================================
# F0
# =============================================================================

def _co_voiced(f0: FrameSeries, f0_ref: FrameSeries):
    if len(f0) != len(f0_ref):
        raise AlignmentError(f"f0 has {len(f0)} frames, reference has {len(f0_ref)}",
                             module="metrics")
    both = (f0.values > 0) & (f0_ref.values > 0)
    n = int(both.sum())
    if n == 0:
        raise UndefinedMetricError("no frames are voiced in both contours", module="metrics")
    return f0.values[both], f0_ref.values[both], n


def f0_rmse_cents(f0: FrameSeries, f0_ref: FrameSeries) -> MetricValue:
    a, b, n = _co_voiced(f0, f0_ref)
    cents = 1200.0 * np.log2(a / b)
    return MetricValue("f0_rmse", float(np.sqrt(np.mean(cents ** 2))), "cents", n)


def f0_rmse_hz(f0: FrameSeries, f0_ref: FrameSeries) -> MetricValue:
    a, b, n = _co_voiced(f0, f0_ref)
    return MetricValue("f0_rmse_hz", float(np.sqrt(np.mean((a - b) ** 2))), "Hz", n)


def f0_corr(f0: FrameSeries, f0_ref: FrameSeries) -> MetricValue:
    a, b, n = _co_voiced(f0, f0_ref)
    la, lb = np.log2(a), np.log2(b)
    da, db = la - la.mean(), lb - lb.mean()
    denom = np.sqrt(np.sum(da ** 2) * np.sum(db ** 2))
    if not denom > 0:
        raise UndefinedMetricError("F0 correlation undefined for a constant contour",
                                   module="metrics")
    r = float(np.clip(np.sum(da * db) / denom, -1.0, 1.0))
    return MetricValue("f0_corr", r, "r", n)


# =============================================================================
# TOKENS
# =============================================================================

def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Unit-cost Levenshtein distance."""
    prev = np.arange(len(hyp) + 1)
    for i, r in enumerate(ref, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return int(prev[-1])


def token_error_rate(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise UndefinedMetricError("reference transcript is empty", module="metrics")
    return edit_distance(ref, hyp) / len(ref)


def tokenize(text: str, unit: str = "word") -> List[str]:
    """Words split on whitespace, or characters with whitespace dropped."""
    if unit == "char":
        return [ch for ch in text if not ch.isspace()]
    return text.split()


# =============================================================================
# REPORT
# =============================================================================

def write_report(path: Union[str, Path], values: Sequence[MetricValue]) -> None:
    """TSV with header: metric, value, unit, frames."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["metric", "value", "unit", "frames"])
        for v in values:
            writer.writerow([v.name, f"{v.value:.6f}", v.unit, v.frames])
    logger.info("wrote %d metrics to %s", len(values), path)


def read_report(path: Union[str, Path]) -> List[MetricValue]:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    return [MetricValue(r["metric"], float(r["value"]), r["unit"], int(r["frames"]))
            for r in rows]
