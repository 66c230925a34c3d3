"""
FTR1 feature files.

    b"FTR1" | u32 version | u32 kind code | u64 rows | u64 cols | u32 hop | u32 sample_rate
    rows*cols little-endian float32, row-major

The kind code says what the matrix holds (f0, log-mel, HLF, ...); the
payload is always float32.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from dsp import HOP, SAMPLE_RATE, FeatureMatrix, FrameSeries
from errors import CorruptionError, DomainError, FormatError

MAGIC = b"FTR1"
VERSION = 1
HEADER = struct.Struct("<4sIIQQII")

KIND_CODES = {
    "generic": 0,
    "f0_hz": 1,
    "vuv": 2,
    "loudness_db": 3,
    "log_mel": 4,
    "hlf": 5,
    "embedding": 6,
    "conditioner": 7,
    "residual_logf0": 8,
    "logf0": 9,
    "midi": 10,
    "mask": 11,
}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


@dataclass(frozen=True)
class FtrMeta:
    kind: str = "generic"
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE
    version: int = VERSION


def encode_ftr1(matrix: np.ndarray, meta: FtrMeta = FtrMeta()) -> bytes:
    mat = np.asarray(matrix)
    if mat.ndim == 1:
        mat = mat.reshape(-1, 1)
    if mat.ndim != 2:
        raise DomainError(f"FTR1 holds 2-D matrices, got shape {mat.shape}", module="corpus-io")
    if not np.all(np.isfinite(mat)):
        raise DomainError("refusing to write non-finite values", module="corpus-io")
    if meta.kind not in KIND_CODES:
        raise FormatError(f"unknown FTR1 kind {meta.kind!r}", module="corpus-io")
    rows, cols = mat.shape
    header = HEADER.pack(MAGIC, VERSION, KIND_CODES[meta.kind], rows, cols, meta.hop,
                         meta.sample_rate)
    return header + np.ascontiguousarray(mat, dtype="<f4").tobytes()


def decode_ftr1(buf: bytes, source: str = "<bytes>") -> Tuple[np.ndarray, FtrMeta]:
    if len(buf) < HEADER.size or buf[:4] != MAGIC:
        raise FormatError(f"{source}: not an FTR1 file", module="corpus-io")
    magic, version, code, rows, cols, hop, sr = HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported FTR1 version {version}", module="corpus-io")
    if code not in KIND_NAMES:
        raise FormatError(f"{source}: unknown kind code {code}", module="corpus-io")
    expected = rows * cols * 4
    actual = len(buf) - HEADER.size
    if actual != expected:
        raise CorruptionError(source, expected, actual, module="corpus-io")
    data = np.frombuffer(buf, dtype="<f4", offset=HEADER.size).astype(np.float32)
    return data.reshape(rows, cols), FtrMeta(KIND_NAMES[code], hop, sr, version)


def write_ftr1(path: Union[str, Path], matrix: np.ndarray, meta: FtrMeta = FtrMeta()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_ftr1(matrix, meta))


def read_ftr1(path: Union[str, Path]) -> Tuple[np.ndarray, FtrMeta]:
    path = Path(path)
    return decode_ftr1(path.read_bytes(), str(path))


# Typed wrappers used by the pipeline

def write_series(path: Union[str, Path], series: FrameSeries) -> None:
    write_ftr1(path, series.values.reshape(-1, 1),
               FtrMeta(series.kind, series.hop, series.sample_rate))


def read_series(path: Union[str, Path], kind: str = "") -> FrameSeries:
    mat, meta = read_ftr1(path)
    kind = kind or meta.kind
    return FrameSeries(mat[:, 0].astype(np.float64), kind, meta.hop, meta.sample_rate)


def write_matrix(path: Union[str, Path], fm: FeatureMatrix, kind: str = "") -> None:
    kind = kind or (fm.tag if fm.tag in KIND_CODES else "generic")
    write_ftr1(path, fm.data, FtrMeta(kind, fm.hop, fm.sample_rate))


def read_matrix(path: Union[str, Path], tag: str = "") -> FeatureMatrix:
    mat, meta = read_ftr1(path)
    return FeatureMatrix(mat, meta.hop, meta.sample_rate, tag or meta.kind)
