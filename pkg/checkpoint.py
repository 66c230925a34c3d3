"""
SKCP checkpoint files.

    b"SKCP" | u32 version | u32 meta_len | meta (sorted JSON, UTF-8)
    u32 count
    count x (u32 name_len | name | u32 rows | u32 cols | f32[rows*cols] LE)
    u64 step | u64 rng_seed
    count x (f32 m[rows*cols] | f32 v[rows*cols])

All integers little-endian. Tensors appear in registration order, so a
save/load/save cycle is byte-identical.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from errors import CorruptionError, FormatError
from nnet import ParamSet

logger = logging.getLogger(__name__)

MAGIC = b"SKCP"
VERSION = 1


def _meta_bytes(meta: Dict[str, Any]) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(params: ParamSet, meta: Dict[str, Any]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    mb = _meta_bytes(meta)
    chunks += [struct.pack("<I", len(mb)), mb, struct.pack("<I", len(params))]
    for name, t in params.items():
        nb = name.encode("utf-8")
        rows, cols = t.shape
        chunks += [struct.pack("<I", len(nb)), nb, struct.pack("<II", rows, cols),
                   np.ascontiguousarray(t.data, dtype="<f4").tobytes()]
    chunks.append(struct.pack("<QQ", params.step, params.rng_seed & 0xFFFFFFFFFFFFFFFF))
    for name in params:
        chunks.append(np.ascontiguousarray(params.m[name], dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(params.v[name], dtype="<f4").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError(self.source, self.pos + n, len(self.buf), module="checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f32(self, rows: int, cols: int) -> np.ndarray:
        raw = self.take(rows * cols * 4)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(rows, cols)


def parse_checkpoint(buf: bytes, source: str = "<bytes>") -> Tuple[ParamSet, Dict[str, Any]]:
    r = _Reader(buf, source)
    if r.take(4) != MAGIC:
        raise FormatError(f"{source}: not an SKCP checkpoint", module="checkpoint")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}",
                          module="checkpoint")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    count = r.u32()
    loaded = []
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rows, cols = r.u32(), r.u32()
        loaded.append((name, r.f32(rows, cols)))
    step, rng_seed = r.u64(), r.u64()
    params = ParamSet(rng_seed=rng_seed)
    for name, data in loaded:
        params.put(name, data)
    params.step = step
    for name, data in loaded:
        params.m[name] = r.f32(*data.shape)
        params.v[name] = r.f32(*data.shape)
    if r.pos != len(buf):
        raise CorruptionError(source, r.pos, len(buf), module="checkpoint")
    return params, meta


def save_checkpoint(path: Union[str, Path], params: ParamSet, meta: Dict[str, Any]) -> str:
    """Write params + metadata; returns the file's SHA-256."""
    buf = checkpoint_bytes(params, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf)
    digest = hashlib.sha256(buf).hexdigest()
    logger.info("saved %s (%d tensors, %d scalars, step %d)", path, len(params),
                params.num_parameters(), params.step)
    return digest


def load_checkpoint(path: Union[str, Path]) -> Tuple[ParamSet, Dict[str, Any]]:
    path = Path(path)
    return parse_checkpoint(path.read_bytes(), str(path))


def save_model(path: Union[str, Path], kind: str, params: ParamSet, config: Dict[str, Any],
               extra: Dict[str, Any] = None) -> str:
    meta = {"kind": kind, "config": config}
    meta.update(extra or {})
    return save_checkpoint(path, params, meta)


def load_model(path: Union[str, Path], kind: str) -> Tuple[ParamSet, Dict[str, Any]]:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != kind:
        raise FormatError(f"{path}: holds a {meta.get('kind')!r} model, expected {kind!r}",
                          module="checkpoint")
    return params, meta
