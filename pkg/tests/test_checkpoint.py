"""
Tests for checkpoint.py - SKCP checkpoint files
"""

import numpy as np
import pytest

from checkpoint import (
    checkpoint_bytes,
    load_checkpoint,
    load_model,
    parse_checkpoint,
    save_checkpoint,
    save_model,
)
from errors import CorruptionError, FormatError
from nnet import ParamSet, adam_step


def _trained_params():
    p = ParamSet(11)
    p.add("a", 3, 4)
    p.add("b", 1, 4, init="zeros")
    for t in p.tensors.values():
        t.grad = np.full_like(t.data, 0.1)
    adam_step(p, lr=1e-2)
    return p


class TestCheckpoint:
    """Save/load of parameters, Adam state and metadata."""

    def test_round_trip(self, tmp_path):
        """Tensors, moments, step and metadata survive a save/load cycle."""
        p = _trained_params()
        meta = {"kind": "toy", "config": {"dim": 4}}
        save_checkpoint(tmp_path / "m.skcp", p, meta)
        q, meta2 = load_checkpoint(tmp_path / "m.skcp")
        assert meta2 == meta
        assert q.names() == p.names()
        assert q.step == p.step == 1
        assert q.rng_seed == 11
        for name in p:
            assert np.array_equal(q[name].data, p[name].data)
            assert np.array_equal(q.m[name], p.m[name])
            assert np.array_equal(q.v[name], p.v[name])

    def test_save_load_save_is_byte_identical(self, tmp_path):
        p = _trained_params()
        buf = checkpoint_bytes(p, {"kind": "toy"})
        q, meta = parse_checkpoint(buf)
        assert checkpoint_bytes(q, meta) == buf

    def test_bad_magic(self):
        """Files not starting with SKCP are rejected."""
        buf = checkpoint_bytes(_trained_params(), {})
        with pytest.raises(FormatError):
            parse_checkpoint(b"XXXX" + buf[4:])

    def test_truncated(self):
        """A short payload is a corruption, not a silent partial load."""
        buf = checkpoint_bytes(_trained_params(), {})
        with pytest.raises(CorruptionError):
            parse_checkpoint(buf[:-4])

    def test_trailing_bytes(self):
        buf = checkpoint_bytes(_trained_params(), {})
        with pytest.raises(CorruptionError):
            parse_checkpoint(buf + b"\0\0\0\0")

    def test_wrong_model_kind(self, tmp_path):
        """load_model checks the kind recorded at save time."""
        path = tmp_path / "pitch.skcp"
        save_model(path, "pitch", _trained_params(), {"dim": 4})
        params, meta = load_model(path, "pitch")
        assert meta["config"] == {"dim": 4}
        with pytest.raises(FormatError):
            load_model(path, "diffusion")
