"""
Pytest configuration and shared fixtures.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from dsp import FeatureMatrix, FrameSeries, Waveform  # noqa: E402
from linguistic import Vocabulary  # noqa: E402
from pitch import SingerEmbedding  # noqa: E402

SR = 44100
HOP = 220


@pytest.fixture
def rng():
    """Seeded generator so every test draws the same numbers."""
    return np.random.default_rng(1234)


@pytest.fixture
def tone():
    """Half a second of a 220 Hz sine at half scale."""
    t = np.arange(int(0.5 * SR)) / SR
    return Waveform(0.5 * np.sin(2 * np.pi * 220.0 * t), SR)


@pytest.fixture
def vocab():
    return Vocabulary(["pau", "a", "i", "s", "m"])


def _make_singer(seed: int, dim: int = 8) -> SingerEmbedding:
    v = np.random.default_rng(seed).standard_normal(dim)
    return SingerEmbedding(v / np.linalg.norm(v), "file")


@pytest.fixture
def singer():
    return _make_singer(0)


@pytest.fixture
def singer_factory():
    """make(seed, dim=8) -> a unit-norm embedding."""
    return _make_singer


def _make_streams(t_len: int, hlf_dim: int = 4, seed: int = 0, voiced_from: int = 0):
    """Random but valid hlf/logf0/vuv/loudness streams of t_len frames."""
    r = np.random.default_rng(seed)
    vuv = np.zeros(t_len)
    vuv[voiced_from:] = (r.random(t_len - voiced_from) > 0.3).astype(float)
    logf0 = np.where(vuv > 0, np.log(r.uniform(100.0, 400.0, t_len)), 0.0)
    loud = r.uniform(-60.0, -5.0, t_len)
    return (FeatureMatrix(r.standard_normal((t_len, hlf_dim)), HOP, SR, "hlf"),
            FrameSeries(logf0, "logf0", HOP, SR),
            FrameSeries(vuv, "vuv", HOP, SR),
            FrameSeries(loud, "loudness_db", HOP, SR))


@pytest.fixture
def streams_factory():
    """make(t_len, hlf_dim=4, seed=0, voiced_from=0) -> (hlf, logf0, vuv, loudness)."""
    return _make_streams


@pytest.fixture
def tiny_config_dict(tmp_path):
    """A pipeline config small enough to train and sample in seconds."""
    return {
        "seed": 3,
        "mel": {"n_mels": 32},
        "linguistic": {"hlf_dim": 16, "model_dim": 16, "ff_dim": 16, "heads": 2,
                       "enc_layers": 1, "dec_layers": 1},
        "pitch": {"hlf_dim": 16, "emb_dim": 8, "model_dim": 8, "note_dim": 4,
                  "enc_layers": 1, "prenet_dim": 4, "gru_dim": 8},
        "denoiser": {"n_mels": 32, "hlf_dim": 16, "emb_dim": 8, "channels": 4,
                     "time_dim": 8},
        "schedule": {"n_steps": 8, "beta_start": 1e-4, "beta_end": 0.3},
        "train": {
            "linguistic": {"steps": 3, "log_every": 0},
            "pitch": {"steps": 2, "log_every": 0},
            "synth": {"steps": 3, "log_every": 0, "crop_frames": 32},
        },
        "corpus": {"n_singers": 2, "n_utterances": 2, "utterance_seconds": 1.0,
                   "n_phonemes": 5},
        "paths": {
            "corpus": str(tmp_path / "corpus"),
            "features": str(tmp_path / "features"),
            "models": str(tmp_path / "models"),
            "out": str(tmp_path / "out"),
        },
    }
