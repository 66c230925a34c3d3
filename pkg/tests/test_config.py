"""
Tests for config.py - YAML loading, validation and hashing
"""

import copy

import pytest

from config import (
    DEFAULT_PATH,
    ENV_VAR,
    config_from_dict,
    config_hash,
    dump_config,
    load_config,
    resolve_config_path,
)
from errors import ConfigError


class TestLoading:
    """Dict and YAML loading."""

    def test_defaults_validate(self):
        cfg = config_from_dict({})
        assert cfg.audio.hop == 220
        assert cfg.hlf_dim == cfg.pitch.hlf_dim == cfg.denoiser.hlf_dim

    def test_shipped_yaml_matches_defaults(self):
        """The bundled dsvs.yaml spells out the built-in defaults."""
        assert config_hash(load_config(DEFAULT_PATH)) == config_hash(config_from_dict({}))

    def test_missing_keys_keep_defaults(self):
        cfg = config_from_dict({"train": {"pitch": {"steps": 7}}})
        assert cfg.train.pitch.steps == 7
        assert cfg.train.pitch.lr == pytest.approx(1e-3)
        assert cfg.train.synth.steps == 2000
        synth = config_from_dict({"train": {"synth": {"steps": 5}}}).train.synth
        assert (synth.steps, synth.crop_frames) == (5, 128)
        assert config_from_dict({"singer": {"directory": "x"}}).singer.provider == "baseline"

    def test_unknown_key_names_its_path(self):
        with pytest.raises(ConfigError, match="unknown config key 'train.pitch.stepz'"):
            config_from_dict({"train": {"pitch": {"stepz": 7}}})
        with pytest.raises(ConfigError, match="unknown config key 'colour'"):
            config_from_dict({"colour": "blue"})

    def test_exponent_strings_become_floats(self, tmp_path):
        """`1e-3` without a dot parses as a YAML string but is accepted for float fields."""
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  pitch:\n    lr: 1e-3\n")
        assert load_config(path).train.pitch.lr == pytest.approx(1e-3)

    @pytest.mark.parametrize("data", [
        {"seed": "three"},
        {"seed": 1.5},
        {"train": {"pitch": {"lr": "fast"}}},
        {"midi": {"integer_key_shift": "yes"}},
        {"audio": "loud"},
    ])
    def test_type_errors(self, data):
        with pytest.raises(ConfigError):
            config_from_dict(data)

    def test_missing_file_and_bad_yaml(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")
        bad = tmp_path / "bad.yaml"
        bad.write_text("seed: [1, 2\n")
        with pytest.raises(ConfigError):
            load_config(bad)


class TestResolution:
    """--config, then the environment, then the bundled file."""

    def test_explicit_path_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv(ENV_VAR, str(tmp_path / "env.yaml"))
        assert resolve_config_path(tmp_path / "cli.yaml") == tmp_path / "cli.yaml"

    def test_environment(self, tmp_path, monkeypatch):
        path = tmp_path / "env.yaml"
        path.write_text("seed: 42\n")
        monkeypatch.setenv(ENV_VAR, str(path))
        assert resolve_config_path() == path
        assert load_config().seed == 42

    def test_bundled_default(self, monkeypatch):
        monkeypatch.delenv(ENV_VAR, raising=False)
        assert resolve_config_path() == DEFAULT_PATH


class TestValidation:
    """Cross-module consistency checks."""

    @pytest.mark.parametrize("patch", [
        {"pitch": {"hlf_dim": 128}},
        {"denoiser": {"emb_dim": 32}},
        {"denoiser": {"n_mels": 40}},
        {"hlf": {"provider": "wav2vec"}},
        {"hlf": {"provider": "file"}},
        {"singer": {"provider": "file"}},
        {"audio": {"f0_estimator": "file"}},
        {"midi": {"source": "guess"}},
        {"vocoder": {"mode": "neural"}},
        {"inpaint": {"crossfade_frames": -1}},
        {"inpaint": {"replacements": {"w1": {"midi": "w1.notes.tsv"}}}},
        {"inpaint": {"replacements": {"w1": {"label": "w1.tsv", "notes": "w1.notes.tsv"}}}},
        {"inpaint": {"replacements": ["w1.tsv"]}},
        {"corpus": {"n_singers": 0}},
        {"mel": {"n_mels": 16}, "denoiser": {"n_mels": 16}},
    ])
    def test_rejects(self, patch):
        with pytest.raises(ConfigError):
            config_from_dict(patch)

    def test_file_provider_with_directory(self, tmp_path):
        cfg = config_from_dict({"hlf": {"provider": "file", "directory": str(tmp_path)}})
        assert cfg.hlf.provider == "file"

    def test_replacement_table(self, tmp_path):
        """Each id gets its own section; the table survives a dump and reload."""
        cfg = config_from_dict({"inpaint": {"replacements": {
            "w1": {"label": "edits/w1.tsv", "midi": "edits/w1.notes.tsv"},
            "w2": {"label": "edits/w2.tsv"},
        }}})
        table = cfg.inpaint.replacements
        assert (table["w1"].label, table["w1"].midi) == ("edits/w1.tsv", "edits/w1.notes.tsv")
        assert table["w2"].midi == ""
        dump_config(cfg, tmp_path / "resolved.yaml")
        assert load_config(tmp_path / "resolved.yaml").inpaint.replacements == table

    def test_tiny_config(self, tiny_config_dict):
        cfg = config_from_dict(tiny_config_dict)
        assert cfg.hlf_dim == 16
        assert cfg.emb_dim == 8


class TestHash:
    """Canonical config hashing."""

    def test_stable_and_sensitive(self, tiny_config_dict):
        a = config_hash(config_from_dict(tiny_config_dict))
        assert a == config_hash(config_from_dict(copy.deepcopy(tiny_config_dict)))
        assert len(a) == 64
        changed = copy.deepcopy(tiny_config_dict)
        changed["train"]["synth"]["steps"] = 4
        assert config_hash(config_from_dict(changed)) != a

    def test_dump_reloads_to_same_hash(self, tiny_config_dict, tmp_path):
        cfg = config_from_dict(tiny_config_dict)
        dump_config(cfg, tmp_path / "resolved.yaml")
        assert config_hash(load_config(tmp_path / "resolved.yaml")) == config_hash(cfg)
