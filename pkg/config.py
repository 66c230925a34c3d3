"""
config: Pipeline Configuration

One YAML file describes a whole run: frame clock, feature providers, every
model's hyperparameters and training budget, corpus generation and paths.

Resolution order: --config PATH, then $DSVS_CONFIG, then dsvs.yaml next to
this module, then the built-in defaults. Unknown keys are rejected at any
depth; missing keys keep their defaults.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union, get_args, get_origin, get_type_hints

import yaml

from corpus import SynthCorpusConfig
from diffusion import DenoiserConfig, ScheduleConfig
from dsp import HOP, SAMPLE_RATE, MelConfig
from errors import ConfigError
from linguistic import LinguisticConfig
from nnet import TrainConfig
from pitch import PitchConfig
from vocoder import MODES

logger = logging.getLogger(__name__)

ENV_VAR = "DSVS_CONFIG"
DEFAULT_PATH = Path(__file__).resolve().parent / "dsvs.yaml"


@dataclass
class AudioConfig:
    sample_rate: int = SAMPLE_RATE
    hop: int = HOP
    fmin: float = 65.0
    fmax: float = 1000.0
    f0_estimator: str = "yin"
    f0_dir: str = ""


@dataclass
class ProviderConfig:
    """Where HLFs or singer embeddings come from: computed, or read from FTR1 files."""
    provider: str = "pseudo"
    directory: str = ""


@dataclass
class MidiConfig:
    # flattened = fuse the score MIDI with the quantizer output per frame
    source: str = "flattened"
    min_note_frames: int = 10
    max_masked_fraction: float = 0.05
    integer_key_shift: bool = False


@dataclass
class TrainSection:
    linguistic: TrainConfig = field(default_factory=TrainConfig)
    pitch: TrainConfig = field(default_factory=TrainConfig)
    synth: TrainConfig = field(
        default_factory=lambda: TrainConfig(steps=2000, log_every=100, crop_frames=128))


@dataclass
class ReplacementConfig:
    """Inputs for one REPLACE id: a label TSV and, optionally, a MIDI TSV."""
    label: str = ""
    midi: str = ""


@dataclass
class InpaintConfig:
    crossfade_frames: int = 0
    # id -> files; ids missing here fall back to <edit script dir>/<id>.tsv
    replacements: Dict[str, ReplacementConfig] = field(default_factory=dict)


@dataclass
class VocoderConfig:
    mode: str = "harmonic_noise"


@dataclass
class LoggingConfig:
    level: str = "INFO"
    # empty means <out>/audit.jsonl
    audit_path: str = ""


@dataclass
class PathsConfig:
    corpus: str = "corpus"
    features: str = "features"
    models: str = "models"
    out: str = "out"


@dataclass
class PipelineConfig:
    seed: int = 0
    audio: AudioConfig = field(default_factory=AudioConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    hlf: ProviderConfig = field(default_factory=ProviderConfig)
    singer: ProviderConfig = field(default_factory=lambda: ProviderConfig("baseline"))
    midi: MidiConfig = field(default_factory=MidiConfig)
    linguistic: LinguisticConfig = field(default_factory=LinguisticConfig)
    pitch: PitchConfig = field(default_factory=PitchConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainSection = field(default_factory=TrainSection)
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    vocoder: VocoderConfig = field(default_factory=VocoderConfig)
    corpus: SynthCorpusConfig = field(default_factory=SynthCorpusConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def hlf_dim(self) -> int:
        return self.linguistic.hlf_dim

    @property
    def emb_dim(self) -> int:
        return self.pitch.emb_dim

    def validate(self) -> None:
        a = self.audio
        if a.sample_rate <= 0 or a.hop <= 0:
            raise ConfigError("audio.sample_rate and audio.hop must be positive", module="config")
        self.mel.validate(a.sample_rate)
        if a.f0_estimator not in ("yin", "file"):
            raise ConfigError(f"audio.f0_estimator must be yin or file, got {a.f0_estimator!r}",
                              module="config")
        if self.hlf.provider not in ("pseudo", "file"):
            raise ConfigError(f"hlf.provider must be pseudo or file, got {self.hlf.provider!r}",
                              module="config")
        if self.singer.provider not in ("baseline", "file"):
            raise ConfigError(f"singer.provider must be baseline or file, got "
                              f"{self.singer.provider!r}", module="config")
        for section in (a.f0_estimator == "file" and ("audio.f0_dir", a.f0_dir),
                        self.hlf.provider == "file" and ("hlf.directory", self.hlf.directory),
                        self.singer.provider == "file" and ("singer.directory",
                                                            self.singer.directory)):
            if section and not section[1]:
                raise ConfigError(f"{section[0]} is required for file providers", module="config")
        if self.midi.source not in ("flattened", "quantizer", "file"):
            raise ConfigError(f"midi.source must be flattened, quantizer or file, got "
                              f"{self.midi.source!r}", module="config")
        if self.vocoder.mode not in MODES:
            raise ConfigError(f"vocoder.mode must be one of {', '.join(MODES)}", module="config")
        dims = {"linguistic.hlf_dim": self.linguistic.hlf_dim, "pitch.hlf_dim": self.pitch.hlf_dim,
                "denoiser.hlf_dim": self.denoiser.hlf_dim}
        if len(set(dims.values())) != 1:
            raise ConfigError(f"hlf_dim disagrees across modules: {dims}", module="config")
        if self.pitch.emb_dim != self.denoiser.emb_dim:
            raise ConfigError(f"pitch.emb_dim {self.pitch.emb_dim} != denoiser.emb_dim "
                              f"{self.denoiser.emb_dim}", module="config")
        if self.denoiser.n_mels != self.mel.n_mels:
            raise ConfigError(f"denoiser.n_mels {self.denoiser.n_mels} != mel.n_mels "
                              f"{self.mel.n_mels}", module="config")
        if self.singer.provider == "baseline" and self.emb_dim > 2 * self.mel.n_mels:
            raise ConfigError(f"baseline embeddings have at most {2 * self.mel.n_mels} dims",
                              module="config")
        if self.inpaint.crossfade_frames < 0:
            raise ConfigError("inpaint.crossfade_frames must be >= 0", module="config")
        for rid, entry in self.inpaint.replacements.items():
            if not entry.label:
                raise ConfigError(f"inpaint.replacements.{rid}.label is required", module="config")
        self.corpus.validate()


# =============================================================================
# LOADING
# =============================================================================

def _build(cls, data: Any, path: str, base: Any = None):
    """Overlay data onto base (the field's default instance), recursing into sections."""
    base = cls() if base is None else base
    if data is None:
        return base
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}",
                          module="config")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown config key {where!r}", module="config")
    kwargs = {}
    for name, value in data.items():
        dotted = f"{path}.{name}" if path else name
        ftype = hints[name]
        if is_dataclass(ftype):
            kwargs[name] = _build(ftype, value, dotted, getattr(base, name))
        elif get_origin(ftype) is dict and is_dataclass(get_args(ftype)[1]):
            kwargs[name] = _build_table(get_args(ftype)[1], value, dotted)
        else:
            kwargs[name] = _coerce(ftype, value, dotted)
    return replace(base, **kwargs)


def _build_table(cls, data: Any, path: str) -> Dict[str, Any]:
    """A mapping of free-form keys to sections of one type."""
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be a mapping, got {type(data).__name__}", module="config")
    table = {}
    for key, value in data.items():
        if not isinstance(key, str) or not key:
            raise ConfigError(f"{path} keys must be non-empty strings, got {key!r}",
                              module="config")
        table[key] = _build(cls, value, f"{path}.{key}")
    return table


def _coerce(ftype, value: Any, path: str):
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false", module="config")
        return value
    if ftype is float and isinstance(value, str):
        # PyYAML reads exponents without a dot (1e-3) as strings
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{path} must be a number", module="config")
    if ftype in (int, float, str):
        if ftype is str and not isinstance(value, str):
            raise ConfigError(f"{path} must be a string", module="config")
        if ftype is int and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"{path} must be an integer", module="config")
        if ftype is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{path} must be a number", module="config")
        return ftype(value)
    return value


def config_from_dict(data: Optional[Dict[str, Any]]) -> PipelineConfig:
    cfg = _build(PipelineConfig, data or {}, "")
    cfg.validate()
    return cfg


def resolve_config_path(path: Optional[Union[str, Path]] = None) -> Optional[Path]:
    if path:
        return Path(path)
    env = os.environ.get(ENV_VAR)
    if env:
        return Path(env)
    return DEFAULT_PATH if DEFAULT_PATH.exists() else None


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    resolved = resolve_config_path(path)
    if resolved is None:
        logger.debug("no config file found; using defaults")
        return config_from_dict({})
    if not resolved.exists():
        raise ConfigError(f"config file not found: {resolved}", module="config")
    try:
        data = yaml.safe_load(resolved.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{resolved}: invalid YAML ({e})", module="config")
    logger.debug("loaded config from %s", resolved)
    return config_from_dict(data)


def config_to_dict(cfg: PipelineConfig) -> Dict[str, Any]:
    return asdict(cfg)


def config_hash(cfg: PipelineConfig) -> str:
    """SHA-256 of the canonical JSON of the resolved config."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def dump_config(cfg: PipelineConfig, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False), encoding="utf-8")
