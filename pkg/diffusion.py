"""
diffusion: Conditional DDPM over Log-Mel Frames

Forward process (closed form):

    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps

Reverse step, with the denoiser predicting eps:

    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * z
    sigma_t^2 = beta_t * (1 - abar_{t-1}) / (1 - abar_t)

Steps are 1-indexed. The denoiser is a stack of exactly 20 gated residual
blocks of non-causal convolutions. Conditioner channels are [HLF | log-F0 |
VUV | loudness] in that order (layout version 1).
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from checkpoint import load_model, save_model
from dsp import MEL_FLOOR, FeatureMatrix, FrameSeries
from errors import (
    AlignmentError,
    ConfigError,
    DatasetError,
    SamplingDivergedError,
    StepError,
)
from nnet import (
    ParamSet,
    Tensor,
    TrainConfig,
    add_conv,
    add_dense,
    apply_conv,
    const,
    dense,
    evaluate_loss,
    gated,
    mse_loss,
    silu,
    sinusoidal_encoding,
    train_loop,
)
from pitch import SingerEmbedding

logger = logging.getLogger(__name__)

KIND = "diffusion"
N_BLOCKS = 20
CONDITIONER_LAYOUT = ("hlf", "logf0", "vuv", "loudness")
CONDITIONER_LAYOUT_VERSION = 1
LOGF0_CENTER = 5.5


# =============================================================================
# SCHEDULE
# =============================================================================

@dataclass
class ScheduleConfig:
    n_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.06


class DiffusionSchedule:
    """
    betas for steps 1..N plus the derived alphas and cumulative products.

    timesteps maps each step of this schedule onto the step of the trained
    schedule it stands for; it is the identity unless the schedule was
    respaced.
    """

    def __init__(self, betas: Sequence[float], timesteps: Optional[Sequence[int]] = None,
                 monotone: bool = True):
        self.betas = np.asarray(betas, dtype=np.float64)
        n = self.betas.size
        if n < 1:
            raise ConfigError("schedule needs at least one step", module=KIND)
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ConfigError("betas must lie in (0, 1)", module=KIND)
        if monotone and np.any(np.diff(self.betas) <= 0):
            raise ConfigError("betas must be strictly increasing", module=KIND)
        self.alphas = 1.0 - self.betas
        abar = np.empty(n)
        acc = 1.0
        for i in range(n):
            acc = acc * self.alphas[i]
            abar[i] = acc
        self.alpha_bars = abar
        self.timesteps = (np.arange(1, n + 1) if timesteps is None
                          else np.asarray(timesteps, dtype=np.int64))

    @classmethod
    def linear(cls, n_steps: int = 100, beta_start: float = 1e-4,
               beta_end: float = 0.06) -> "DiffusionSchedule":
        if not 0 < beta_start < beta_end < 1:
            raise ConfigError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}",
                              module=KIND)
        return cls(np.linspace(beta_start, beta_end, n_steps))

    @classmethod
    def from_config(cls, cfg: ScheduleConfig) -> "DiffusionSchedule":
        return cls.linear(cfg.n_steps, cfg.beta_start, cfg.beta_end)

    @property
    def n_steps(self) -> int:
        return self.betas.size

    def _check(self, t: int) -> int:
        if not 1 <= int(t) <= self.n_steps:
            raise StepError(f"step {t} outside 1..{self.n_steps}", module=KIND)
        return int(t) - 1

    def beta(self, t: int) -> float:
        return float(self.betas[self._check(t)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check(t)])

    def alpha_bar(self, t: int) -> float:
        """abar_t, with abar_0 = 1."""
        if int(t) == 0:
            return 1.0
        return float(self.alpha_bars[self._check(t)])

    def posterior_variance(self, t: int) -> float:
        return self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))

    def respaced(self, steps: int) -> "DiffusionSchedule":
        """
        An evenly spaced sub-schedule of `steps` steps.

        Effective betas are recomputed from the cumulative products so each
        kept step has the same abar as in the full schedule.
        """
        if steps >= self.n_steps:
            return self
        if steps < 1:
            raise StepError(f"cannot respace to {steps} steps", module=KIND)
        keep = np.unique(np.round(np.linspace(1, self.n_steps, steps)).astype(np.int64))
        abar = self.alpha_bars[keep - 1]
        prev = np.concatenate([[1.0], abar[:-1]])
        return DiffusionSchedule(1.0 - abar / prev, timesteps=keep, monotone=False)


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray,
                    sched: DiffusionSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise StepError(f"noise shape {eps.shape} differs from x0 shape {x0.shape}", module=KIND)
    abar = sched.alpha_bar(sched._check(t) + 1)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def predict_start_from_noise(x_t: np.ndarray, t: int, eps: np.ndarray,
                             sched: DiffusionSchedule) -> np.ndarray:
    abar = sched.alpha_bar(sched._check(t) + 1)
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)


# =============================================================================
# CONDITIONER
# =============================================================================

@dataclass
class Conditioner:
    hlf: FeatureMatrix
    logf0: FrameSeries
    vuv: FrameSeries
    loudness: FrameSeries
    singer: SingerEmbedding

    def __post_init__(self):
        t_len = len(self.hlf)
        if not t_len == len(self.logf0) == len(self.vuv) == len(self.loudness):
            raise AlignmentError(f"conditioner streams differ: hlf={t_len}, logf0="
                                 f"{len(self.logf0)}, vuv={len(self.vuv)}, loudness="
                                 f"{len(self.loudness)}", module=KIND)
        if np.any(self.logf0.values[self.vuv.values < 0.5] != 0):
            raise AlignmentError("log-F0 must be 0 on unvoiced frames", module=KIND)

    def __len__(self) -> int:
        return len(self.hlf)

    def matrix(self) -> np.ndarray:
        """T x (hlf_dim + 3), raw units, fixed channel order."""
        return np.concatenate([
            self.hlf.data.astype(np.float64),
            self.logf0.values[:, None], self.vuv.values[:, None], self.loudness.values[:, None],
        ], axis=1)

    @classmethod
    def from_matrix(cls, mat: np.ndarray, singer: SingerEmbedding, hop: int,
                    sample_rate: int) -> "Conditioner":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(
            FeatureMatrix(mat[:, :-3], hop, sample_rate, "hlf"),
            FrameSeries(mat[:, -3], "logf0", hop, sample_rate),
            FrameSeries(mat[:, -2], "vuv", hop, sample_rate),
            FrameSeries(mat[:, -1], "loudness_db", hop, sample_rate),
            singer,
        )


def build_conditioner(hlf: FeatureMatrix, f0: FrameSeries, vuv: FrameSeries,
                      loudness: FrameSeries, singer: SingerEmbedding) -> Conditioner:
    """log-F0 channel = ln(f0) on voiced frames, 0 elsewhere."""
    if len(f0) != len(vuv):
        raise AlignmentError(f"f0 has {len(f0)} frames, vuv has {len(vuv)}", module=KIND)
    voiced = (vuv.values > 0.5) & (f0.values > 0)
    logf0 = np.zeros(len(f0))
    logf0[voiced] = np.log(f0.values[voiced])
    return Conditioner(hlf, FrameSeries(logf0, "logf0", f0.hop, f0.sample_rate),
                       FrameSeries(voiced.astype(np.float64), "vuv", vuv.hop, vuv.sample_rate),
                       loudness, singer)


def scale_conditioner(mat: np.ndarray) -> np.ndarray:
    """Model-side scaling: log-F0 centred on voiced frames, loudness to roughly [-1, 1]."""
    out = np.array(mat, dtype=np.float64)
    voiced = out[:, -2] > 0.5
    out[:, -3] = np.where(voiced, out[:, -3] - LOGF0_CENTER, 0.0)
    out[:, -1] = (out[:, -1] + 40.0) / 40.0
    return out


# =============================================================================
# DENOISER
# =============================================================================

@dataclass
class DenoiserConfig:
    n_mels: int = 80
    hlf_dim: int = 256
    emb_dim: int = 64
    channels: int = 64
    kernel: int = 3
    dilation_cycle: int = 1
    time_dim: int = 64
    seed: int = 0


class NoisePredictor(Protocol):
    def predict_noise(self, x_t: np.ndarray, step: int, cond: Conditioner) -> np.ndarray:
        ...


class DiffusionModel:
    """WaveNet-style eps predictor plus the mel statistics it was trained with."""

    def __init__(self, cfg: DenoiserConfig, sched_cfg: ScheduleConfig = ScheduleConfig(),
                 params: Optional[ParamSet] = None, mel_mean: Optional[np.ndarray] = None,
                 mel_std: Optional[np.ndarray] = None):
        self.cfg = cfg
        self.sched_cfg = sched_cfg
        self.schedule = DiffusionSchedule.from_config(sched_cfg)
        self.params = params if params is not None else self.init_params(cfg)
        self.mel_mean = np.zeros(cfg.n_mels) if mel_mean is None else np.asarray(mel_mean, float)
        self.mel_std = np.ones(cfg.n_mels) if mel_std is None else np.asarray(mel_std, float)

    @staticmethod
    def init_params(cfg: DenoiserConfig) -> ParamSet:
        p = ParamSet(cfg.seed)
        c = cfg.channels
        cond_dim = cfg.hlf_dim + 3
        add_dense(p, "in", cfg.n_mels, c)
        add_dense(p, "time1", cfg.time_dim, 4 * c)
        add_dense(p, "time2", 4 * c, c)
        add_dense(p, "spk", cfg.emb_dim, c, bias=False)
        for i in range(N_BLOCKS):
            add_conv(p, f"b{i}.conv", c, 2 * c, cfg.kernel)
            add_dense(p, f"b{i}.cond", cond_dim, 2 * c)
            add_dense(p, f"b{i}.out", c, 2 * c)
            add_dense(p, f"b{i}.emb", c, 2 * c)
        add_dense(p, "skip", c, c)
        add_dense(p, "out", c, cfg.n_mels)
        return p

    def graph(self, p: ParamSet, x_t: np.ndarray, step: int, cond: np.ndarray,
              singer: np.ndarray) -> Tensor:
        """x_t: T x n_mels (normalized), cond: scaled T x (hlf_dim + 3)."""
        cfg = self.cfg
        c = cfg.channels
        temb = const(sinusoidal_encoding(np.array([step]), cfg.time_dim), p.dtype)
        temb = dense(p, "time2", silu(dense(p, "time1", temb)))
        inject = temb + dense(p, "spk", const(singer.reshape(1, -1), p.dtype))
        cond_t = const(cond, p.dtype)

        x = silu(dense(p, "in", const(x_t, p.dtype)))
        skip = None
        scale = float(1.0 / np.sqrt(2.0))
        for i in range(N_BLOCKS):
            dilation = 2 ** (i % cfg.dilation_cycle)
            y = apply_conv(p, f"b{i}.conv", x, cfg.kernel, dilation) + dense(p, f"b{i}.cond",
                                                                            cond_t)
            g = gated(y[:, :c], y[:, c:])
            o = dense(p, f"b{i}.out", g) + dense(p, f"b{i}.emb", inject)
            x = (x + o[:, :c]) * scale
            skip = o[:, c:] if skip is None else skip + o[:, c:]
        h = silu(dense(p, "skip", skip * float(1.0 / np.sqrt(N_BLOCKS))))
        return dense(p, "out", h)

    def loss(self, p: ParamSet, x0: np.ndarray, step: int, eps: np.ndarray, cond: np.ndarray,
             singer: np.ndarray) -> Tensor:
        x_t = forward_diffuse(x0, step, eps, self.schedule)
        return mse_loss(self.graph(p, x_t, step, cond, singer), eps)

    def predict_noise(self, x_t: np.ndarray, step: int, cond: Conditioner) -> np.ndarray:
        mat = scale_conditioner(cond.matrix())
        if mat.shape[1] != self.cfg.hlf_dim + 3:
            raise AlignmentError(f"conditioner has {mat.shape[1]} channels, model expects "
                                 f"{self.cfg.hlf_dim + 3}", module=KIND)
        out = self.graph(self.params, x_t, step, mat, cond.singer.vector)
        return out.data.astype(np.float64)

    def normalize(self, mel: np.ndarray) -> np.ndarray:
        return (np.asarray(mel, dtype=np.float64) - self.mel_mean) / self.mel_std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.mel_std + self.mel_mean

    def save(self, path: Union[str, Path]) -> str:
        return save_model(path, KIND, self.params, asdict(self.cfg), {
            "schedule": asdict(self.sched_cfg),
            "mel_mean": [float(v) for v in self.mel_mean],
            "mel_std": [float(v) for v in self.mel_std],
            "conditioner_layout": list(CONDITIONER_LAYOUT),
            "conditioner_layout_version": CONDITIONER_LAYOUT_VERSION,
        })

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DiffusionModel":
        params, meta = load_model(path, KIND)
        if meta.get("conditioner_layout_version") != CONDITIONER_LAYOUT_VERSION:
            raise ConfigError(f"{path}: conditioner layout version "
                              f"{meta.get('conditioner_layout_version')} unsupported", module=KIND)
        return cls(DenoiserConfig(**meta["config"]), ScheduleConfig(**meta["schedule"]), params,
                   np.asarray(meta["mel_mean"]), np.asarray(meta["mel_std"]))


# =============================================================================
# SAMPLING
# =============================================================================

def denoise_step(x_t: np.ndarray, t: int, cond: Conditioner, model: NoisePredictor,
                 sched: DiffusionSchedule, z: Optional[np.ndarray] = None) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}; z must be zero (or None) at t = 1."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape[0] != len(cond):
        raise AlignmentError(f"x_t has {x_t.shape[0]} frames, conditioner has {len(cond)}",
                             module=KIND)
    beta = sched.beta(t)
    if t == 1 and z is not None and np.any(z != 0):
        raise StepError("noise must be zero on the final step", module=KIND)
    eps_hat = model.predict_noise(x_t, int(sched.timesteps[t - 1]), cond)
    mean = (x_t - beta / np.sqrt(1.0 - sched.alpha_bar(t)) * eps_hat) / np.sqrt(sched.alpha(t))
    if z is None or t == 1:
        return mean
    return mean + np.sqrt(sched.posterior_variance(t)) * z


def sample(cond: Conditioner, model: DiffusionModel, seed: int = 0,
           steps: Optional[int] = None) -> FeatureMatrix:
    """Run the reverse chain from seeded Gaussian noise; returns a denormalized log-mel."""
    sched = model.schedule if steps is None else model.schedule.respaced(steps)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((len(cond), model.cfg.n_mels))
    for t in range(sched.n_steps, 0, -1):
        z = rng.standard_normal(x.shape) if t > 1 else None
        x = denoise_step(x, t, cond, model, sched, z)
        if not np.all(np.isfinite(x)):
            raise SamplingDivergedError(int(sched.timesteps[t - 1]), module=KIND)
    mel = np.maximum(model.denormalize(x), np.log(MEL_FLOOR))
    return FeatureMatrix(mel, cond.hlf.hop, cond.hlf.sample_rate, "log_mel")


# =============================================================================
# TRAINING
# =============================================================================

@dataclass
class SynthItem:
    utt_id: str
    mel: FeatureMatrix
    cond: Conditioner


def mel_statistics(mels: Sequence[FeatureMatrix]) -> Tuple[np.ndarray, np.ndarray]:
    stacked = np.concatenate([m.data.astype(np.float64) for m in mels], axis=0)
    return stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-3)


def validate_dataset(items: Sequence[SynthItem], cfg: DenoiserConfig) -> None:
    if not items:
        raise DatasetError("synthesis dataset is empty", module=KIND)
    for item in items:
        if len(item.mel) != len(item.cond):
            raise DatasetError(f"mel has {len(item.mel)} frames, conditioner has "
                               f"{len(item.cond)}", module=KIND, utt_id=item.utt_id)
        if item.mel.dim != cfg.n_mels or item.cond.hlf.dim != cfg.hlf_dim:
            raise DatasetError(f"mel/hlf dims {item.mel.dim}/{item.cond.hlf.dim} do not match "
                               f"model {cfg.n_mels}/{cfg.hlf_dim}", module=KIND,
                               utt_id=item.utt_id)
        if item.cond.singer.dim != cfg.emb_dim:
            raise DatasetError(f"singer embedding has {item.cond.singer.dim} dims, model "
                               f"expects {cfg.emb_dim}", module=KIND, utt_id=item.utt_id)


def _make_draw(model: DiffusionModel, crop_frames: int):
    n_steps = model.schedule.n_steps

    def draw(inputs: tuple, rng: np.random.Generator) -> tuple:
        x0, cond, singer = inputs
        if crop_frames and x0.shape[0] > crop_frames:
            start = int(rng.integers(0, x0.shape[0] - crop_frames + 1))
            x0, cond = x0[start:start + crop_frames], cond[start:start + crop_frames]
        step = int(rng.integers(1, n_steps + 1))
        return x0, step, rng.standard_normal(x0.shape), cond, singer

    return draw


def train_synth(items: Sequence[SynthItem], cfg: DenoiserConfig, sched_cfg: ScheduleConfig,
                train: TrainConfig, init: Optional[DiffusionModel] = None,
                held_out: Sequence[SynthItem] = ()) -> Tuple[DiffusionModel, Dict]:
    """eps-prediction MSE with uniformly drawn steps."""
    model_cfg = init.cfg if init is not None else cfg
    validate_dataset(items, model_cfg)
    if held_out:
        validate_dataset(held_out, model_cfg)
    if init is not None:
        model = init
    else:
        mean, std = mel_statistics([it.mel for it in items])
        model = DiffusionModel(cfg, sched_cfg, mel_mean=mean, mel_std=std)

    def graph_items(batch: Sequence[SynthItem]) -> List[Tuple[str, tuple]]:
        return [(it.utt_id, (model.normalize(it.mel.data), scale_conditioner(it.cond.matrix()),
                             it.cond.singer.vector)) for it in batch]

    draw = _make_draw(model, train.crop_frames)
    eval_rng = np.random.default_rng([train.seed, 2])
    eval_items = [(u, draw(inputs, eval_rng)) for u, inputs in graph_items(held_out or items)]
    before = evaluate_loss(model.loss, model.params, eval_items)
    logger.info("[TRAIN] diffusion: %d items, %d params, initial loss %.5f", len(items),
                model.params.num_parameters(), before)
    history = train_loop(model.loss, model.params, graph_items(items), train, KIND, prepare=draw)
    after = evaluate_loss(model.loss, model.params, eval_items)
    return model, {"history": history, "initial_loss": before, "final_loss": after}
