"""
dsp: Frame-Clock Feature Extraction

One frame clock for everything: T = ceil(len / hop), frame t centered on
sample t*hop, reflect padding at both ends. F0, VUV, loudness and log-mel
all come back with exactly T rows.

    extract_f0        -> YIN-style difference function (pluggable estimator)
    extract_loudness  -> windowed RMS in dB, floor -80
    mel_spectrogram   -> Hann STFT magnitude through a mel filterbank, ln
"""

import logging
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Protocol, Tuple, Union

import librosa
import numpy as np
import scipy.fft
import scipy.signal
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view

from errors import ConfigError, DomainError, FormatError, FrameClockError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 44100
HOP = 220
LOUDNESS_FLOOR_DB = -80.0
MEL_FLOOR = 1e-5

FRAME_KINDS = ("f0_hz", "vuv", "loudness_db", "logf0", "residual_logf0")


# =============================================================================
# TYPES
# =============================================================================

@dataclass
class Waveform:
    """Mono audio in [-1, 1]."""
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise DomainError("waveform is empty", module="dsp")
        if not np.all(np.isfinite(self.samples)):
            raise DomainError("waveform has non-finite samples", module="dsp")
        peak = float(np.max(np.abs(self.samples)))
        if peak > 1.0 + 1e-6:
            raise DomainError(f"waveform peak {peak:.4f} exceeds 1.0", module="dsp")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FrameSeries:
    """Per-frame scalar track on the shared clock."""
    values: np.ndarray
    kind: str
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.kind not in FRAME_KINDS:
            raise ConfigError(f"unknown frame series kind {self.kind!r}", module="dsp")
        if not np.all(np.isfinite(self.values)):
            raise DomainError(f"{self.kind} has non-finite values", module="dsp")
        if self.kind == "f0_hz" and np.any(self.values < 0):
            raise DomainError("f0 must be >= 0", module="dsp")
        if self.kind == "vuv" and not np.all(np.isin(self.values, (0.0, 1.0))):
            raise DomainError("vuv must be 0 or 1", module="dsp")
        if self.kind == "loudness_db" and (
                np.any(self.values < LOUDNESS_FLOOR_DB) or np.any(self.values > 0)):
            raise DomainError("loudness outside [-80, 0] dB", module="dsp")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)

    def __len__(self) -> int:
        return self.values.size


@dataclass
class FeatureMatrix:
    """T x D matrix sharing the frame clock (log-mel, HLF, conditioner)."""
    data: np.ndarray
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE
    tag: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DomainError(f"feature matrix must be 2-D, got {self.data.shape}", module="dsp")
        if not np.all(np.isfinite(self.data)):
            raise DomainError(f"{self.tag or 'feature'} matrix has non-finite values",
                              module="dsp")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class MelConfig:
    n_fft: int = 2048
    win_length: int = 2048
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 22050.0

    def validate(self, sample_rate: int = SAMPLE_RATE) -> None:
        if self.win_length > self.n_fft:
            raise ConfigError("mel.win_length exceeds n_fft", module="dsp")
        if not self.n_mels < self.n_fft // 2:
            raise ConfigError(f"mel.n_mels {self.n_mels} must be < n_fft/2", module="dsp")
        if not 0 <= self.fmin < self.fmax <= sample_rate / 2:
            raise ConfigError(f"mel range [{self.fmin}, {self.fmax}] invalid for "
                              f"{sample_rate} Hz", module="dsp")


# =============================================================================
# FRAME CLOCK
# =============================================================================

def frame_count(num_samples: int, hop: int) -> int:
    if hop <= 0:
        raise ConfigError(f"hop must be >= 1, got {hop}", module="dsp")
    if num_samples < 1:
        raise DomainError("num_samples must be >= 1", module="dsp")
    return -(-int(num_samples) // int(hop))


def frame_signal(x: np.ndarray, frame_length: int, hop: int) -> np.ndarray:
    """T x frame_length centered frames; frame t is centered on sample t*hop."""
    t_len = frame_count(x.size, hop)
    pad = frame_length // 2
    mode = "reflect" if x.size > 1 else "constant"
    xp = np.pad(x, (pad, pad + hop), mode=mode)
    return sliding_window_view(xp, frame_length)[::hop][:t_len]


def check_frame_clock(*items, hop: int = HOP, sample_rate: int = SAMPLE_RATE,
                      what: str = "") -> None:
    """Refuse series/matrices recorded on a different hop or sample rate."""
    for item in items:
        if item is None:
            continue
        if item.hop != hop or item.sample_rate != sample_rate:
            raise FrameClockError(
                f"{what or type(item).__name__} is on hop={item.hop}/sr={item.sample_rate}, "
                f"expected hop={hop}/sr={sample_rate}", module="dsp")


# =============================================================================
# PITCH UNITS
# =============================================================================

def hz_to_midi(f):
    f_arr = np.asarray(f, dtype=np.float64)
    if np.any(f_arr <= 0):
        raise DomainError("hz_to_midi requires f > 0", module="dsp")
    out = 69.0 + 12.0 * np.log2(f_arr / 440.0)
    return float(out) if out.ndim == 0 else out


def midi_to_hz(note):
    n = np.asarray(note, dtype=np.float64)
    out = 440.0 * np.exp2((n - 69.0) / 12.0)
    return float(out) if out.ndim == 0 else out


def f0_to_semitones(f0: Union[FrameSeries, np.ndarray]) -> np.ndarray:
    """hz_to_midi on voiced frames, 0 on unvoiced."""
    values = f0.values if isinstance(f0, FrameSeries) else np.asarray(f0, dtype=np.float64)
    out = np.zeros_like(values)
    voiced = values > 0
    if np.any(voiced):
        out[voiced] = hz_to_midi(values[voiced])
    return out


# =============================================================================
# F0
# =============================================================================

def _yin_frames(frames: np.ndarray, tau_max: int) -> np.ndarray:
    """Cumulative-mean-normalized difference function, one row per frame."""
    width = frames.shape[1]
    n_int = width - tau_max
    fft_len = 1 << int(np.ceil(np.log2(width + n_int)))
    spec_all = scipy.fft.rfft(frames, fft_len, axis=1)
    spec_head = scipy.fft.rfft(frames[:, :n_int], fft_len, axis=1)
    cross = scipy.fft.irfft(spec_all * np.conj(spec_head), fft_len, axis=1)[:, :tau_max + 1]

    csum = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    taus = np.arange(tau_max + 1)
    e0 = csum[:, n_int:n_int + 1]
    etau = csum[:, n_int + taus] - csum[:, taus]
    diff = np.maximum(e0 + etau - 2.0 * cross, 0.0)
    diff[:, 0] = 0.0

    running = np.cumsum(diff[:, 1:], axis=1)
    cmnd = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        norm = diff[:, 1:] * taus[1:] / running
    cmnd[:, 1:] = np.where(running > 1e-12, norm, 1.0)
    return cmnd


class F0Estimator(Protocol):
    """Anything that turns a waveform into (f0, vuv) on the shared clock."""

    def estimate(self, w: Waveform, hop: int = HOP,
                 utt_id: str = "") -> Tuple[FrameSeries, FrameSeries]:
        ...


@dataclass
class YinEstimator:
    """
    Reference estimator. A frame is voiced when its normalized difference
    dips below threshold and its RMS is above silence_db. Decisions and
    voiced F0 are then smoothed with a median over median_frames frames.
    """
    fmin: float = 65.0
    fmax: float = 1000.0
    threshold: float = 0.15
    silence_db: float = -60.0
    median_frames: int = 5

    def __post_init__(self):
        if not 40.0 <= self.fmin < self.fmax <= 1600.0:
            raise ConfigError(f"f0 range [{self.fmin}, {self.fmax}] outside 40..1600 Hz",
                              module="dsp")

    def estimate(self, w: Waveform, hop: int = HOP,
                 utt_id: str = "") -> Tuple[FrameSeries, FrameSeries]:
        sr = w.sample_rate
        tau_min = max(2, int(np.floor(sr / self.fmax)))
        tau_max = int(np.ceil(sr / self.fmin))
        frames = frame_signal(w.samples, 2 * tau_max, hop)
        t_len = frames.shape[0]

        cmnd = _yin_frames(frames, tau_max)
        rms_db = 10.0 * np.log10(np.maximum(np.mean(frames ** 2, axis=1), 1e-20))

        raw = np.full(t_len, np.nan)
        for t in range(t_len):
            curve = cmnd[t]
            below = np.nonzero(curve[tau_min:tau_max] < self.threshold)[0]
            if below.size == 0:
                continue
            tau = tau_min + int(below[0])
            while tau + 1 < tau_max and curve[tau + 1] < curve[tau]:
                tau += 1
            period = float(tau)
            if 1 <= tau < tau_max:
                a, b, c = curve[tau - 1], curve[tau], curve[tau + 1]
                denom = a - 2.0 * b + c
                if denom > 0:
                    period += 0.5 * (a - c) / denom
            if rms_db[t] > self.silence_db:
                raw[t] = sr / period

        found = np.isfinite(raw).astype(np.float64)
        k = self.median_frames
        vuv = scipy.signal.medfilt(found, k) > 0.5 if k > 1 else found > 0.5
        half = k // 2
        window = sliding_window_view(np.pad(raw, half, constant_values=np.nan), k)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=RuntimeWarning)
            smooth = np.nanmedian(window, axis=1)
        vuv &= np.isfinite(smooth)
        f0 = np.where(vuv, np.clip(np.nan_to_num(smooth), self.fmin, self.fmax), 0.0)
        return (FrameSeries(f0, "f0_hz", hop, sr),
                FrameSeries(vuv.astype(np.float64), "vuv", hop, sr))


@dataclass
class FileF0Estimator:
    """Loads precomputed contours (<directory>/<utt_id>.f0.ftr, one column of Hz)."""
    directory: Path

    def estimate(self, w: Waveform, hop: int = HOP,
                 utt_id: str = "") -> Tuple[FrameSeries, FrameSeries]:
        from ftr1 import read_ftr1

        mat, meta = read_ftr1(Path(self.directory) / f"{utt_id}.f0.ftr")
        if meta.hop != hop or meta.sample_rate != w.sample_rate:
            raise FrameClockError(f"contour for {utt_id} is on hop={meta.hop}/"
                                  f"sr={meta.sample_rate}", module="dsp", utt_id=utt_id)
        expected = frame_count(len(w), hop)
        if mat.shape[0] != expected:
            raise FrameClockError(f"contour has {mat.shape[0]} frames, audio implies {expected}",
                                  module="dsp", utt_id=utt_id)
        f0 = np.maximum(mat[:, 0].astype(np.float64), 0.0)
        vuv = (f0 > 0).astype(np.float64)
        return (FrameSeries(f0, "f0_hz", hop, w.sample_rate),
                FrameSeries(vuv, "vuv", hop, w.sample_rate))


def extract_f0(w: Waveform, fmin: float = 65.0, fmax: float = 1000.0, hop: int = HOP,
               estimator: Optional[F0Estimator] = None) -> Tuple[FrameSeries, FrameSeries]:
    """(f0, vuv) with f0 = 0 wherever vuv = 0."""
    est = estimator if estimator is not None else YinEstimator(fmin=fmin, fmax=fmax)
    return est.estimate(w, hop)


# =============================================================================
# LOUDNESS / MEL
# =============================================================================

def extract_loudness(w: Waveform, hop: int = HOP, frame_length: int = 2048) -> FrameSeries:
    frames = frame_signal(w.samples, frame_length, hop)
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(rms)
    db = np.clip(np.nan_to_num(db, nan=LOUDNESS_FLOOR_DB, neginf=LOUDNESS_FLOOR_DB),
                 LOUDNESS_FLOOR_DB, 0.0)
    return FrameSeries(db, "loudness_db", hop, w.sample_rate)


@lru_cache(maxsize=8)
def mel_basis(sample_rate: int, cfg: MelConfig) -> np.ndarray:
    """n_mels x (n_fft/2 + 1) filterbank."""
    return librosa.filters.mel(sr=sample_rate, n_fft=cfg.n_fft, n_mels=cfg.n_mels,
                               fmin=cfg.fmin, fmax=cfg.fmax)


def stft_magnitude(x: np.ndarray, cfg: MelConfig, hop: int) -> np.ndarray:
    frames = frame_signal(x, cfg.n_fft, hop)
    window = np.zeros(cfg.n_fft)
    offset = (cfg.n_fft - cfg.win_length) // 2
    window[offset:offset + cfg.win_length] = scipy.signal.get_window("hann", cfg.win_length)
    return np.abs(scipy.fft.rfft(frames * window, axis=1))


def mel_spectrogram(w: Waveform, cfg: Optional[MelConfig] = None, hop: int = HOP) -> FeatureMatrix:
    """T x n_mels natural-log mel magnitudes, floored at ln(1e-5)."""
    cfg = cfg or MelConfig()
    cfg.validate(w.sample_rate)
    mag = stft_magnitude(w.samples, cfg, hop)
    mel = mag @ mel_basis(w.sample_rate, cfg).T
    return FeatureMatrix(np.log(np.maximum(mel, MEL_FLOOR)), hop, w.sample_rate, "log_mel")


# =============================================================================
# AUDIO I/O
# =============================================================================

def resample_linear(x: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out:
        return x
    n_out = max(1, int(round(x.size * sr_out / sr_in)))
    t_out = np.arange(n_out) * (sr_in / sr_out)
    return np.interp(t_out, np.arange(x.size), x)


def read_wav(path: Union[str, Path], sample_rate: int = SAMPLE_RATE) -> Waveform:
    data, sr = sf.read(str(path), dtype="float64", always_2d=False)
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono audio, found {data.shape[1]} channels",
                          module="dsp")
    if sr != sample_rate:
        logger.warning("resampling %s from %d to %d Hz (linear)", path, sr, sample_rate)
        data = resample_linear(data, sr, sample_rate)
    return Waveform(np.clip(data, -1.0, 1.0), sample_rate)


def write_wav(path: Union[str, Path], w: Waveform) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.clip(w.samples, -1.0, 1.0), w.sample_rate, subtype="PCM_16")
