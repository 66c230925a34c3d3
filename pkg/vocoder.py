"""
vocoder: Deterministic Mel Inverters

    harmonic_noise - harmonics of the F0 contour with amplitudes read off the
                     pseudo-inverted mel envelope, plus envelope-shaped noise
                     on unvoiced frames
    griffin_lim    - 32 phase-reconstruction iterations on the same envelope

Both return T * hop samples at the mel's sample rate.
"""

import logging
from functools import lru_cache

import librosa
import numpy as np
import scipy.signal

from dsp import MEL_FLOOR, FeatureMatrix, FrameSeries, MelConfig, Waveform, mel_basis
from errors import AlignmentError, ConfigError

logger = logging.getLogger(__name__)

MODES = ("harmonic_noise", "griffin_lim")
GRIFFIN_LIM_ITERS = 32


@lru_cache(maxsize=8)
def _mel_pinv(sample_rate: int, cfg: MelConfig) -> np.ndarray:
    return np.linalg.pinv(mel_basis(sample_rate, cfg))


def mel_to_envelope(mel: FeatureMatrix, cfg: MelConfig) -> np.ndarray:
    """T x (n_fft/2 + 1) non-negative magnitude estimate."""
    lin = np.exp(mel.data.astype(np.float64))
    return np.maximum(lin @ _mel_pinv(mel.sample_rate, cfg).T, 0.0)


def _window_sum(cfg: MelConfig) -> float:
    return float(scipy.signal.get_window("hann", cfg.win_length).sum())


def _harmonics(env: np.ndarray, f0: np.ndarray, vuv: np.ndarray, hop: int, sr: int,
               cfg: MelConfig) -> np.ndarray:
    t_len = env.shape[0]
    n = t_len * hop
    frame_pos = np.arange(t_len) * hop
    sample_pos = np.arange(n)
    voiced = (vuv > 0.5) & (f0 > 0)
    if not np.any(voiced):
        return np.zeros(n)
    # carry the nearest voiced pitch through unvoiced gaps so phase stays smooth
    f0_filled = np.interp(frame_pos, frame_pos[voiced], f0[voiced])
    f0_s = np.interp(sample_pos, frame_pos, f0_filled)
    phase = 2.0 * np.pi * np.cumsum(f0_s) / sr
    gain = 2.0 / _window_sum(cfg)
    nyquist = sr / 2.0
    out = np.zeros(n)
    n_harm = int(nyquist // max(float(f0[voiced].min()), 1.0))
    for k in range(1, n_harm + 1):
        freq = k * f0_filled
        audible = voiced & (freq < nyquist)
        if not np.any(audible):
            break
        bins = np.clip(np.round(freq * cfg.n_fft / sr).astype(np.int64), 0, env.shape[1] - 1)
        amp = np.where(audible, gain * env[np.arange(t_len), bins], 0.0)
        out += np.interp(sample_pos, frame_pos, amp) * np.sin(k * phase)
    return out


def _noise(env: np.ndarray, vuv: np.ndarray, hop: int, cfg: MelConfig) -> np.ndarray:
    t_len = env.shape[0]
    rng = np.random.default_rng(0)
    phase = np.exp(2j * np.pi * rng.random(env.shape))
    spec = (env * (1.0 - (vuv > 0.5))[:, None] * phase).T
    return librosa.istft(spec, hop_length=hop, win_length=cfg.win_length, n_fft=cfg.n_fft,
                         window="hann", center=True, length=t_len * hop)


def invert_mel(mel: FeatureMatrix, f0: FrameSeries, vuv: FrameSeries,
               mode: str = "harmonic_noise", cfg: MelConfig = MelConfig()) -> Waveform:
    if mode not in MODES:
        raise ConfigError(f"unknown vocoder mode {mode!r}", module="vocoder")
    t_len = len(mel)
    if not len(f0) == len(vuv) == t_len:
        raise AlignmentError(f"mel has {t_len} frames, f0 {len(f0)}, vuv {len(vuv)}",
                             module="vocoder")
    hop, sr = mel.hop, mel.sample_rate
    n = t_len * hop
    if np.all(mel.data <= np.log(MEL_FLOOR) + 1e-4):
        return Waveform(np.zeros(n), sr)

    env = mel_to_envelope(mel, cfg)
    if mode == "griffin_lim":
        y = librosa.griffinlim(env.T, n_iter=GRIFFIN_LIM_ITERS, hop_length=hop,
                               win_length=cfg.win_length, n_fft=cfg.n_fft, window="hann",
                               center=True, length=n, random_state=0)
    else:
        y = _harmonics(env, f0.values, vuv.values, hop, sr, cfg) + _noise(env, vuv.values, hop,
                                                                           cfg)
    peak = float(np.max(np.abs(y))) if y.size else 0.0
    if peak > 1.0:
        logger.warning("vocoder output peaked at %.3f; scaling to 0.99", peak)
        y = y * (0.99 / peak)
    return Waveform(y, sr)
