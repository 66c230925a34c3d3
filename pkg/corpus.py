"""
corpus: Synthetic Singing Corpus + Pseudo-HLF Extraction

    gen_corpus  - renders a small multi-singer corpus to disk:
                  wav/<utt>.wav    16-bit PCM mono
                  label/<utt>.tsv  phoneme <TAB> duration_frames
                  midi/<utt>.tsv   frame_index <TAB> note
                  vocab.tsv        symbol <TAB> id
                  manifest.tsv     utt_id <TAB> singer_id <TAB> wav <TAB> label <TAB> midi
    pseudo_hlf  - gain-invariant phonetic features standing in for a
                  pretrained speech encoder

Everything is deterministic given the seed. Each utterance draws from its
own generator seeded by (seed, singer, utterance).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import scipy.fft
import scipy.signal
from scipy.stats import ortho_group

from dsp import (
    HOP,
    SAMPLE_RATE,
    FeatureMatrix,
    MelConfig,
    Waveform,
    frame_count,
    mel_spectrogram,
    midi_to_hz,
    write_wav,
)
from errors import ConfigError, FormatError
from ftr1 import read_matrix
from linguistic import Vocabulary, write_label_tsv
from midi import MidiStream, write_midi_tsv

logger = logging.getLogger(__name__)

REGISTER_MIN = 40.0
REGISTER_MAX = 84.0
N_CEPSTRA = 13
CONTEXT = 2
STACKED_DIM = N_CEPSTRA * (2 * CONTEXT + 1)
HLF_FLOOR_NATS = 8.0


# =============================================================================
# PHONEME INVENTORY
# =============================================================================

@dataclass(frozen=True)
class Phone:
    symbol: str
    voiced: bool
    formants: Tuple[float, ...] = ()
    band: Tuple[float, float] = (0.0, 0.0)

    @property
    def silent(self) -> bool:
        return not self.formants and self.band == (0.0, 0.0)


INVENTORY = (
    Phone("pau", False),
    Phone("a", True, (730.0, 1090.0, 2440.0)),
    Phone("i", True, (270.0, 2290.0, 3010.0)),
    Phone("u", True, (300.0, 870.0, 2240.0)),
    Phone("e", True, (530.0, 1840.0, 2480.0)),
    Phone("o", True, (570.0, 840.0, 2410.0)),
    Phone("s", False, band=(4000.0, 9000.0)),
    Phone("m", True, (280.0, 1300.0, 2500.0)),
    Phone("sh", False, band=(1800.0, 5000.0)),
    Phone("n", True, (280.0, 1700.0, 2600.0)),
    Phone("f", False, band=(1000.0, 7000.0)),
    Phone("l", True, (360.0, 1300.0, 2700.0)),
)

FORMANT_GAINS = (1.0, 0.5, 0.25)


@dataclass
class SynthCorpusConfig:
    n_singers: int = 2
    n_utterances: int = 4
    utterance_seconds: float = 2.0
    n_phonemes: int = 8
    # one [mean, std] in semitones per singer; empty derives evenly spaced registers
    registers: List[List[float]] = field(default_factory=list)
    formant_spread: float = 0.06
    vibrato_cents: float = 25.0
    vibrato_hz: float = 5.5
    wobble_cents: float = 10.0
    seed: int = 0
    jobs: int = 1

    def validate(self) -> None:
        if self.n_singers < 1 or self.n_utterances < 1:
            raise ConfigError("corpus needs at least one singer and one utterance",
                              module="corpus")
        if self.utterance_seconds < 0.5:
            raise ConfigError("utterance_seconds must be >= 0.5", module="corpus")
        if not 2 <= self.n_phonemes <= len(INVENTORY):
            raise ConfigError(f"n_phonemes must be within 2..{len(INVENTORY)}", module="corpus")
        if self.registers and len(self.registers) != self.n_singers:
            raise ConfigError(f"{len(self.registers)} registers for {self.n_singers} singers",
                              module="corpus")
        for mean, std in self.singer_registers():
            if not REGISTER_MIN <= mean <= REGISTER_MAX or std < 0:
                raise ConfigError(f"register ({mean}, {std}) outside [40, 84] semitones",
                                  module="corpus")
        if self.vibrato_cents + self.wobble_cents >= 50.0:
            raise ConfigError("vibrato + wobble must stay under 50 cents", module="corpus")

    def singer_registers(self) -> List[Tuple[float, float]]:
        if self.registers:
            return [(float(m), float(s)) for m, s in self.registers]
        if self.n_singers == 1:
            return [(60.0, 2.0)]
        step = 24.0 / (self.n_singers - 1)
        return [(50.0 + step * s, 2.0) for s in range(self.n_singers)]

    def inventory(self) -> Tuple[Phone, ...]:
        return INVENTORY[:self.n_phonemes]


def utt_name(singer: int, utt: int) -> str:
    return f"s{singer:02d}_u{utt:03d}"


def singer_name(singer: int) -> str:
    return f"singer{singer:02d}"


# =============================================================================
# GENERATION
# =============================================================================

@dataclass
class Utterance:
    utt_id: str
    singer_id: str
    symbols: List[str]
    durations: List[int]
    notes: np.ndarray
    wave: Waveform


def _score(rng: np.random.Generator, t_len: int, phones: Sequence[Phone],
           register: Tuple[float, float]) -> Tuple[List[Phone], List[int], np.ndarray]:
    """Random pau-(C)V...-pau sequence filling exactly t_len frames, one note per syllable."""
    vowels = [p for p in phones if p.voiced]
    consonants = [p for p in phones if p.symbol != "pau" and p not in vowels[:5]]
    lead = int(rng.integers(8, 16))
    seq, durs = [phones[0]], [lead]
    notes = np.zeros(t_len)
    used, tail = lead, 8
    while True:
        cons = consonants[int(rng.integers(len(consonants)))] if (
            consonants and rng.random() < 0.5) else None
        c_len = int(rng.integers(4, 9)) if cons else 0
        v_len = int(rng.integers(15, 41))
        if used + c_len + v_len > t_len - tail:
            break
        note = float(np.clip(np.round(register[0] + register[1] * rng.standard_normal()),
                             REGISTER_MIN, REGISTER_MAX))
        if cons:
            seq.append(cons)
            durs.append(c_len)
        seq.append(vowels[int(rng.integers(min(len(vowels), 5)))])
        durs.append(v_len)
        notes[used:used + c_len + v_len] = note
        used += c_len + v_len
    seq.append(phones[0])
    durs.append(t_len - used)
    return seq, durs, notes


@lru_cache(maxsize=256)
def _peak_filter(freq: float, sr: int) -> Tuple[np.ndarray, np.ndarray]:
    return scipy.signal.iirpeak(freq, Q=max(freq / 90.0, 2.0), fs=sr)


@lru_cache(maxsize=32)
def _band_filter(lo: float, hi: float, sr: int) -> np.ndarray:
    return scipy.signal.butter(4, [lo, min(hi, 0.45 * sr)], btype="bandpass", fs=sr,
                               output="sos")


def _ramp(n: int, sr: int) -> np.ndarray:
    edge = min(n // 2, int(0.005 * sr))
    env = np.ones(n)
    if edge > 0:
        rise = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
        env[:edge] = rise
        env[n - edge:] = rise[::-1]
    return env


def render_utterance(cfg: SynthCorpusConfig, singer: int, utt: int,
                     hop: int = HOP, sr: int = SAMPLE_RATE) -> Utterance:
    rng = np.random.default_rng([cfg.seed, singer, utt])
    n = int(round(cfg.utterance_seconds * sr))
    t_len = frame_count(n, hop)
    seq, durs, notes = _score(rng, t_len, cfg.inventory(), cfg.singer_registers()[singer])

    # per-sample pitch: score note + vibrato + slow wobble, all in cents
    t = np.arange(n) / sr
    frame_of = np.minimum(np.arange(n) // hop, t_len - 1)
    note_s = notes[frame_of]
    wobble_hz = rng.uniform(0.3, 1.2, size=2)
    wobble_ph = rng.uniform(0, 2 * np.pi, size=2)
    cents = (cfg.vibrato_cents * np.sin(2 * np.pi * cfg.vibrato_hz * t + rng.uniform(0, 2 * np.pi))
             + 0.5 * cfg.wobble_cents * np.sum(
                 np.sin(2 * np.pi * wobble_hz[:, None] * t + wobble_ph[:, None]), axis=0))
    f0 = np.where(note_s > 0, midi_to_hz(np.maximum(note_s, 1.0)) * 2.0 ** (cents / 1200.0), 0.0)
    phase = 2.0 * np.pi * np.cumsum(f0) / sr
    k_max = int(min(60, 0.45 * sr // max(float(f0.max()), 1.0)))
    source = sum(np.sin(k * phase) / k for k in range(1, k_max + 1)) if k_max else np.zeros(n)

    scale = 1.0 + cfg.formant_spread * (singer - (cfg.n_singers - 1) / 2.0)
    y = np.zeros(n)
    start = 0
    for phone, d in zip(seq, durs):
        lo, hi = start * hop, min((start + d) * hop, n)
        start += d
        if hi <= lo or phone.silent:
            continue
        if phone.voiced:
            seg = source[lo:hi]
            out = np.zeros(hi - lo)
            for gain, freq in zip(FORMANT_GAINS, phone.formants):
                b, a = _peak_filter(freq * scale, sr)
                out += gain * scipy.signal.lfilter(b, a, seg)
        else:
            noise = rng.standard_normal(hi - lo)
            out = scipy.signal.sosfilt(_band_filter(*phone.band, sr), noise)
        y[lo:hi] = out * _ramp(hi - lo, sr)
    peak = float(np.max(np.abs(y)))
    if peak > 0:
        y *= 0.8 / peak
    return Utterance(utt_name(singer, utt), singer_name(singer), [p.symbol for p in seq], durs,
                     notes, Waveform(y, sr))


@dataclass
class ManifestEntry:
    utt_id: str
    singer_id: str
    wav_path: Path
    label_path: Path
    midi_path: Path


def gen_corpus(cfg: SynthCorpusConfig, out_dir: Union[str, Path], hop: int = HOP,
               sample_rate: int = SAMPLE_RATE) -> List[ManifestEntry]:
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(s, u) for s in range(cfg.n_singers) for u in range(cfg.n_utterances)]
    logger.info("[CORPUS] rendering %d utterances for %d singers into %s", len(jobs),
                cfg.n_singers, out)

    def work(job: Tuple[int, int]) -> Utterance:
        return render_utterance(cfg, job[0], job[1], hop, sample_rate)

    with ThreadPoolExecutor(max_workers=max(1, cfg.jobs)) as pool:
        utterances = list(pool.map(work, jobs))

    entries = []
    for u in utterances:
        entry = ManifestEntry(u.utt_id, u.singer_id, Path("wav") / f"{u.utt_id}.wav",
                              Path("label") / f"{u.utt_id}.tsv", Path("midi") / f"{u.utt_id}.tsv")
        write_wav(out / entry.wav_path, u.wave)
        write_label_tsv(out / entry.label_path, u.symbols, u.durations)
        write_midi_tsv(out / entry.midi_path, MidiStream(u.notes, "file", hop, sample_rate))
        entries.append(entry)
    Vocabulary([p.symbol for p in cfg.inventory()]).write(out / "vocab.tsv")
    write_manifest(out / "manifest.tsv", entries)
    return [ManifestEntry(e.utt_id, e.singer_id, out / e.wav_path, out / e.label_path,
                          out / e.midi_path) for e in entries]


def write_manifest(path: Union[str, Path], entries: Sequence[ManifestEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(
        f"{e.utt_id}\t{e.singer_id}\t{e.wav_path.as_posix()}\t{e.label_path.as_posix()}\t"
        f"{e.midi_path.as_posix()}\n" for e in entries), encoding="utf-8")


def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    """Relative paths resolve against the manifest's directory."""
    path = Path(path)
    root = path.parent
    entries, seen = [], set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated columns, got "
                              f"{len(parts)}", module="corpus")
        if parts[0] in seen:
            raise FormatError(f"{path}:{lineno}: duplicate utterance {parts[0]!r}",
                              module="corpus")
        seen.add(parts[0])
        entries.append(ManifestEntry(parts[0], parts[1], *(root / p for p in parts[2:])))
    return entries


# =============================================================================
# PSEUDO-HLF
# =============================================================================

@lru_cache(maxsize=4)
def _projection(hlf_dim: int) -> np.ndarray:
    return ortho_group.rvs(max(STACKED_DIM, hlf_dim), random_state=0)[:STACKED_DIM, :hlf_dim]


def _stack_context(x: np.ndarray, k: int) -> np.ndarray:
    padded = np.pad(x, ((k, k), (0, 0)), mode="edge")
    t_len = x.shape[0]
    return np.concatenate([padded[i:i + t_len] for i in range(2 * k + 1)], axis=1)


def _mvn(x: np.ndarray) -> np.ndarray:
    return (x - x.mean(axis=0)) / np.maximum(x.std(axis=0), 1e-8)


def pseudo_hlf(w: Waveform, hlf_dim: int = 256, hop: int = HOP,
               cfg: Optional[MelConfig] = None) -> FeatureMatrix:
    """
    T x hlf_dim features: 13 cepstra of a peak-floored log-mel, stacked over
    +-2 frames, rotated by a fixed orthogonal matrix and normalized per
    utterance. The context stack spans the delta coefficients.
    """
    mel = mel_spectrogram(w, cfg, hop).data.astype(np.float64)
    mel = np.maximum(mel, mel.max() - HLF_FLOOR_NATS)
    cep = scipy.fft.dct(mel, type=2, norm="ortho", axis=1)[:, :N_CEPSTRA]
    feats = _mvn(_stack_context(cep, CONTEXT)) @ _projection(hlf_dim)
    return FeatureMatrix(_mvn(feats), hop, w.sample_rate, "hlf")


class HlfProvider(Protocol):
    def extract(self, w: Waveform, utt_id: str = "") -> FeatureMatrix:
        ...


@dataclass
class PseudoHlfExtractor:
    hlf_dim: int = 256
    hop: int = HOP

    def extract(self, w: Waveform, utt_id: str = "") -> FeatureMatrix:
        return pseudo_hlf(w, self.hlf_dim, self.hop)


@dataclass
class FileHlfProvider:
    """Reads externally extracted features from <directory>/<utt_id>.hlf.ftr."""
    directory: Path

    def extract(self, w: Waveform, utt_id: str = "") -> FeatureMatrix:
        return read_matrix(Path(self.directory) / f"{utt_id}.hlf.ftr", "hlf")
