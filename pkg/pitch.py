"""
pitch: MIDI + HLF + Singer -> Residual log-F0, VUV, Loudness

An autoregressive frame decoder in the Tacotron mould, minus attention
(inputs and outputs already share the frame clock):

    [note embedding | fractional offset | HLF] -> linear -> conv encoder
        + singer projection (added to every frame)
    per frame: prenet(previous outputs) + encoder frame -> GRU -> 3 heads

The residual head works in semitones; everything returned is in natural-log
units so it composes with midi.apply_residual.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy.stats import ortho_group

from checkpoint import load_model, save_model
from dsp import FeatureMatrix, FrameSeries, midi_to_hz
from errors import AlignmentError, DatasetError, DomainError, FrameClockError
from ftr1 import FtrMeta, read_ftr1, write_ftr1
from midi import MidiStream
from nnet import (
    ParamSet,
    Tensor,
    TrainConfig,
    add_conv,
    add_dense,
    add_gru,
    apply_conv,
    bce_with_logits,
    concat,
    const,
    dense,
    embedding,
    evaluate_loss,
    gru_step,
    mse_loss,
    tanh,
    train_loop,
)

logger = logging.getLogger(__name__)

KIND = "pitch"
SEMITONE = np.log(2.0) / 12.0
N_NOTE_IDS = 128


# =============================================================================
# SINGER EMBEDDING
# =============================================================================

@dataclass
class SingerEmbedding:
    vector: np.ndarray
    tag: str = "baseline"

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-5:
            raise DomainError(f"singer embedding norm is {norm:.6f}, expected 1", module=KIND)
        if self.tag not in ("file", "baseline"):
            raise DomainError(f"unknown embedding tag {self.tag!r}", module=KIND)

    @property
    def dim(self) -> int:
        return self.vector.size


def _normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if not norm > 0:
        raise DomainError("cannot normalize a zero embedding", module=KIND)
    return v / norm


def baseline_embedding(mel: FeatureMatrix, emb_dim: int = 64) -> SingerEmbedding:
    """Mean and std of log-mel frames, rotated by a fixed orthogonal matrix, L2-normalized."""
    stats = np.concatenate([mel.data.mean(axis=0), mel.data.std(axis=0)]).astype(np.float64)
    if emb_dim > stats.size:
        raise DomainError(f"emb_dim {emb_dim} exceeds {stats.size} statistics", module=KIND)
    rotation = ortho_group.rvs(stats.size, random_state=0)[:, :emb_dim]
    return SingerEmbedding(_normalize(stats @ rotation), "baseline")


def average_embeddings(embeddings: Sequence[SingerEmbedding]) -> SingerEmbedding:
    """Re-normalized mean of several utterance embeddings."""
    if not embeddings:
        raise DomainError("no embeddings to average", module=KIND)
    mean = np.mean([e.vector for e in embeddings], axis=0)
    return SingerEmbedding(_normalize(mean), embeddings[0].tag)


def write_embedding(path: Union[str, Path], s: SingerEmbedding) -> None:
    write_ftr1(path, s.vector.reshape(1, -1), FtrMeta("embedding"))


def read_embedding(path: Union[str, Path]) -> SingerEmbedding:
    mat, _ = read_ftr1(path)
    if mat.shape[0] != 1:
        raise DomainError(f"{path}: embedding file must hold one row", module=KIND)
    return SingerEmbedding(_normalize(mat[0].astype(np.float64)), "file")


class SingerEmbedder(Protocol):
    def embed(self, mel: FeatureMatrix, utt_id: str = "") -> SingerEmbedding:
        ...


@dataclass
class BaselineEmbedder:
    emb_dim: int = 64

    def embed(self, mel: FeatureMatrix, utt_id: str = "") -> SingerEmbedding:
        return baseline_embedding(mel, self.emb_dim)


@dataclass
class FileEmbedder:
    """Reads <directory>/<utt_id>.emb.ftr."""
    directory: Path

    def embed(self, mel: FeatureMatrix, utt_id: str = "") -> SingerEmbedding:
        return read_embedding(Path(self.directory) / f"{utt_id}.emb.ftr")


# =============================================================================
# STREAMS
# =============================================================================

def loudness_to_unit(db: np.ndarray) -> np.ndarray:
    return (np.asarray(db, dtype=np.float64) + 40.0) / 40.0


def unit_to_loudness(u: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=np.float64), -1.0, 1.0) * 40.0 - 40.0


@dataclass
class PitchStreams:
    """Residual log-F0 (with mask), VUV and loudness on one clock."""
    residual: FrameSeries
    vuv: FrameSeries
    loudness: FrameSeries

    def __post_init__(self):
        lengths = {len(self.residual), len(self.vuv), len(self.loudness)}
        if len(lengths) != 1:
            raise AlignmentError(f"pitch streams differ in length: residual={len(self.residual)}"
                                 f", vuv={len(self.vuv)}, loudness={len(self.loudness)}",
                                 module=KIND)

    def __len__(self) -> int:
        return len(self.vuv)


def compose_f0(m: MidiStream, residual: FrameSeries, vuv: FrameSeries) -> FrameSeries:
    """f0 = midi_to_hz(m) * exp(residual) where vuv = 1 and m > 0, else 0."""
    if not len(m) == len(residual) == len(vuv):
        raise AlignmentError(f"length mismatch: midi={len(m)}, residual={len(residual)}, "
                             f"vuv={len(vuv)}", module=KIND)
    on = (vuv.values > 0.5) & (m.notes > 0)
    f0 = np.zeros(len(m))
    f0[on] = midi_to_hz(m.notes[on]) * np.exp(residual.values[on])
    return FrameSeries(f0, "f0_hz", m.hop, m.sample_rate)


# =============================================================================
# MODEL
# =============================================================================

@dataclass
class PitchConfig:
    hlf_dim: int = 256
    emb_dim: int = 64
    model_dim: int = 64
    note_dim: int = 16
    enc_layers: int = 2
    kernel: int = 5
    prenet_dim: int = 32
    gru_dim: int = 64
    loudness_weight: float = 0.1
    seed: int = 0


def _note_inputs(notes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    rounded = np.round(notes)
    ids = np.clip(rounded, 0, N_NOTE_IDS - 1).astype(np.int64)
    frac = np.where(notes > 0, notes - rounded, 0.0).reshape(-1, 1)
    return ids, frac


def teacher_feed(notes: np.ndarray, r_semi: np.ndarray, vuv: np.ndarray,
                 loud_unit: np.ndarray) -> np.ndarray:
    """T x 3 previous-frame inputs built from ground-truth streams."""
    gate = (vuv > 0.5) & (notes > 0)
    return np.stack([np.where(gate, r_semi, 0.0), (vuv > 0.5).astype(np.float64),
                     np.clip(loud_unit, -1.0, 1.0)], axis=1)


class PitchModel:

    def __init__(self, cfg: PitchConfig, params: Optional[ParamSet] = None):
        self.cfg = cfg
        self.params = params if params is not None else self.init_params(cfg)

    @staticmethod
    def init_params(cfg: PitchConfig) -> ParamSet:
        p = ParamSet(cfg.seed)
        d = cfg.model_dim
        p.add("note_embed", N_NOTE_IDS, cfg.note_dim, init="normal", std=0.3)
        add_dense(p, "in", cfg.note_dim + 1 + cfg.hlf_dim, d)
        for i in range(cfg.enc_layers):
            add_conv(p, f"enc{i}", d, d, cfg.kernel)
        add_dense(p, "spk", cfg.emb_dim, d, bias=False)
        add_dense(p, "pre1", 3, cfg.prenet_dim)
        add_dense(p, "pre2", cfg.prenet_dim, cfg.prenet_dim)
        add_gru(p, "gru", d + cfg.prenet_dim, cfg.gru_dim)
        add_dense(p, "head", cfg.gru_dim + d, 3)
        return p

    def encode(self, p: ParamSet, notes: np.ndarray, hlf: np.ndarray,
               singer: np.ndarray) -> Tensor:
        ids, frac = _note_inputs(notes)
        x = concat([embedding(p["note_embed"], ids), const(frac, p.dtype), const(hlf, p.dtype)],
                   axis=1)
        x = tanh(dense(p, "in", x))
        for i in range(self.cfg.enc_layers):
            x = x + tanh(apply_conv(p, f"enc{i}", x, self.cfg.kernel))
        return x + dense(p, "spk", const(singer.reshape(1, -1), p.dtype))

    def decode(self, p: ParamSet, enc: Tensor, notes: np.ndarray,
               feed: Optional[np.ndarray] = None) -> Tensor:
        """
        T x 3 head outputs [residual (semitones), vuv logit, loudness unit].

        With feed (teacher forcing), frame t sees feed[t-1]; otherwise it sees
        its own gated, thresholded previous outputs.
        """
        t_len = enc.shape[0]
        h = const(np.zeros((1, self.cfg.gru_dim)), p.dtype)
        prev = np.zeros(3)
        rows = []
        for t in range(t_len):
            e_t = enc[t:t + 1]
            pre = tanh(dense(p, "pre1", const(prev.reshape(1, 3), p.dtype)))
            pre = tanh(dense(p, "pre2", pre))
            h = gru_step(p, "gru", concat([e_t, pre], axis=1), h)
            out = dense(p, "head", concat([h, e_t], axis=1))
            rows.append(out)
            if feed is not None:
                prev = feed[t]
            else:
                r, logit, loud = (float(v) for v in out.data[0])
                v = 1.0 if logit > 0 else 0.0
                gate = v if notes[t] > 0 else 0.0
                prev = np.array([r * gate, v, min(max(loud, -1.0), 1.0)])
        return concat(rows, axis=0)

    def loss(self, p: ParamSet, notes: np.ndarray, hlf: np.ndarray, singer: np.ndarray,
             r_semi: np.ndarray, mask: np.ndarray, vuv: np.ndarray,
             loud_unit: np.ndarray) -> Tensor:
        enc = self.encode(p, notes, hlf, singer)
        out = self.decode(p, enc, notes, teacher_feed(notes, r_semi, vuv, loud_unit))
        col = (lambda a: a.reshape(-1, 1))
        return (mse_loss(out[:, 0:1], col(r_semi), col(mask))
                + bce_with_logits(out[:, 1:2], col(vuv))
                + self.cfg.loudness_weight * mse_loss(out[:, 2:3], col(loud_unit)))

    def forward(self, m: MidiStream, hlf: FeatureMatrix, singer: SingerEmbedding,
                teacher: Optional[PitchStreams] = None) -> PitchStreams:
        t_len = len(m)
        if len(hlf) != t_len:
            raise AlignmentError(f"midi has {t_len} frames, hlf has {len(hlf)}", module=KIND)
        if hlf.hop != m.hop or hlf.sample_rate != m.sample_rate:
            raise FrameClockError("midi and hlf are on different frame clocks", module=KIND)
        feed = None
        if teacher is not None:
            if len(teacher) != t_len:
                raise AlignmentError(f"midi has {t_len} frames, teacher has {len(teacher)}",
                                     module=KIND)
            feed = teacher_feed(m.notes, teacher.residual.values / SEMITONE,
                                teacher.vuv.values, loudness_to_unit(teacher.loudness.values))
        p = self.params
        out = self.decode(p, self.encode(p, m.notes, hlf.data, singer.vector), m.notes, feed)
        raw = out.data.astype(np.float64)
        vuv = (raw[:, 1] > 0).astype(np.float64)
        gate = (vuv > 0) & (m.notes > 0)
        residual = np.where(gate, raw[:, 0] * SEMITONE, 0.0)
        loud = unit_to_loudness(raw[:, 2])
        return PitchStreams(
            FrameSeries(residual, "residual_logf0", m.hop, m.sample_rate, mask=gate),
            FrameSeries(vuv, "vuv", m.hop, m.sample_rate),
            FrameSeries(loud, "loudness_db", m.hop, m.sample_rate),
        )

    def save(self, path: Union[str, Path]) -> str:
        return save_model(path, KIND, self.params, asdict(self.cfg))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PitchModel":
        params, meta = load_model(path, KIND)
        return cls(PitchConfig(**meta["config"]), params)


def pitch_forward(m: MidiStream, hlf: FeatureMatrix, s: SingerEmbedding, model: PitchModel,
                  teacher: Optional[PitchStreams] = None) -> PitchStreams:
    return model.forward(m, hlf, s, teacher)


# =============================================================================
# TRAINING
# =============================================================================

@dataclass
class PitchItem:
    utt_id: str
    midi: MidiStream
    hlf: FeatureMatrix
    singer: SingerEmbedding
    targets: PitchStreams


def _graph_inputs(item: PitchItem) -> tuple:
    t = item.targets
    mask = t.residual.mask if t.residual.mask is not None else item.midi.notes > 0
    return (item.midi.notes, item.hlf.data, item.singer.vector, t.residual.values / SEMITONE,
            mask.astype(np.float64), t.vuv.values, loudness_to_unit(t.loudness.values))


def prepare_dataset(items: Sequence[PitchItem], cfg: PitchConfig) -> List[Tuple[str, tuple]]:
    """Validate items and drop those whose residual is entirely masked."""
    if not items:
        raise DatasetError("pitch dataset is empty", module=KIND)
    kept, skipped = [], 0
    for item in items:
        t_len = len(item.midi)
        if len(item.hlf) != t_len or len(item.targets) != t_len:
            raise DatasetError(f"stream lengths differ: midi={t_len}, hlf={len(item.hlf)}, "
                               f"targets={len(item.targets)}", module=KIND, utt_id=item.utt_id)
        if item.hlf.dim != cfg.hlf_dim or item.singer.dim != cfg.emb_dim:
            raise DatasetError(f"hlf/embedding dims {item.hlf.dim}/{item.singer.dim} do not match"
                               f" model {cfg.hlf_dim}/{cfg.emb_dim}", module=KIND,
                               utt_id=item.utt_id)
        inputs = _graph_inputs(item)
        if not np.any(inputs[4] > 0):
            skipped += 1
            continue
        kept.append((item.utt_id, inputs))
    if skipped:
        logger.warning("[TRAIN] pitch: skipped %d items with fully masked residual", skipped)
    if not kept:
        raise DatasetError("every pitch item has a fully masked residual", module=KIND)
    return kept


def train_pitch(items: Sequence[PitchItem], cfg: PitchConfig, train: TrainConfig,
                init: Optional[PitchModel] = None,
                held_out: Sequence[PitchItem] = ()) -> Tuple[PitchModel, Dict]:
    """Teacher-forced training on residual (masked MSE) + VUV (BCE) + 0.1 loudness (MSE)."""
    model = init if init is not None else PitchModel(cfg)
    graph_items = prepare_dataset(items, model.cfg)
    eval_items = prepare_dataset(held_out, model.cfg) if held_out else graph_items
    before = evaluate_loss(model.loss, model.params, eval_items)
    logger.info("[TRAIN] pitch: %d items, %d params, initial loss %.5f", len(graph_items),
                model.params.num_parameters(), before)
    history = train_loop(model.loss, model.params, graph_items, train, KIND)
    after = evaluate_loss(model.loss, model.params, eval_items)
    return model, {"history": history, "initial_loss": before, "final_loss": after,
                   "skipped": len(items) - len(graph_items)}
