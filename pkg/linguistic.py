"""
linguistic: Phonemes + Durations -> Frame-Aligned HLFs

    ids -> embedding + positions -> encoder blocks -> length regulator
        -> positions -> decoder blocks -> layer norm -> linear -> T x hlf_dim

There is no duration predictor. Durations always come from the label, and
the output has exactly sum(durations) rows.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from checkpoint import load_model, save_model
from dsp import HOP, SAMPLE_RATE, FeatureMatrix
from errors import AlignmentError, DatasetError, DurationError, FormatError, VocabularyError
from nnet import (
    ParamSet,
    Tensor,
    TrainConfig,
    add_attention,
    add_dense,
    add_layer_norm,
    apply_layer_norm,
    const,
    dense,
    embedding,
    evaluate_loss,
    gather_rows,
    mse_loss,
    multi_head_attention,
    sinusoidal_encoding,
    tanh,
    train_loop,
)

logger = logging.getLogger(__name__)

KIND = "linguistic"


# =============================================================================
# LABELS
# =============================================================================

class Vocabulary:
    """Phoneme symbol <-> id table; ids are 0..n-1."""

    def __init__(self, symbols: Sequence[str]):
        self.symbols = list(symbols)
        self.ids = {s: i for i, s in enumerate(self.symbols)}
        if len(self.ids) != len(self.symbols):
            raise VocabularyError("duplicate phoneme symbol in vocabulary", module=KIND)

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    def encode(self, symbols: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.ids[s] for s in symbols], dtype=np.int64)
        except KeyError as e:
            raise VocabularyError(f"unknown phoneme {e.args[0]!r}", module=KIND)

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.symbols[int(i)] for i in ids]

    @classmethod
    def read(cls, path: Union[str, Path]) -> "Vocabulary":
        pairs = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].strip().isdigit():
                raise FormatError(f"{path}:{lineno}: expected 'symbol<TAB>id'", module=KIND)
            pairs.append((int(parts[1]), parts[0]))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise FormatError(f"{path}: ids must be 0..{len(pairs) - 1}", module=KIND)
        return cls([s for _, s in pairs])

    def write(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{s}\t{i}\n" for i, s in enumerate(self.symbols)),
                        encoding="utf-8")


@dataclass
class ScoreLabel:
    phonemes: np.ndarray
    durations: np.ndarray
    symbols: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64).reshape(-1)
        durations = np.asarray(self.durations).reshape(-1)
        if self.phonemes.size == 0:
            raise AlignmentError("label has no phonemes", module=KIND)
        if durations.size != self.phonemes.size:
            raise AlignmentError(f"{self.phonemes.size} phonemes but {durations.size} durations",
                                 module=KIND)
        for i, d in enumerate(durations):
            if d < 1 or d != int(d):
                raise DurationError(i, d, module=KIND)
        self.durations = durations.astype(np.int64)

    @property
    def total_frames(self) -> int:
        return int(self.durations.sum())

    def check_vocab(self, size: int) -> None:
        bad = np.nonzero((self.phonemes < 0) | (self.phonemes >= size))[0]
        if bad.size:
            raise VocabularyError(f"phoneme id {int(self.phonemes[bad[0]])} at index "
                                  f"{int(bad[0])} outside vocabulary of {size}", module=KIND)


def read_label_tsv(path: Union[str, Path], vocab: Vocabulary) -> ScoreLabel:
    symbols, durations = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            symbols.append(parts[0])
            durations.append(int(parts[1]))
        except (IndexError, ValueError):
            raise FormatError(f"{path}:{lineno}: expected 'phoneme<TAB>duration_frames'",
                              module=KIND)
    return ScoreLabel(vocab.encode(symbols), np.asarray(durations), symbols)


def write_label_tsv(path: Union[str, Path], symbols: Sequence[str],
                    durations: Sequence[int]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{s}\t{int(d)}\n" for s, d in zip(symbols, durations)),
                    encoding="utf-8")


# =============================================================================
# LENGTH REGULATOR
# =============================================================================

def length_regulate(H: Union[Tensor, np.ndarray], durations: Sequence[int]):
    """Repeat row n of H durations[n] times; works on arrays and graph tensors."""
    d = np.asarray(durations).reshape(-1)
    rows = H.shape[0]
    if d.size != rows:
        raise AlignmentError(f"{rows} encoder rows but {d.size} durations", module=KIND)
    bad = np.nonzero(d <= 0)[0]
    if bad.size:
        raise DurationError(int(bad[0]), int(d[bad[0]]), module=KIND)
    index = np.repeat(np.arange(rows), d.astype(np.int64))
    if isinstance(H, Tensor):
        return gather_rows(H, index)
    return np.asarray(H)[index]


# =============================================================================
# MODEL
# =============================================================================

@dataclass
class LinguisticConfig:
    hlf_dim: int = 256
    model_dim: int = 128
    ff_dim: int = 256
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    seed: int = 0


def _add_block(p: ParamSet, name: str, d: int, ff: int) -> None:
    add_layer_norm(p, f"{name}.ln1", d)
    add_attention(p, f"{name}.attn", d)
    add_layer_norm(p, f"{name}.ln2", d)
    add_dense(p, f"{name}.ff1", d, ff)
    add_dense(p, f"{name}.ff2", ff, d)


def _block(p: ParamSet, name: str, x: Tensor, heads: int) -> Tensor:
    x = x + multi_head_attention(p, f"{name}.attn", apply_layer_norm(p, f"{name}.ln1", x), heads)
    h = tanh(dense(p, f"{name}.ff1", apply_layer_norm(p, f"{name}.ln2", x)))
    return x + dense(p, f"{name}.ff2", h)


class LinguisticModel:
    """Encoder / length regulator / decoder over a phoneme vocabulary."""

    def __init__(self, cfg: LinguisticConfig, vocab: Vocabulary,
                 params: Optional[ParamSet] = None):
        self.cfg = cfg
        self.vocab = vocab
        self.params = params if params is not None else self.init_params(cfg, len(vocab))

    @staticmethod
    def init_params(cfg: LinguisticConfig, vocab_size: int) -> ParamSet:
        d = cfg.model_dim
        p = ParamSet(cfg.seed)
        p.add("embed", vocab_size, d, init="normal", std=d ** -0.5)
        for i in range(cfg.enc_layers):
            _add_block(p, f"enc{i}", d, cfg.ff_dim)
        for i in range(cfg.dec_layers):
            _add_block(p, f"dec{i}", d, cfg.ff_dim)
        add_layer_norm(p, "final_ln", d)
        add_dense(p, "out", d, cfg.hlf_dim)
        return p

    def graph(self, p: ParamSet, ids: np.ndarray, durations: np.ndarray) -> Tensor:
        cfg = self.cfg
        d = cfg.model_dim
        x = embedding(p["embed"], ids) * float(np.sqrt(d))
        x = x + const(sinusoidal_encoding(np.arange(len(ids)), d), p.dtype)
        for i in range(cfg.enc_layers):
            x = _block(p, f"enc{i}", x, cfg.heads)
        x = length_regulate(x, durations)
        x = x + const(sinusoidal_encoding(np.arange(x.shape[0]), d), p.dtype)
        for i in range(cfg.dec_layers):
            x = _block(p, f"dec{i}", x, cfg.heads)
        return dense(p, "out", apply_layer_norm(p, "final_ln", x))

    def loss(self, p: ParamSet, ids: np.ndarray, durations: np.ndarray,
             target: np.ndarray) -> Tensor:
        return mse_loss(self.graph(p, ids, durations), target)

    def forward(self, label: ScoreLabel) -> FeatureMatrix:
        label.check_vocab(len(self.vocab))
        out = self.graph(self.params, label.phonemes, label.durations)
        return FeatureMatrix(out.data, HOP, SAMPLE_RATE, "predicted")

    def save(self, path: Union[str, Path]) -> str:
        return save_model(path, KIND, self.params, asdict(self.cfg),
                          {"vocab": self.vocab.symbols})

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LinguisticModel":
        params, meta = load_model(path, KIND)
        return cls(LinguisticConfig(**meta["config"]), Vocabulary(meta["vocab"]), params)


def linguistic_forward(label: ScoreLabel, model: LinguisticModel) -> FeatureMatrix:
    """T x hlf_dim predicted HLFs, T = sum(label.durations)."""
    return model.forward(label)


# =============================================================================
# TRAINING
# =============================================================================

@dataclass
class LinguisticItem:
    utt_id: str
    label: ScoreLabel
    target: FeatureMatrix


def validate_dataset(items: Sequence[LinguisticItem], cfg: LinguisticConfig,
                     vocab: Vocabulary) -> None:
    if not items:
        raise DatasetError("linguistic dataset is empty", module=KIND)
    for item in items:
        if item.label.total_frames != len(item.target):
            raise DatasetError(f"durations sum to {item.label.total_frames} but target has "
                               f"{len(item.target)} frames", module=KIND, utt_id=item.utt_id)
        if item.target.dim != cfg.hlf_dim:
            raise DatasetError(f"target has {item.target.dim} dims, model expects {cfg.hlf_dim}",
                               module=KIND, utt_id=item.utt_id)
        try:
            item.label.check_vocab(len(vocab))
        except VocabularyError as e:
            raise e.with_context(utt_id=item.utt_id)


def _graph_items(items: Sequence[LinguisticItem]) -> List[Tuple[str, tuple]]:
    return [(it.utt_id, (it.label.phonemes, it.label.durations, it.target.data)) for it in items]


def train_linguistic(items: Sequence[LinguisticItem], cfg: LinguisticConfig,
                     train: TrainConfig, vocab: Vocabulary,
                     init: Optional[LinguisticModel] = None,
                     held_out: Sequence[LinguisticItem] = ()) -> Tuple[LinguisticModel, Dict]:
    """
    Fit the model to (label, target HLF) pairs with MSE.

    Starting from init continues its parameters and Adam state. Returns the
    model and a report with the loss curve and held-out loss before/after.
    """
    model = init if init is not None else LinguisticModel(cfg, vocab)
    validate_dataset(items, model.cfg, vocab)
    if held_out:
        validate_dataset(held_out, model.cfg, vocab)
    if init is not None and init.vocab != vocab:
        raise VocabularyError("initial checkpoint uses a different phoneme vocabulary",
                              module=KIND)
    eval_items = _graph_items(held_out or items)
    before = evaluate_loss(model.loss, model.params, eval_items)
    logger.info("[TRAIN] linguistic: %d items, %d params, initial loss %.5f", len(items),
                model.params.num_parameters(), before)
    history = train_loop(model.loss, model.params, _graph_items(items), train, KIND)
    after = evaluate_loss(model.loss, model.params, eval_items)
    return model, {"history": history, "initial_loss": before, "final_loss": after}
