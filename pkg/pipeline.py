"""
pipeline: End-to-End Commands

    corpus-gen        synthetic corpus -> <corpus>/
    extract           manifest -> per-utterance FTR1 features + singers.json
    flatten-midi      re-derive the note track from stored f0 (fusion or quantizer)
    train-linguistic  label -> HLF model
    train-pitch       MIDI + HLF + singer -> residual/VUV/loudness model
    train-synth       conditioner -> log-mel diffusion model
    synth             label + MIDI + singer -> wav
    resynth           wav -> extracted conditioner -> wav
    inpaint           wav + edit script -> wav
    eval              generated vs reference -> metric TSV

Intermediate features always go to disk as FTR1 so every stage can be
inspected and rerun on its own. Each run writes run_manifest.json into its
output directory and appends to the audit log.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import metadata
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import PipelineConfig, TrainSection, config_hash
from corpus import (
    FileHlfProvider,
    HlfProvider,
    ManifestEntry,
    PseudoHlfExtractor,
    gen_corpus,
    read_manifest,
)
from diffusion import (
    Conditioner,
    DiffusionModel,
    SynthItem,
    build_conditioner,
    sample,
    train_synth,
)
from dsp import (
    F0Estimator,
    FeatureMatrix,
    FileF0Estimator,
    FrameSeries,
    Waveform,
    YinEstimator,
    check_frame_clock,
    extract_loudness,
    frame_count,
    mel_spectrogram,
    read_wav,
    write_wav,
)
from errors import AlignmentError, ConfigError, DatasetError, SVSError
from ftr1 import (
    FtrMeta,
    read_ftr1,
    read_matrix,
    read_series,
    write_ftr1,
    write_matrix,
    write_series,
)
from inpaint import (
    REPLACE,
    EditPlan,
    StreamBundle,
    build_replacement,
    read_edit_script,
    splice_streams,
)
from linguistic import (
    LinguisticItem,
    LinguisticModel,
    Vocabulary,
    linguistic_forward,
    read_label_tsv,
    train_linguistic,
)
from metrics import (
    MetricValue,
    cepstra,
    f0_corr,
    f0_rmse_cents,
    f0_rmse_hz,
    mcd,
    token_error_rate,
    tokenize,
    write_report,
)
from midi import (
    KeyStats,
    MidiStream,
    flatten_midi,
    key_shift_mv,
    masked_fraction,
    pooled_key_stats,
    read_midi_tsv,
    residual_logf0,
    segment_quantize,
    write_midi_tsv,
)
from pitch import (
    BaselineEmbedder,
    FileEmbedder,
    PitchItem,
    PitchModel,
    PitchStreams,
    SingerEmbedder,
    SingerEmbedding,
    average_embeddings,
    compose_f0,
    pitch_forward,
    read_embedding,
    train_pitch,
    write_embedding,
)
from runlog import RunRecord, append_audit, write_manifest
from vocoder import invert_mel

logger = logging.getLogger(__name__)

try:
    PACKAGE_VERSION = metadata.version("decomposed-svs")
except metadata.PackageNotFoundError:
    PACKAGE_VERSION = "0.1.0"

SINGERS_FILE = "singers.json"
MODEL_FILES = {"linguistic": "linguistic.skcp", "pitch": "pitch.skcp",
               "diffusion": "diffusion.skcp"}


@dataclass
class RunFlags:
    seed: Optional[int] = None
    steps: Optional[int] = None
    singer: Optional[str] = None
    edit_script: Optional[str] = None
    out: Optional[str] = None
    jobs: int = 1
    init: Optional[str] = None
    utt: Optional[str] = None
    label: Optional[str] = None
    midi: Optional[str] = None
    wav: Optional[str] = None
    ref: Optional[str] = None
    gen_dir: Optional[str] = None
    ref_text: Optional[str] = None
    hyp_text: Optional[str] = None
    unit: str = "char"

    def recorded(self) -> Dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def apply_overrides(cfg: PipelineConfig, flags: RunFlags) -> PipelineConfig:
    """--seed reseeds every stage; --jobs also drives corpus generation."""
    if flags.seed is not None:
        s = flags.seed
        cfg = replace(
            cfg, seed=s,
            train=TrainSection(replace(cfg.train.linguistic, seed=s),
                               replace(cfg.train.pitch, seed=s),
                               replace(cfg.train.synth, seed=s)),
            corpus=replace(cfg.corpus, seed=s))
    if flags.jobs and flags.jobs > 1:
        cfg = replace(cfg, corpus=replace(cfg.corpus, jobs=flags.jobs))
    return cfg


# =============================================================================
# PROVIDERS
# =============================================================================

@dataclass
class Providers:
    f0: F0Estimator
    hlf: HlfProvider
    singer: SingerEmbedder


def make_providers(cfg: PipelineConfig) -> Providers:
    a = cfg.audio
    f0 = (FileF0Estimator(Path(a.f0_dir)) if a.f0_estimator == "file"
          else YinEstimator(fmin=a.fmin, fmax=a.fmax))
    hlf = (FileHlfProvider(Path(cfg.hlf.directory)) if cfg.hlf.provider == "file"
           else PseudoHlfExtractor(cfg.hlf_dim, a.hop))
    singer = (FileEmbedder(Path(cfg.singer.directory)) if cfg.singer.provider == "file"
              else BaselineEmbedder(cfg.emb_dim))
    return Providers(f0, hlf, singer)


# =============================================================================
# FEATURES
# =============================================================================

@dataclass
class UttFeatures:
    utt_id: str
    singer_id: str
    f0: FrameSeries
    vuv: FrameSeries
    loudness: FrameSeries
    mel: FeatureMatrix
    hlf: FeatureMatrix
    embedding: SingerEmbedding
    midi: MidiStream
    residual: FrameSeries

    def __len__(self) -> int:
        return len(self.f0)

    def conditioner(self, singer: Optional[SingerEmbedding] = None) -> Conditioner:
        return build_conditioner(self.hlf, self.f0, self.vuv, self.loudness,
                                 singer or self.embedding)

    def pitch_targets(self) -> PitchStreams:
        return PitchStreams(self.residual, self.vuv, self.loudness)


def note_track(f0: FrameSeries, vuv: FrameSeries, score: Optional[MidiStream],
               cfg: PipelineConfig) -> MidiStream:
    """Flattened MIDI per midi.source; without a score the quantizer is used."""
    q = segment_quantize(f0, vuv, cfg.midi.min_note_frames)
    if score is None or cfg.midi.source == "quantizer":
        return q
    if len(score) != len(f0):
        raise AlignmentError(f"score MIDI has {len(score)} frames, audio has {len(f0)}",
                             module="pipeline")
    if cfg.midi.source == "file":
        return score
    return flatten_midi(f0, score, q)


def extract_utterance(wave: Waveform, utt_id: str, singer_id: str, cfg: PipelineConfig,
                      providers: Providers, score: Optional[MidiStream] = None) -> UttFeatures:
    hop = cfg.audio.hop
    try:
        f0, vuv = providers.f0.estimate(wave, hop, utt_id)
        loud = extract_loudness(wave, hop)
        mel = mel_spectrogram(wave, cfg.mel, hop)
        hlf = providers.hlf.extract(wave, utt_id)
        t_len = frame_count(len(wave), hop)
        check_frame_clock(f0, vuv, loud, mel, hlf, hop=hop, sample_rate=cfg.audio.sample_rate)
        if score is not None:
            check_frame_clock(score, hop=hop, sample_rate=cfg.audio.sample_rate, what="score")
        lengths = {"f0": len(f0), "loudness": len(loud), "mel": len(mel), "hlf": len(hlf)}
        bad = {k: v for k, v in lengths.items() if v != t_len}
        if bad:
            raise AlignmentError(f"expected {t_len} frames, got {bad}", module="pipeline")
        if hlf.dim != cfg.hlf_dim:
            raise AlignmentError(f"hlf has {hlf.dim} dims, config expects {cfg.hlf_dim}",
                                 module="pipeline")
        embedding = providers.singer.embed(mel, utt_id)
        midi = note_track(f0, vuv, score, cfg)
        residual = residual_logf0(f0, midi)
    except SVSError as e:
        raise e.with_context(utt_id=utt_id)
    return UttFeatures(utt_id, singer_id, f0, vuv, loud, mel, hlf, embedding, midi, residual)


@dataclass
class SingerInfo:
    key_stats: KeyStats
    embedding: SingerEmbedding
    utterances: List[str] = field(default_factory=list)


class FeatureStore:
    """<root>/<utt>.<name>.ftr files plus singers.json."""

    NAMES = ("f0", "vuv", "loud", "mel", "hlf", "emb", "resid", "mask", "cond")

    def __init__(self, root: Union[str, Path], cfg: PipelineConfig):
        self.root = Path(root)
        self.cfg = cfg

    def path(self, utt_id: str, name: str) -> Path:
        return self.root / f"{utt_id}.{name}.ftr"

    def midi_path(self, utt_id: str) -> Path:
        return self.root / f"{utt_id}.midi.tsv"

    @property
    def singers_path(self) -> Path:
        return self.root / SINGERS_FILE

    def write(self, feats: UttFeatures) -> List[Path]:
        u = feats.utt_id
        write_series(self.path(u, "f0"), feats.f0)
        write_series(self.path(u, "vuv"), feats.vuv)
        write_series(self.path(u, "loud"), feats.loudness)
        write_matrix(self.path(u, "mel"), feats.mel, "log_mel")
        write_matrix(self.path(u, "hlf"), feats.hlf, "hlf")
        write_embedding(self.path(u, "emb"), feats.embedding)
        self.write_notes(feats)
        write_matrix(self.path(u, "cond"),
                     FeatureMatrix(feats.conditioner().matrix(), feats.mel.hop,
                                   feats.mel.sample_rate, "conditioner"), "conditioner")
        return [self.path(u, n) for n in self.NAMES] + [self.midi_path(u)]

    def write_notes(self, feats: UttFeatures) -> None:
        u = feats.utt_id
        write_midi_tsv(self.midi_path(u), feats.midi)
        write_series(self.path(u, "resid"), feats.residual)
        mask = feats.residual.mask.astype(np.float32).reshape(-1, 1)
        write_ftr1(self.path(u, "mask"), mask,
                   FtrMeta("mask", feats.residual.hop, feats.residual.sample_rate))

    def read(self, utt_id: str, singer_id: str = "") -> UttFeatures:
        a = self.cfg.audio
        try:
            f0 = read_series(self.path(utt_id, "f0"), "f0_hz")
            vuv = read_series(self.path(utt_id, "vuv"), "vuv")
            loud = read_series(self.path(utt_id, "loud"), "loudness_db")
            mel = read_matrix(self.path(utt_id, "mel"), "log_mel")
            hlf = read_matrix(self.path(utt_id, "hlf"), "hlf")
            emb = read_embedding(self.path(utt_id, "emb"))
            midi = read_midi_tsv(self.midi_path(utt_id), "flattened", a.hop, a.sample_rate)
            resid_values = read_series(self.path(utt_id, "resid"), "residual_logf0")
            mask, _ = read_ftr1(self.path(utt_id, "mask"))
        except FileNotFoundError as e:
            raise DatasetError(f"missing feature file {e.filename}; run extract first",
                               module="pipeline", utt_id=utt_id)
        except SVSError as e:
            raise e.with_context(utt_id=utt_id)
        check_frame_clock(f0, vuv, loud, mel, hlf, resid_values, hop=a.hop,
                          sample_rate=a.sample_rate, what=f"features of {utt_id}")
        residual = FrameSeries(resid_values.values, "residual_logf0", a.hop, a.sample_rate,
                               mask=mask[:, 0] > 0.5)
        return UttFeatures(utt_id, singer_id, f0, vuv, loud, mel, hlf, emb, midi, residual)

    def write_singers(self, singers: Dict[str, SingerInfo]) -> Path:
        data = {sid: {"key_stats": info.key_stats.to_dict(),
                      "embedding": [float(v) for v in info.embedding.vector],
                      "utterances": list(info.utterances)}
                for sid, info in sorted(singers.items())}
        self.root.mkdir(parents=True, exist_ok=True)
        self.singers_path.write_text(json.dumps({"singers": data}, indent=2, sort_keys=True)
                                     + "\n", encoding="utf-8")
        return self.singers_path

    def read_singers(self) -> Dict[str, SingerInfo]:
        if not self.singers_path.exists():
            raise DatasetError(f"{self.singers_path} not found; run extract first",
                               module="pipeline")
        data = json.loads(self.singers_path.read_text(encoding="utf-8"))["singers"]
        return {sid: SingerInfo(KeyStats.from_dict(d["key_stats"]),
                                SingerEmbedding(np.asarray(d["embedding"]), "file"),
                                list(d.get("utterances", [])))
                for sid, d in data.items()}


def singer_table(feats: Sequence[UttFeatures]) -> Dict[str, SingerInfo]:
    """KeyStats over each singer's flattened MIDI, embedding averaged over their utterances."""
    grouped: Dict[str, List[UttFeatures]] = {}
    for f in feats:
        grouped.setdefault(f.singer_id, []).append(f)
    table = {}
    for sid, items in grouped.items():
        try:
            stats = pooled_key_stats([f.midi for f in items])
        except SVSError as e:
            raise e.with_context(module="pipeline", utt_id=items[0].utt_id)
        table[sid] = SingerInfo(stats, average_embeddings([f.embedding for f in items]),
                                [f.utt_id for f in items])
    return table


def report_masking(feats: Sequence[UttFeatures], limit: float) -> float:
    voiced = masked = 0
    for f in feats:
        frac = masked_fraction(f.f0, f.midi)
        n_voiced = int(np.sum(f.f0.values > 0))
        voiced += n_voiced
        masked += frac * n_voiced
        if frac > limit:
            logger.warning("[EXTRACT] %s: %.1f%% of voiced frames sit on rest notes",
                           f.utt_id, 100 * frac)
    overall = masked / voiced if voiced else 0.0
    logger.info("[EXTRACT] masked residual frames: %.2f%% of voiced", 100 * overall)
    if overall > limit:
        logger.warning("[EXTRACT] corpus masked fraction %.3f exceeds %.3f", overall, limit)
    return overall


# =============================================================================
# RUN CONTEXT
# =============================================================================

@dataclass
class RunContext:
    cfg: PipelineConfig
    flags: RunFlags
    out: Path
    record: RunRecord
    outputs: List[Path] = field(default_factory=list)

    @property
    def corpus_dir(self) -> Path:
        return Path(self.cfg.paths.corpus)

    @property
    def store(self) -> FeatureStore:
        return FeatureStore(self.cfg.paths.features, self.cfg)

    def manifest(self) -> List[ManifestEntry]:
        path = self.corpus_dir / "manifest.tsv"
        if not path.exists():
            raise DatasetError(f"{path} not found; run corpus-gen or point paths.corpus at a "
                               f"corpus", module="pipeline")
        self.record.add_inputs([path])
        return read_manifest(path)

    def entry(self, utt_id: str) -> ManifestEntry:
        for e in self.manifest():
            if e.utt_id == utt_id:
                return e
        raise DatasetError(f"utterance {utt_id!r} not in the corpus manifest", module="pipeline")

    def vocab(self) -> Vocabulary:
        path = self.corpus_dir / "vocab.tsv"
        self.record.add_inputs([path])
        return Vocabulary.read(path)

    def model_path(self, kind: str) -> Path:
        return Path(self.cfg.paths.models) / MODEL_FILES[kind]

    def emit(self, *paths: Path) -> None:
        self.outputs.extend(Path(p) for p in paths)


def _check_model(kind: str, cfg: PipelineConfig, model) -> None:
    want = {"hlf_dim": cfg.hlf_dim}
    if kind in ("pitch", "diffusion"):
        want["emb_dim"] = cfg.emb_dim
    if kind == "diffusion":
        want["n_mels"] = cfg.mel.n_mels
    have = {k: getattr(model.cfg, k) for k in want}
    if have != want:
        raise ConfigError(f"{kind} checkpoint has {have}, config expects {want}",
                          module="pipeline")


def load_models(ctx: RunContext, *kinds: str) -> Dict[str, object]:
    loaders = {"linguistic": LinguisticModel.load, "pitch": PitchModel.load,
               "diffusion": DiffusionModel.load}
    models = {}
    for kind in kinds:
        path = ctx.model_path(kind)
        if not path.exists():
            command = "train-synth" if kind == "diffusion" else f"train-{kind}"
            raise DatasetError(f"{path} not found; run {command} first", module="pipeline")
        ctx.record.add_inputs([path])
        models[kind] = loaders[kind](path)
        _check_model(kind, ctx.cfg, models[kind])
    return models


def _singer(ctx: RunContext, singer_id: Optional[str]) -> Optional[SingerInfo]:
    if not singer_id:
        return None
    singers = ctx.store.read_singers()
    if singer_id not in singers:
        raise DatasetError(f"unknown singer {singer_id!r}; known: {', '.join(sorted(singers))}",
                           module="pipeline")
    ctx.record.add_inputs([ctx.store.singers_path])
    return singers[singer_id]


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_corpus_gen(ctx: RunContext) -> None:
    entries = gen_corpus(ctx.cfg.corpus, ctx.out, ctx.cfg.audio.hop, ctx.cfg.audio.sample_rate)
    ctx.emit(ctx.out / "manifest.tsv", ctx.out / "vocab.tsv")
    for e in entries:
        ctx.emit(e.wav_path, e.label_path, e.midi_path)
    print(f"[CORPUS] {len(entries)} utterances written to {ctx.out}")


def cmd_extract(ctx: RunContext) -> None:
    cfg = ctx.cfg
    entries = ctx.manifest()
    providers = make_providers(cfg)
    store = FeatureStore(ctx.out, cfg)

    def work(entry: ManifestEntry) -> UttFeatures:
        wave = read_wav(entry.wav_path, cfg.audio.sample_rate)
        score = (read_midi_tsv(entry.midi_path, "file", cfg.audio.hop, cfg.audio.sample_rate)
                 if entry.midi_path.exists() else None)
        return extract_utterance(wave, entry.utt_id, entry.singer_id, cfg, providers, score)

    with ThreadPoolExecutor(max_workers=max(1, ctx.flags.jobs)) as pool:
        feats = list(pool.map(work, entries))
    ctx.record.add_inputs([e.wav_path for e in entries] + [e.midi_path for e in entries])
    for f in feats:
        ctx.emit(*store.write(f))
    report_masking(feats, cfg.midi.max_masked_fraction)
    ctx.emit(store.write_singers(singer_table(feats)))
    print(f"[EXTRACT] {len(feats)} utterances, {len({f.singer_id for f in feats})} singers "
          f"-> {ctx.out}")


def cmd_flatten_midi(ctx: RunContext) -> None:
    cfg = ctx.cfg
    store = FeatureStore(ctx.out, cfg)
    feats = []
    for entry in ctx.manifest():
        f = store.read(entry.utt_id, entry.singer_id)
        score = (read_midi_tsv(entry.midi_path, "file", cfg.audio.hop, cfg.audio.sample_rate)
                 if entry.midi_path.exists() else None)
        try:
            f.midi = note_track(f.f0, f.vuv, score, cfg)
            f.residual = residual_logf0(f.f0, f.midi)
        except SVSError as e:
            raise e.with_context(utt_id=entry.utt_id)
        store.write_notes(f)
        ctx.emit(store.midi_path(f.utt_id), store.path(f.utt_id, "resid"),
                 store.path(f.utt_id, "mask"))
        feats.append(f)
    report_masking(feats, cfg.midi.max_masked_fraction)
    ctx.emit(store.write_singers(singer_table(feats)))
    print(f"[MIDI] {cfg.midi.source} note tracks for {len(feats)} utterances")


def _write_report(ctx: RunContext, name: str, report: Dict) -> None:
    path = ctx.out / f"{name}_report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    ctx.emit(path)


def _save(ctx: RunContext, kind: str, model) -> None:
    path = ctx.out / MODEL_FILES[kind]
    digest = model.save(path)
    ctx.emit(path)
    print(f"[TRAIN] {kind} checkpoint {path} sha256={digest[:12]}")


def _init(ctx: RunContext, kind: str, loader: Callable):
    if not ctx.flags.init:
        return None
    ctx.record.add_inputs([ctx.flags.init])
    model = loader(ctx.flags.init)
    _check_model(kind, ctx.cfg, model)
    logger.info("[TRAIN] %s: continuing from %s", kind, ctx.flags.init)
    return model


def cmd_train_linguistic(ctx: RunContext) -> None:
    cfg = ctx.cfg
    vocab = ctx.vocab()
    store = ctx.store
    items = []
    for e in ctx.manifest():
        label = read_label_tsv(e.label_path, vocab)
        items.append(LinguisticItem(e.utt_id, label, read_matrix(store.path(e.utt_id, "hlf"),
                                                                 "hlf")))
    init = _init(ctx, "linguistic", LinguisticModel.load)
    model, report = train_linguistic(items, init.cfg if init else cfg.linguistic,
                                     cfg.train.linguistic, vocab, init=init)
    _save(ctx, "linguistic", model)
    _write_report(ctx, "linguistic", report)


def cmd_train_pitch(ctx: RunContext) -> None:
    cfg = ctx.cfg
    store = ctx.store
    singers = store.read_singers()
    items = []
    for e in ctx.manifest():
        f = store.read(e.utt_id, e.singer_id)
        items.append(PitchItem(e.utt_id, f.midi, f.hlf, singers[e.singer_id].embedding,
                               f.pitch_targets()))
    init = _init(ctx, "pitch", PitchModel.load)
    model, report = train_pitch(items, init.cfg if init else cfg.pitch, cfg.train.pitch,
                                init=init)
    _save(ctx, "pitch", model)
    _write_report(ctx, "pitch", report)


def cmd_train_synth(ctx: RunContext) -> None:
    cfg = ctx.cfg
    store = ctx.store
    singers = store.read_singers()
    items = []
    for e in ctx.manifest():
        f = store.read(e.utt_id, e.singer_id)
        items.append(SynthItem(e.utt_id, f.mel, f.conditioner(singers[e.singer_id].embedding)))
    init = _init(ctx, "diffusion", DiffusionModel.load)
    model, report = train_synth(items, init.cfg if init else cfg.denoiser,
                                init.sched_cfg if init else cfg.schedule, cfg.train.synth,
                                init=init)
    _save(ctx, "diffusion", model)
    _write_report(ctx, "diffusion", report)


def render(ctx: RunContext, name: str, cond: Conditioner, f0: FrameSeries,
           model: DiffusionModel) -> Path:
    """Sample a mel for the conditioner, vocode it, and persist everything."""
    cfg = ctx.cfg
    mel = sample(cond, model, seed=cfg.seed, steps=ctx.flags.steps)
    wave = invert_mel(mel, f0, cond.vuv, cfg.vocoder.mode, cfg.mel)
    hop, sr = cond.hlf.hop, cond.hlf.sample_rate
    paths = {
        "cond": ctx.out / f"{name}.cond.ftr",
        "mel": ctx.out / f"{name}.mel.ftr",
        "f0": ctx.out / f"{name}.f0.ftr",
        "vuv": ctx.out / f"{name}.vuv.ftr",
        "wav": ctx.out / f"{name}.wav",
    }
    write_matrix(paths["cond"], FeatureMatrix(cond.matrix(), hop, sr, "conditioner"),
                 "conditioner")
    write_matrix(paths["mel"], mel, "log_mel")
    write_series(paths["f0"], f0)
    write_series(paths["vuv"], cond.vuv)
    write_wav(paths["wav"], wave)
    ctx.emit(*paths.values())
    return paths["wav"]


def synthesize(label, midi: MidiStream, singer: SingerEmbedding,
               models: Dict[str, object]) -> Tuple[Conditioner, FrameSeries]:
    """label + MIDI + singer -> conditioner and the composed F0 contour."""
    if label.total_frames != len(midi):
        raise AlignmentError(f"label covers {label.total_frames} frames, MIDI has {len(midi)}",
                             module="pipeline")
    hlf = linguistic_forward(label, models["linguistic"])
    streams = pitch_forward(midi, hlf, singer, models["pitch"])
    f0 = compose_f0(midi, streams.residual, streams.vuv)
    return build_conditioner(hlf, f0, streams.vuv, streams.loudness, singer), f0


def cmd_synth(ctx: RunContext) -> None:
    cfg, flags = ctx.cfg, ctx.flags
    models = load_models(ctx, "linguistic", "pitch", "diffusion")
    entry = ctx.entry(flags.utt) if flags.utt else None
    label_path = Path(flags.label) if flags.label else (entry.label_path if entry else None)
    midi_path = Path(flags.midi) if flags.midi else (entry.midi_path if entry else None)
    if label_path is None or midi_path is None:
        raise ConfigError("synth needs --utt, or both --label and --midi", module="pipeline")
    ctx.record.add_inputs([label_path, midi_path])
    label = read_label_tsv(label_path, models["linguistic"].vocab)
    midi = read_midi_tsv(midi_path, "file", cfg.audio.hop, cfg.audio.sample_rate)

    singer_id = flags.singer or (entry.singer_id if entry else None)
    info = _singer(ctx, singer_id)
    if info is None:
        raise ConfigError("synth needs --singer when no corpus utterance is given",
                          module="pipeline")
    if flags.singer:
        midi = key_shift_mv(midi, info.key_stats, cfg.midi.integer_key_shift)
        logger.info("[SYNTH] key shifted to %s (mean %.2f, std %.2f)", singer_id,
                    info.key_stats.mean, info.key_stats.std)
    cond, f0 = synthesize(label, midi, info.embedding, models)
    name = flags.utt or label_path.stem
    wav = render(ctx, name, cond, f0, models["diffusion"])
    print(f"[SYNTH] {wav} ({len(cond)} frames, singer {singer_id})")


def _source_features(ctx: RunContext) -> Tuple[UttFeatures, Optional[MidiStream]]:
    cfg, flags = ctx.cfg, ctx.flags
    entry = ctx.entry(flags.utt) if flags.utt else None
    wav_path = Path(flags.wav) if flags.wav else (entry.wav_path if entry else None)
    if wav_path is None:
        raise ConfigError("needs --utt or --wav", module="pipeline")
    midi_path = Path(flags.midi) if flags.midi else (entry.midi_path if entry else None)
    ctx.record.add_inputs([wav_path] + ([midi_path] if midi_path else []))
    score = (read_midi_tsv(midi_path, "file", cfg.audio.hop, cfg.audio.sample_rate)
             if midi_path and midi_path.exists() else None)
    utt_id = flags.utt or wav_path.stem
    wave = read_wav(wav_path, cfg.audio.sample_rate)
    feats = extract_utterance(wave, utt_id, entry.singer_id if entry else "", cfg,
                              make_providers(cfg), score)
    return feats, score


def cmd_resynth(ctx: RunContext) -> None:
    feats, _ = _source_features(ctx)
    info = _singer(ctx, ctx.flags.singer)
    singer = info.embedding if info else feats.embedding
    model = load_models(ctx, "diffusion")["diffusion"]
    wav = render(ctx, f"{feats.utt_id}.resynth", feats.conditioner(singer), feats.f0, model)
    print(f"[RESYNTH] {wav}")


def inpaint_conditioner(feats: UttFeatures, plan: EditPlan, labels: Dict[str, object],
                        notes: MidiStream, singer: SingerEmbedding, models: Dict[str, object],
                        crossfade_frames: int = 0,
                        replacement_midi: Optional[Dict[str, MidiStream]] = None) -> Conditioner:
    """
    Splice predicted streams for each REPLACE segment into the extracted ones.

    A replacement sings the MIDI given for its id in replacement_midi; ids
    without one keep the melody, i.e. the slice of `notes` over the segment.
    """
    replacement_midi = replacement_midi or {}
    if len(notes) != len(feats):
        raise AlignmentError(f"note track has {len(notes)} frames, audio has {len(feats)}",
                             module="inpaint", utt_id=feats.utt_id)
    orig = StreamBundle.from_conditioner(feats.conditioner(singer))
    repl = {}
    for seg in plan:
        if seg.source != REPLACE or seg.replacement_id in repl:
            continue
        if seg.replacement_id not in labels:
            raise DatasetError(f"no label for replacement {seg.replacement_id!r}",
                               module="inpaint", utt_id=feats.utt_id, frame=seg.start)
        segment = replacement_midi.get(seg.replacement_id)
        if segment is None:
            segment = MidiStream(notes.notes[seg.start:seg.end], notes.tag, notes.hop,
                                 notes.sample_rate)
        try:
            repl[seg.replacement_id] = build_replacement(labels[seg.replacement_id], segment,
                                                         singer, models["linguistic"],
                                                         models["pitch"])
        except SVSError as e:
            raise e.with_context(utt_id=feats.utt_id, frame=seg.start)
    try:
        spliced = splice_streams(orig, repl, plan, crossfade_frames)
    except SVSError as e:
        raise e.with_context(utt_id=feats.utt_id)
    return spliced.to_conditioner(singer)


def cmd_inpaint(ctx: RunContext) -> None:
    cfg, flags = ctx.cfg, ctx.flags
    if not flags.edit_script:
        raise ConfigError("inpaint needs --edit-script", module="pipeline")
    script = Path(flags.edit_script)
    ctx.record.add_inputs([script])
    plan = read_edit_script(script)
    feats, score = _source_features(ctx)
    info = _singer(ctx, flags.singer)
    singer = info.embedding if info else feats.embedding

    ids = sorted(set(plan.replacement_ids()))
    kinds = ("linguistic", "pitch", "diffusion") if ids else ("diffusion",)
    models = load_models(ctx, *kinds)
    labels, midi = {}, {}
    for rid in ids:
        entry = cfg.inpaint.replacements.get(rid)
        path = Path(entry.label) if entry else script.parent / f"{rid}.tsv"
        try:
            labels[rid] = read_label_tsv(path, models["linguistic"].vocab)
            if entry and entry.midi:
                midi[rid] = read_midi_tsv(entry.midi, "file", cfg.audio.hop,
                                          cfg.audio.sample_rate)
        except FileNotFoundError as e:
            raise DatasetError(f"replacement {rid!r}: {e.filename} not found", module="pipeline")
        ctx.record.add_inputs([path] + ([Path(entry.midi)] if rid in midi else []))
    cond = inpaint_conditioner(feats, plan, labels, score if score is not None else feats.midi,
                               singer, models, cfg.inpaint.crossfade_frames, midi)
    voiced = cond.vuv.values > 0.5
    f0 = FrameSeries(np.where(voiced, np.exp(cond.logf0.values), 0.0), "f0_hz",
                     cond.hlf.hop, cond.hlf.sample_rate)
    wav = render(ctx, f"{feats.utt_id}.inpaint", cond, f0, models["diffusion"])
    print(f"[INPAINT] {wav} ({len(ids)} replaced segment(s))")


def evaluate_pair(gen: Waveform, ref: Waveform, cfg: PipelineConfig,
                  name: str = "") -> Tuple[List[MetricValue], Tuple[np.ndarray, ...]]:
    hop = cfg.audio.hop
    c_gen = cepstra(mel_spectrogram(gen, cfg.mel, hop))
    c_ref = cepstra(mel_spectrogram(ref, cfg.mel, hop))
    yin = YinEstimator(fmin=cfg.audio.fmin, fmax=cfg.audio.fmax)
    f_gen, _ = yin.estimate(gen, hop)
    f_ref, _ = yin.estimate(ref, hop)
    try:
        value = mcd(c_gen, c_ref)
        prefix = f"{name}/" if name else ""
        rows = [MetricValue(f"{prefix}mcd", value, "dB", len(c_ref))]
        for metric in (f0_rmse_cents, f0_rmse_hz, f0_corr):
            v = metric(f_gen, f_ref)
            rows.append(replace(v, name=prefix + v.name))
    except SVSError as e:
        raise e.with_context(utt_id=name or None)
    return rows, (c_gen, c_ref, f_gen.values, f_ref.values)


def cmd_eval(ctx: RunContext) -> None:
    cfg, flags = ctx.cfg, ctx.flags
    pairs: List[Tuple[str, Path, Path]] = []
    if flags.gen_dir:
        for e in ctx.manifest():
            gen = Path(flags.gen_dir) / f"{e.utt_id}.wav"
            if gen.exists():
                pairs.append((e.utt_id, gen, e.wav_path))
    elif flags.wav:
        ref = Path(flags.ref) if flags.ref else (ctx.entry(flags.utt).wav_path if flags.utt
                                                 else None)
        if ref is None:
            raise ConfigError("eval --wav needs --ref or --utt", module="pipeline")
        pairs.append((flags.utt or Path(flags.wav).stem, Path(flags.wav), ref))

    rows: List[MetricValue] = []
    pooled = []
    for name, gen, ref in pairs:
        ctx.record.add_inputs([gen, ref])
        utt_rows, arrays = evaluate_pair(read_wav(gen, cfg.audio.sample_rate),
                                         read_wav(ref, cfg.audio.sample_rate), cfg, name)
        rows.extend(utt_rows)
        pooled.append(arrays)
    if len(pooled) > 1:
        hop, sr = cfg.audio.hop, cfg.audio.sample_rate
        c_gen, c_ref, f_gen, f_ref = (np.concatenate(parts, axis=0) for parts in zip(*pooled))
        fg, fr = FrameSeries(f_gen, "f0_hz", hop, sr), FrameSeries(f_ref, "f0_hz", hop, sr)
        rows.append(MetricValue("mcd", mcd(c_gen, c_ref), "dB", len(c_ref)))
        rows.extend([f0_rmse_cents(fg, fr), f0_rmse_hz(fg, fr), f0_corr(fg, fr)])

    if flags.ref_text and flags.hyp_text:
        ref_tokens = tokenize(Path(flags.ref_text).read_text(encoding="utf-8"), flags.unit)
        hyp_tokens = tokenize(Path(flags.hyp_text).read_text(encoding="utf-8"), flags.unit)
        ctx.record.add_inputs([flags.ref_text, flags.hyp_text])
        rows.append(MetricValue("cer" if flags.unit == "char" else "wer",
                                token_error_rate(ref_tokens, hyp_tokens), "ratio",
                                len(ref_tokens)))
    if not rows:
        raise ConfigError("eval needs --wav, --gen-dir, or --ref-text with --hyp-text",
                          module="pipeline")
    path = ctx.out / "metrics.tsv"
    write_report(path, rows)
    ctx.emit(path)
    for r in rows:
        print(f"[EVAL] {r.name}\t{r.value:.4f} {r.unit}\t(frames={r.frames})")


COMMANDS: Dict[str, Callable[[RunContext], None]] = {
    "corpus-gen": cmd_corpus_gen,
    "extract": cmd_extract,
    "flatten-midi": cmd_flatten_midi,
    "train-linguistic": cmd_train_linguistic,
    "train-pitch": cmd_train_pitch,
    "train-synth": cmd_train_synth,
    "synth": cmd_synth,
    "resynth": cmd_resynth,
    "inpaint": cmd_inpaint,
    "eval": cmd_eval,
}

DEFAULT_OUT = {
    "corpus-gen": "corpus",
    "extract": "features",
    "flatten-midi": "features",
    "train-linguistic": "models",
    "train-pitch": "models",
    "train-synth": "models",
}


def run(command: str, cfg: PipelineConfig, flags: Optional[RunFlags] = None) -> RunRecord:
    """Run one command, then write its manifest and audit entry."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}", module="pipeline")
    flags = flags or RunFlags()
    cfg = apply_overrides(cfg, flags)
    cfg.validate()
    out = Path(flags.out or getattr(cfg.paths, DEFAULT_OUT.get(command, "out")))
    out.mkdir(parents=True, exist_ok=True)
    record = RunRecord(command, flags.recorded(), config_hash(cfg), cfg.seed, PACKAGE_VERSION)
    audit = Path(cfg.logging.audit_path) if cfg.logging.audit_path else out / "audit.jsonl"
    ctx = RunContext(cfg, flags, out, record)
    logger.info("[RUN] %s seed=%d config=%s out=%s", command, cfg.seed, record.config_hash[:12],
                out)
    try:
        COMMANDS[command](ctx)
    except SVSError:
        record.status = "error"
        append_audit(audit, record)
        raise
    record.add_outputs(ctx.outputs, out)
    write_manifest(out, record)
    append_audit(audit, record)
    return record
