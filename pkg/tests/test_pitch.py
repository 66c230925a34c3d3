"""
Tests for pitch.py - singer embeddings and the autoregressive pitch model
"""

import numpy as np
import pytest

from dsp import FeatureMatrix, FrameSeries, midi_to_hz
from errors import AlignmentError, DatasetError, DomainError
from midi import MidiStream
from nnet import TrainConfig, grad_check
from pitch import (
    SEMITONE,
    PitchConfig,
    PitchItem,
    PitchModel,
    PitchStreams,
    SingerEmbedding,
    average_embeddings,
    baseline_embedding,
    compose_f0,
    pitch_forward,
    prepare_dataset,
    read_embedding,
    train_pitch,
    write_embedding,
)

TINY = PitchConfig(hlf_dim=4, emb_dim=8, model_dim=8, note_dim=4, enc_layers=1, kernel=3,
                   prenet_dim=4, gru_dim=8)


def _inputs(rng, t_len=12):
    notes = np.where(np.arange(t_len) < 2, 0.0, 60.0 + (np.arange(t_len) >= 7) * 2.0)
    hlf = FeatureMatrix(rng.standard_normal((t_len, 4)), tag="hlf")
    return MidiStream(notes, "flattened"), hlf


def _targets(m, rng):
    t_len = len(m)
    voiced = m.notes > 0
    r = np.where(voiced, rng.normal(0, 0.2, t_len) * SEMITONE, 0.0)
    return PitchStreams(FrameSeries(r, "residual_logf0", mask=voiced),
                        FrameSeries(voiced.astype(float), "vuv"),
                        FrameSeries(rng.uniform(-50, -10, t_len), "loudness_db"))


class TestEmbeddings:
    """Unit-norm singer vectors."""

    def test_norm_enforced(self):
        with pytest.raises(DomainError):
            SingerEmbedding(np.array([1.0, 1.0]))

    def test_baseline_embedding(self, rng):
        mel = FeatureMatrix(rng.standard_normal((30, 16)))
        e = baseline_embedding(mel, 8)
        assert e.dim == 8
        assert np.linalg.norm(e.vector) == pytest.approx(1.0)
        assert np.array_equal(baseline_embedding(mel, 8).vector, e.vector)
        with pytest.raises(DomainError):
            baseline_embedding(mel, 33)

    def test_average_is_renormalized(self, singer_factory):
        avg = average_embeddings([singer_factory(1), singer_factory(2)])
        assert np.linalg.norm(avg.vector) == pytest.approx(1.0)

    def test_file_round_trip(self, tmp_path, singer):
        write_embedding(tmp_path / "s.emb.ftr", singer)
        back = read_embedding(tmp_path / "s.emb.ftr")
        assert back.tag == "file"
        assert np.allclose(back.vector, singer.vector, atol=1e-6)


class TestComposeF0:
    """f0 from notes, residual and voicing."""

    def test_compose(self):
        m = MidiStream([0.0, 60.0, 60.0, 69.0])
        r = FrameSeries([0.0, 0.0, SEMITONE, 0.0], "residual_logf0")
        vuv = FrameSeries([1.0, 1.0, 1.0, 0.0], "vuv")
        f0 = compose_f0(m, r, vuv)
        assert f0.values[0] == 0.0
        assert f0.values[1] == pytest.approx(midi_to_hz(60))
        assert f0.values[2] == pytest.approx(midi_to_hz(61))
        assert f0.values[3] == 0.0

    def test_length_mismatch(self):
        with pytest.raises(AlignmentError):
            compose_f0(MidiStream([60.0]), FrameSeries([0.0, 0.0], "residual_logf0"),
                       FrameSeries([1.0], "vuv"))


class TestPitchModel:
    """Encoder + autoregressive decoder."""

    def test_forward_streams(self, rng, singer):
        """Free-running output has one frame per note frame, gated on rests."""
        m, hlf = _inputs(rng)
        out = pitch_forward(m, hlf, singer, PitchModel(TINY))
        assert len(out) == len(m)
        assert set(np.unique(out.vuv.values)) <= {0.0, 1.0}
        assert np.all(out.residual.values[m.notes == 0] == 0)
        assert np.all(out.residual.values[out.vuv.values == 0] == 0)
        assert np.all((out.loudness.values >= -80) & (out.loudness.values <= 0))

    def test_singer_changes_output(self, rng, singer_factory):
        """Different embeddings reach the decoder."""
        m, hlf = _inputs(rng)
        model = PitchModel(TINY)
        a = model.forward(m, hlf, singer_factory(1))
        b = model.forward(m, hlf, singer_factory(2))
        assert not np.allclose(a.loudness.values, b.loudness.values)

    def test_zeroed_speaker_projection(self, rng, singer_factory):
        """With the speaker projection zeroed the embedding has no effect."""
        m, hlf = _inputs(rng)
        model = PitchModel(TINY)
        model.params["spk.w"].data[:] = 0.0
        a = model.forward(m, hlf, singer_factory(1))
        b = model.forward(m, hlf, singer_factory(2))
        assert np.array_equal(a.loudness.values, b.loudness.values)
        assert np.array_equal(a.residual.values, b.residual.values)

    def test_teacher_forcing_length(self, rng, singer):
        m, hlf = _inputs(rng)
        model = PitchModel(TINY)
        model.forward(m, hlf, singer, teacher=_targets(m, rng))
        short, _ = _inputs(rng, t_len=5)
        with pytest.raises(AlignmentError):
            model.forward(m, hlf, singer, teacher=_targets(short, rng))

    def test_hlf_length_mismatch(self, rng, singer):
        m, _ = _inputs(rng)
        with pytest.raises(AlignmentError):
            PitchModel(TINY).forward(m, FeatureMatrix(np.zeros((3, 4))), singer)

    def test_gradients(self, rng, singer):
        m, hlf = _inputs(rng, t_len=6)
        item = PitchItem("u", m, hlf, singer, _targets(m, rng))
        (_, inputs), = prepare_dataset([item], TINY)
        model = PitchModel(TINY)
        assert grad_check(model.loss, model.params, 1e-3, *inputs) < 1e-3

    def test_save_load(self, tmp_path, rng, singer):
        m, hlf = _inputs(rng)
        model = PitchModel(TINY)
        model.save(tmp_path / "pitch.skcp")
        back = PitchModel.load(tmp_path / "pitch.skcp")
        assert back.cfg == TINY
        assert np.array_equal(back.forward(m, hlf, singer).loudness.values,
                              model.forward(m, hlf, singer).loudness.values)


class TestPitchTraining:
    """Dataset checks and a short fit."""

    def test_fully_masked_items_skipped(self, rng, singer):
        m, hlf = _inputs(rng)
        good = PitchItem("good", m, hlf, singer, _targets(m, rng))
        rest = MidiStream(np.zeros(len(m)), "flattened")
        bad = PitchItem("rest", rest, hlf, singer, _targets(rest, rng))
        assert [u for u, _ in prepare_dataset([good, bad], TINY)] == ["good"]
        with pytest.raises(DatasetError):
            prepare_dataset([bad], TINY)

    def test_dim_mismatch(self, rng, singer_factory):
        m, hlf = _inputs(rng)
        item = PitchItem("u", m, hlf, singer_factory(0, dim=6), _targets(m, rng))
        with pytest.raises(DatasetError):
            prepare_dataset([item], TINY)

    def test_short_run_reports(self, rng, singer):
        m, hlf = _inputs(rng)
        item = PitchItem("u", m, hlf, singer, _targets(m, rng))
        model, report = train_pitch([item], TINY, TrainConfig(steps=3, log_every=0))
        assert len(report["history"]) == 3
        assert report["skipped"] == 0
        assert np.isfinite(report["final_loss"])

    def test_continuing_checks_initial_model_dims(self, rng, singer):
        """With init, items are validated against the checkpoint's hlf_dim."""
        m, hlf = _inputs(rng)
        item = PitchItem("u", m, hlf, singer, _targets(m, rng))
        other = PitchConfig(hlf_dim=6, emb_dim=8, model_dim=8, note_dim=4, enc_layers=1,
                            kernel=3, prenet_dim=4, gru_dim=8)
        with pytest.raises(DatasetError):
            train_pitch([item], TINY, TrainConfig(steps=1), init=PitchModel(other))

    @pytest.mark.slow
    def test_overfits_one_utterance(self, rng, singer):
        m, hlf = _inputs(rng, t_len=16)
        item = PitchItem("u", m, hlf, singer, _targets(m, rng))
        model, report = train_pitch([item], TINY, TrainConfig(steps=400, lr=3e-3, log_every=0))
        assert report["final_loss"] < 0.5 * report["initial_loss"]
