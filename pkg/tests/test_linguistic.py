"""
Tests for linguistic.py - labels, length regulator and the HLF model
"""

import numpy as np
import pytest

from dsp import FeatureMatrix
from errors import AlignmentError, DatasetError, DurationError, FormatError, VocabularyError
from linguistic import (
    LinguisticConfig,
    LinguisticItem,
    LinguisticModel,
    ScoreLabel,
    Vocabulary,
    length_regulate,
    linguistic_forward,
    read_label_tsv,
    train_linguistic,
    write_label_tsv,
)
from nnet import TrainConfig, const, grad_check

TINY = LinguisticConfig(hlf_dim=6, model_dim=8, ff_dim=8, heads=2, enc_layers=1, dec_layers=1)


class TestLengthRegulator:
    """Row n repeated durations[n] times."""

    def test_matches_repeat(self, rng):
        H = rng.standard_normal((4, 3))
        d = [1, 3, 2, 1]
        out = length_regulate(H, d)
        assert out.shape == (7, 3)
        rows = [H[n] for n, k in enumerate(d) for _ in range(k)]
        assert np.array_equal(out, np.stack(rows))

    def test_unit_durations_are_identity(self, rng):
        H = rng.standard_normal((5, 2))
        assert np.array_equal(length_regulate(H, np.ones(5, dtype=int)), H)

    def test_graph_tensor(self, rng):
        """Graph tensors are gathered the same way as arrays."""
        H = rng.standard_normal((3, 2))
        out = length_regulate(const(H), [2, 1, 2])
        assert np.array_equal(out.data, np.repeat(H, [2, 1, 2], axis=0).astype(np.float32))

    def test_zero_duration(self):
        with pytest.raises(DurationError) as exc:
            length_regulate(np.ones((3, 2)), [1, 0, 2])
        assert exc.value.index == 1

    def test_count_mismatch(self):
        with pytest.raises(AlignmentError):
            length_regulate(np.ones((3, 2)), [1, 2])


class TestLabels:
    """Vocabulary and label files."""

    def test_label_checks_durations(self):
        with pytest.raises(DurationError) as exc:
            ScoreLabel([0, 1, 2], [3, 1, 0])
        assert exc.value.index == 2

    def test_label_tsv(self, tmp_path, vocab):
        write_label_tsv(tmp_path / "l.tsv", ["pau", "s", "a", "pau"], [10, 4, 20, 8])
        label = read_label_tsv(tmp_path / "l.tsv", vocab)
        assert label.phonemes.tolist() == [0, 3, 1, 0]
        assert label.total_frames == 42
        assert label.symbols == ["pau", "s", "a", "pau"]

    def test_unknown_symbol(self, tmp_path, vocab):
        write_label_tsv(tmp_path / "l.tsv", ["pau", "zz"], [3, 3])
        with pytest.raises(VocabularyError):
            read_label_tsv(tmp_path / "l.tsv", vocab)

    def test_malformed_line(self, tmp_path, vocab):
        (tmp_path / "l.tsv").write_text("pau\tten\n")
        with pytest.raises(FormatError):
            read_label_tsv(tmp_path / "l.tsv", vocab)

    def test_vocabulary_file(self, tmp_path, vocab):
        vocab.write(tmp_path / "vocab.tsv")
        assert Vocabulary.read(tmp_path / "vocab.tsv") == vocab
        with pytest.raises(VocabularyError):
            Vocabulary(["a", "a"])


class TestLinguisticModel:
    """Encoder, length regulator, decoder."""

    def test_forward_shape(self, vocab):
        """Output has sum(durations) rows and hlf_dim columns."""
        model = LinguisticModel(TINY, vocab)
        hlf = linguistic_forward(ScoreLabel([0, 1, 3], [2, 3, 1]), model)
        assert isinstance(hlf, FeatureMatrix)
        assert hlf.data.shape == (6, 6)

    def test_id_outside_vocabulary(self, vocab):
        model = LinguisticModel(TINY, vocab)
        with pytest.raises(VocabularyError):
            model.forward(ScoreLabel([0, 9], [1, 1]))

    def test_save_load(self, tmp_path, vocab):
        """A reloaded checkpoint computes the same features."""
        model = LinguisticModel(TINY, vocab)
        model.save(tmp_path / "ling.skcp")
        back = LinguisticModel.load(tmp_path / "ling.skcp")
        label = ScoreLabel([0, 2, 1], [1, 2, 3])
        assert back.vocab == vocab
        assert back.cfg == TINY
        assert np.array_equal(back.forward(label).data, model.forward(label).data)

    def test_gradients(self, rng, vocab):
        model = LinguisticModel(TINY, vocab)
        ids, durs = np.array([0, 1, 2]), np.array([2, 1, 2])
        target = rng.standard_normal((5, 6))
        assert grad_check(model.loss, model.params, 1e-3, ids, durs, target) < 1e-3

    def test_dataset_length_mismatch(self, rng, vocab):
        """A target that disagrees with the durations is rejected before training."""
        item = LinguisticItem("u1", ScoreLabel([0, 1], [2, 2]),
                              FeatureMatrix(rng.standard_normal((5, 6))))
        with pytest.raises(DatasetError) as exc:
            train_linguistic([item], TINY, TrainConfig(steps=1), vocab)
        assert exc.value.utt_id == "u1"

    def test_dataset_checked_against_initial_model(self, rng, vocab):
        """Continuing a checkpoint validates targets against its own hlf_dim."""
        init = LinguisticModel(TINY, vocab)
        item = LinguisticItem("u1", ScoreLabel([0, 1], [2, 2]),
                              FeatureMatrix(rng.standard_normal((4, 3))))
        wide = LinguisticConfig(hlf_dim=3, model_dim=8, ff_dim=8, heads=2, enc_layers=1,
                                dec_layers=1)
        with pytest.raises(DatasetError) as exc:
            train_linguistic([item], wide, TrainConfig(steps=1), vocab, init=init)
        assert "expects 6" in str(exc.value)

    @pytest.mark.slow
    def test_overfits_one_utterance(self, rng, vocab):
        """Training drives the loss on a single item well below its start."""
        ids, durs = np.array([0, 1, 3, 2, 0]), np.array([3, 5, 2, 6, 3])
        table = rng.standard_normal((5, 6))
        target = FeatureMatrix(table[np.repeat(ids, durs)])
        item = LinguisticItem("u1", ScoreLabel(ids, durs), target)
        model, report = train_linguistic([item], TINY, TrainConfig(steps=300, lr=3e-3,
                                                                   log_every=0), vocab)
        assert report["final_loss"] < 0.5 * report["initial_loss"]
        assert len(report["history"]) == 300
