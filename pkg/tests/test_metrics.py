"""
Tests for metrics.py - MCD, F0 error and token error rates
"""

import functools
import itertools

import numpy as np
import pytest

from dsp import FeatureMatrix, FrameSeries
from errors import AlignmentError, UndefinedMetricError
from metrics import (
    MCD_CONST,
    MetricValue,
    cepstra,
    edit_distance,
    f0_corr,
    f0_rmse_cents,
    f0_rmse_hz,
    mcd,
    read_report,
    token_error_rate,
    tokenize,
    write_report,
)


def _f0(values):
    return FrameSeries(np.asarray(values, dtype=float), "f0_hz")


class TestMcd:
    """Mel-cepstral distortion."""

    def test_known_difference(self):
        """Unit offsets in two coefficients give (10/ln10) * sqrt(2 * 2) per frame."""
        c_ref = np.zeros((5, 25))
        c = c_ref.copy()
        c[:, 3] = 1.0
        c[:, 7] = -1.0
        assert mcd(c, c_ref) == pytest.approx(MCD_CONST * 2.0)

    def test_c0_excluded(self, rng):
        """A constant gain on the log-mel moves only c0, so MCD stays zero."""
        mel = rng.standard_normal((10, 40))
        ref = cepstra(mel)
        shifted = cepstra(mel + 3.0)
        assert ref.shape == (10, 25)
        assert mcd(shifted, ref) == pytest.approx(0.0, abs=1e-9)
        assert cepstra(FeatureMatrix(mel, tag="logmel")).shape == (10, 25)
        assert mcd(cepstra(mel + rng.standard_normal((10, 40))), ref) > 0

    def test_too_few_bands(self):
        with pytest.raises(AlignmentError):
            cepstra(np.zeros((3, 20)))

    def test_shape_mismatch_and_empty(self):
        with pytest.raises(AlignmentError):
            mcd(np.zeros((3, 25)), np.zeros((4, 25)))
        with pytest.raises(UndefinedMetricError):
            mcd(np.zeros((0, 25)), np.zeros((0, 25)))


class TestF0:
    """Co-voiced F0 comparisons."""

    def test_semitone_offset(self):
        """One semitone sharp everywhere is 100 cents."""
        ref = np.array([220.0, 0.0, 330.0, 440.0, 0.0])
        out = f0_rmse_cents(_f0(ref * 2 ** (1 / 12)), _f0(ref))
        assert out == MetricValue("f0_rmse", pytest.approx(100.0), "cents", 3)

    def test_only_co_voiced_frames_count(self):
        ref = _f0([200.0, 200.0, 0.0, 200.0])
        gen = _f0([210.0, 0.0, 300.0, 190.0])
        out = f0_rmse_hz(gen, ref)
        assert out.frames == 2
        assert out.value == pytest.approx(10.0)
        assert out.unit == "Hz"

    def test_correlation(self):
        """A transposed contour correlates perfectly in log-pitch."""
        ref = np.array([200.0, 220.0, 250.0, 230.0, 0.0])
        assert f0_corr(_f0(ref * 1.5), _f0(ref)).value == pytest.approx(1.0)
        flipped = np.array([250.0, 230.0, 200.0, 220.0, 0.0])
        assert f0_corr(_f0(flipped), _f0(ref)).value < 0

    def test_undefined_cases(self):
        with pytest.raises(UndefinedMetricError):
            f0_rmse_cents(_f0([0.0, 100.0]), _f0([100.0, 0.0]))
        with pytest.raises(UndefinedMetricError):
            f0_corr(_f0([100.0, 100.0]), _f0([100.0, 120.0]))

    def test_length_mismatch(self):
        with pytest.raises(AlignmentError):
            f0_rmse_cents(_f0([100.0, 100.0]), _f0([100.0]))


def _words(alphabet, max_len):
    return [""] + ["".join(p) for n in range(1, max_len + 1)
                   for p in itertools.product(alphabet, repeat=n)]


def _distances_from(ref, hyps):
    """Recursive definition, memoized on (ref suffix, hyp suffix) for one ref."""

    @functools.lru_cache(maxsize=None)
    def d(i, hyp):
        if i == len(ref):
            return len(hyp)
        if not hyp:
            return len(ref) - i
        return min(d(i + 1, hyp) + 1, d(i, hyp[1:]) + 1, d(i + 1, hyp[1:]) + (ref[i] != hyp[0]))

    return [d(0, h) for h in hyps]


class TestTokens:
    """Edit distance and CER/WER."""

    def test_edit_distance_matches_recursion(self):
        """Every pair of strings over {a, b, c} up to length 4."""
        words = _words("abc", 4)
        for ref in words:
            assert [edit_distance(ref, hyp) for hyp in words] == _distances_from(ref, words), ref

    @pytest.mark.slow
    def test_edit_distance_matches_recursion_to_length_six(self):
        words = _words("abc", 6)
        for ref in words:
            assert [edit_distance(ref, hyp) for hyp in words] == _distances_from(ref, words), ref

    def test_error_rates(self):
        ref = tokenize("the cat sat")
        assert token_error_rate(ref, tokenize("the bat sat")) == pytest.approx(1 / 3)
        assert token_error_rate(ref, []) == pytest.approx(1.0)
        assert token_error_rate(["a"], ["b", "c"]) == pytest.approx(2.0)

    def test_empty_reference(self):
        with pytest.raises(UndefinedMetricError):
            token_error_rate([], ["a"])

    def test_tokenize(self):
        assert tokenize("la  la\tla") == ["la", "la", "la"]
        assert tokenize("la la", unit="char") == ["l", "a", "l", "a"]


class TestReport:
    def test_round_trip(self, tmp_path):
        values = [MetricValue("mcd", 5.25, "dB", 120), MetricValue("cer", 0.125, "ratio", 0)]
        write_report(tmp_path / "eval" / "metrics.tsv", values)
        lines = (tmp_path / "eval" / "metrics.tsv").read_text().splitlines()
        assert lines[0] == "metric\tvalue\tunit\tframes"
        assert lines[1] == "mcd\t5.250000\tdB\t120"
        assert read_report(tmp_path / "eval" / "metrics.tsv") == values
