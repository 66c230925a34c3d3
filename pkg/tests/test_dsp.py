"""
Tests for dsp.py - frame clock, F0, loudness, mel and audio I/O
"""

import librosa
import numpy as np
import pytest

from dsp import (
    MEL_FLOOR,
    FileF0Estimator,
    FrameSeries,
    MelConfig,
    Waveform,
    YinEstimator,
    check_frame_clock,
    extract_loudness,
    frame_count,
    hz_to_midi,
    mel_spectrogram,
    midi_to_hz,
    read_wav,
    write_wav,
)
from errors import ConfigError, DomainError, FrameClockError
from ftr1 import FtrMeta, write_ftr1


class TestFrameClock:
    """T = ceil(samples / hop) everywhere."""

    def test_frame_count(self):
        assert frame_count(44100, 220) == 201
        assert frame_count(440, 220) == 2
        assert frame_count(441, 220) == 3
        assert frame_count(1, 220) == 1

    def test_bad_hop(self):
        with pytest.raises(ConfigError):
            frame_count(100, 0)

    def test_clock_mismatch(self):
        """Series recorded on another hop are refused."""
        s = FrameSeries(np.zeros(3), "vuv", hop=256)
        with pytest.raises(FrameClockError):
            check_frame_clock(s, hop=220, sample_rate=44100)
        check_frame_clock(s, None, hop=256, sample_rate=44100)


class TestTypes:
    """Value-domain checks on construction."""

    def test_waveform_peak(self):
        with pytest.raises(DomainError):
            Waveform(np.array([0.0, 1.5]))

    def test_vuv_is_binary(self):
        with pytest.raises(DomainError):
            FrameSeries([0.0, 0.5], "vuv")

    def test_negative_f0(self):
        with pytest.raises(DomainError):
            FrameSeries([100.0, -1.0], "f0_hz")

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            FrameSeries([1.0], "pitch")

    def test_pitch_units(self):
        assert hz_to_midi(440.0) == pytest.approx(69.0)
        assert midi_to_hz(60) == pytest.approx(261.6256, rel=1e-6)
        assert midi_to_hz(hz_to_midi(123.4)) == pytest.approx(123.4)
        with pytest.raises(DomainError):
            hz_to_midi(0.0)


class TestF0:
    """YIN reference estimator."""

    def test_sine_220(self, tone):
        """A clean 220 Hz tone is voiced throughout and within 1% of 220 Hz."""
        f0, vuv = YinEstimator().estimate(tone)
        assert len(f0) == len(vuv) == frame_count(len(tone), 220)
        assert vuv.values.mean() > 0.9
        assert np.median(f0.values[vuv.values > 0]) == pytest.approx(220.0, rel=0.01)
        assert np.all(f0.values[vuv.values == 0] == 0)

    def test_silence_is_unvoiced(self):
        f0, vuv = YinEstimator().estimate(Waveform(np.zeros(4410)))
        assert not np.any(vuv.values)
        assert not np.any(f0.values)

    def test_range_checked(self):
        with pytest.raises(ConfigError):
            YinEstimator(fmin=20.0)

    def test_file_estimator(self, tmp_path, tone):
        """Precomputed contours are read back and must match the audio length."""
        t_len = frame_count(len(tone), 220)
        contour = np.where(np.arange(t_len) % 2, 200.0, 0.0)
        write_ftr1(tmp_path / "u1.f0.ftr", contour, FtrMeta("f0_hz"))
        f0, vuv = FileF0Estimator(tmp_path).estimate(tone, 220, "u1")
        assert np.array_equal(f0.values, contour)
        assert np.array_equal(vuv.values, (contour > 0).astype(float))

        write_ftr1(tmp_path / "u2.f0.ftr", contour[:-1], FtrMeta("f0_hz"))
        with pytest.raises(FrameClockError):
            FileF0Estimator(tmp_path).estimate(tone, 220, "u2")


class TestSpectral:
    """Loudness and log-mel."""

    def test_loudness_of_sine(self, tone):
        """Interior frames of a half-scale sine sit at 20*log10(0.5/sqrt(2))."""
        loud = extract_loudness(tone)
        assert len(loud) == frame_count(len(tone), 220)
        assert np.median(loud.values) == pytest.approx(20 * np.log10(0.5 / np.sqrt(2)), abs=0.1)

    def test_loudness_floor(self):
        loud = extract_loudness(Waveform(np.zeros(2205)))
        assert np.all(loud.values == -80.0)

    def test_mel_shape_and_floor(self, tone):
        mel = mel_spectrogram(tone)
        assert mel.data.shape == (frame_count(len(tone), 220), 80)
        assert mel.tag == "log_mel"
        assert mel.data.min() >= np.float32(np.log(MEL_FLOOR))

    def test_mel_peak_follows_tone(self, tone):
        """The loudest band is the one whose center is nearest 220 Hz."""
        cfg = MelConfig(n_mels=40)
        mel = mel_spectrogram(tone, cfg)
        centers = librosa.mel_frequencies(n_mels=42, fmin=cfg.fmin, fmax=cfg.fmax)[1:-1]
        peak = int(np.argmax(mel.data[len(mel) // 2]))
        assert abs(peak - int(np.argmin(np.abs(centers - 220.0)))) <= 1

    def test_mel_config_validation(self, tone):
        with pytest.raises(ConfigError):
            mel_spectrogram(tone, MelConfig(n_fft=1024, win_length=2048))


class TestAudioIO:
    """16-bit PCM WAV."""

    def test_round_trip(self, tmp_path, tone):
        write_wav(tmp_path / "t.wav", tone)
        back = read_wav(tmp_path / "t.wav")
        assert len(back) == len(tone)
        assert back.sample_rate == 44100
        assert np.allclose(back.samples, tone.samples, atol=1e-4)

    def test_resample_on_read(self, tmp_path, tone):
        write_wav(tmp_path / "t.wav", tone)
        back = read_wav(tmp_path / "t.wav", sample_rate=22050)
        assert back.sample_rate == 22050
        assert abs(len(back) - len(tone) // 2) <= 1
