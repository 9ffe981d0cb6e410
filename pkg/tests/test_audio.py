import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osdkit.audio import (
    LOG_FLOOR,
    N_MELS,
    MalformedWavError,
    ShortWaveformError,
    UnsupportedEncodingError,
    Waveform,
    features,
    log_mel,
    mean_normalize,
    mel_filterbank,
    num_grid_frames,
    num_raw_frames,
    pre_emphasis,
    read_wav,
    resample,
    write_wav,
)


def _write_pcm(path, pcm, channels=1, rate=16000, width=2):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(np.asarray(pcm).astype(f"<i{width}").tobytes())


def tone(freq, n, rate=16000, amp=0.5):
    return Waveform(amp * np.sin(2 * np.pi * freq * np.arange(n) / rate), rate)


class TestWav:
    def test_one_second(self, tmp_path):
        _write_pcm(tmp_path / "a.wav", np.zeros(16000, dtype=np.int16))
        w = read_wav(tmp_path / "a.wav")
        assert len(w) == 16000 and w.sample_rate == 16000
        assert not w.samples.any()

    def test_stereo_is_averaged(self, tmp_path):
        pcm = np.tile([16384, -16384], 100)
        _write_pcm(tmp_path / "s.wav", pcm, channels=2)
        w = read_wav(tmp_path / "s.wav")
        assert len(w) == 100
        np.testing.assert_array_equal(w.samples, 0.0)

    def test_round_trip_quantization(self, tmp_path, rng):
        x = rng.uniform(-1, 1, 5000)
        write_wav(Waveform(x, 16000), tmp_path / "r.wav")
        y = read_wav(tmp_path / "r.wav").samples
        assert np.max(np.abs(x - y)) <= 2 / 65536

    def test_empty(self, tmp_path):
        write_wav(Waveform(np.zeros(0), 16000), tmp_path / "e.wav")
        assert len(read_wav(tmp_path / "e.wav")) == 0

    def test_clipping(self, tmp_path):
        write_wav(Waveform([2.0, -3.0, 0.5], 16000), tmp_path / "c.wav")
        y = read_wav(tmp_path / "c.wav").samples
        assert y[0] == 1.0 and y[1] == -1.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_wav(tmp_path / "nope.wav")

    def test_not_a_wav(self, tmp_path):
        (tmp_path / "x.wav").write_bytes(b"hello, this is not RIFF data at all")
        with pytest.raises(MalformedWavError):
            read_wav(tmp_path / "x.wav")

    def test_8bit_rejected(self, tmp_path):
        with wave.open(str(tmp_path / "b.wav"), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(1)
            fh.setframerate(16000)
            fh.writeframes(bytes(100))
        with pytest.raises(UnsupportedEncodingError):
            read_wav(tmp_path / "b.wav")

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Waveform([0.0, np.nan], 16000)


class TestPreEmphasis:
    def test_hand_values(self):
        y = pre_emphasis(Waveform([1.0, 2.0, 3.0], 16000), 0.97).samples
        np.testing.assert_allclose(y, [1.0, 1.03, 1.06], atol=1e-12)

    def test_constant_unit_coeff(self):
        y = pre_emphasis(Waveform(np.full(6, 0.3), 16000), 1.0).samples
        np.testing.assert_allclose(y, [0.3, 0, 0, 0, 0, 0], atol=1e-15)

    def test_zero_coeff_identity(self, rng):
        x = rng.standard_normal(50)
        np.testing.assert_array_equal(pre_emphasis(Waveform(x, 16000), 0.0).samples, x)

    @pytest.mark.parametrize("coeff", [-0.1, 1.5])
    def test_out_of_range(self, coeff):
        with pytest.raises(ValueError):
            pre_emphasis(Waveform([1.0], 16000), coeff)


class TestLogMel:
    def test_frame_count_for_1p5_seconds(self):
        assert num_raw_frames(24000) == 148
        assert log_mel(tone(440, 24000)).shape == (148, N_MELS)
        assert num_grid_frames(24000) == 150
        assert features(tone(440, 24000)).shape == (150, N_MELS)

    def test_silence_is_log_floor(self):
        m = log_mel(Waveform(np.zeros(4000), 16000))
        np.testing.assert_allclose(m, np.log(LOG_FLOOR))

    def test_1khz_peak(self):
        m = log_mel(tone(1000, 16000)).mean(axis=0)
        _, edges = mel_filterbank()
        k = int(np.argmax(m))
        # the winning filter's support must contain 1 kHz
        assert edges[k] < 1000 < edges[k + 2]

    def test_filterbank_partition(self):
        weights, edges = mel_filterbank()
        assert weights.shape == (257, 128)
        assert edges[0] == 0 and edges[-1] == pytest.approx(8000)
        assert np.all(weights >= 0) and np.all(weights <= 1)

    def test_short_raises(self):
        with pytest.raises(ShortWaveformError):
            log_mel(Waveform(np.zeros(399), 16000))

    def test_wrong_rate_raises(self):
        with pytest.raises(ValueError):
            log_mel(Waveform(np.zeros(16000), 8000))

    def test_features_tiny_clip(self):
        assert features(Waveform(np.zeros(100), 16000)).shape == (0, N_MELS)
        assert features(Waveform(np.ones(320), 16000)).shape == (2, N_MELS)


class TestMeanNormalize:
    def test_constant(self):
        np.testing.assert_allclose(mean_normalize(np.full((7, 4), 3.3)), 0.0, atol=1e-12)

    def test_single_frame(self):
        assert not mean_normalize(np.arange(5.0)[None]).any()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 10_000))
    def test_idempotent(self, T, F, seed):
        m = mean_normalize(np.random.default_rng(seed).standard_normal((T, F)))
        np.testing.assert_allclose(mean_normalize(m), m, atol=1e-6)
        np.testing.assert_allclose(m.mean(axis=0), 0, atol=1e-9)


class TestResample:
    def test_identity(self, rng):
        x = rng.standard_normal(1234)
        y = resample(Waveform(x, 16000), 16000)
        np.testing.assert_array_equal(y.samples, x)

    def test_dc(self):
        y = resample(Waveform(np.full(16000, 0.7), 16000), 8000).samples
        assert y.size == 8000
        np.testing.assert_allclose(y[200:-200], 0.7, atol=1e-3)

    def test_tone_round_trip(self):
        w = tone(1000, 16000)
        back = resample(resample(w, 8000), 16000).samples
        a, b = w.samples[500:-500], back[500:-500]
        assert np.corrcoef(a, b)[0, 1] >= 0.99

    def test_linearity(self, rng):
        x, y = rng.standard_normal(2000), rng.standard_normal(2000)
        r = lambda s: resample(Waveform(s, 16000), 11025).samples
        np.testing.assert_allclose(r(2 * x - y), 2 * r(x) - r(y), atol=1e-10)

    def test_above_nyquist_removed(self):
        y = resample(tone(7000, 16000), 8000).samples
        assert np.mean(y[200:-200] ** 2) < 1e-3 * 0.125

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            resample(Waveform(np.zeros(10), 16000), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_pre_emphasis_inverts(seed, coeff):
    x = np.random.default_rng(seed).standard_normal(64)
    y = pre_emphasis(Waveform(x, 16000), coeff).samples
    rec = np.empty_like(y)
    prev = 0.0
    for n, v in enumerate(y):
        prev = v + coeff * prev
        rec[n] = prev
    np.testing.assert_allclose(rec, x, atol=1e-9)


@pytest.mark.parametrize("n", [400, 401, 559, 560, 16000, 24321])
def test_framing_formula(n):
    assert log_mel(Waveform(np.zeros(n), 16000)).shape[0] == 1 + (n - 400) // 160
