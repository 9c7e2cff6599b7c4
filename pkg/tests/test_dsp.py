import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dne import dsp


def naive_frames(x):
    # Independent framing: reflect pad, then plain slicing.
    pad = np.concatenate([x[1 : dsp.EDGE_PAD + 1][::-1], x, x[-dsp.EDGE_PAD - 1 : -1][::-1]])
    n_frames = 1 + (len(pad) - dsp.WIN_LENGTH) // dsp.HOP_LENGTH
    return np.stack(
        [pad[t * dsp.HOP_LENGTH : t * dsp.HOP_LENGTH + dsp.WIN_LENGTH] for t in range(n_frames)]
    )


def naive_dft(frames):
    # Direct O(N^2) discrete Fourier sum, one-sided.
    n = dsp.WIN_LENGTH
    k = np.arange(dsp.N_BINS)[:, None]
    t = np.arange(n)[None, :]
    basis = np.exp(-2j * np.pi * k * t / n)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    return (frames * win) @ basis.T


class TestStft:
    def test_matches_naive_dft(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(4096)
        got = dsp.stft(x)
        want = naive_dft(naive_frames(x))
        assert got.shape == want.shape
        rel = np.abs(got - want).max() / np.abs(want).max()
        assert rel < 1e-6

    def test_frame_count_formula(self):
        for n in [512, 1000, 16000, 16256, 48001]:
            padded = n + 2 * dsp.EDGE_PAD
            want = 1 + (padded - dsp.WIN_LENGTH) // dsp.HOP_LENGTH
            assert dsp.frame_count(n) == want
            assert dsp.stft(np.zeros(n)).shape == (want, dsp.N_BINS)

    def test_pure_tone_peaks_at_expected_bin(self):
        # 1 kHz at 16 kHz with 512-point FFT lands on bin 32 exactly.
        t = np.arange(16000) / dsp.SAMPLE_RATE
        x = np.sin(2 * np.pi * 1000.0 * t)
        mag = np.abs(dsp.stft(x))
        # Edge frames see the reflected pad, so check fully interior frames.
        assert (mag.argmax(axis=1)[2:-2] == 32).all()

    def test_zero_signal_zero_spectrogram(self):
        spec = dsp.stft(np.zeros(8000))
        assert np.abs(spec).max() == 0.0

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(6000)
        y = rng.standard_normal(6000)
        lhs = dsp.stft(2.5 * x - 0.7 * y)
        rhs = 2.5 * dsp.stft(x) - 0.7 * dsp.stft(y)
        assert np.abs(lhs - rhs).max() < 1e-9 * max(1.0, np.abs(rhs).max())

    def test_parseval_per_frame(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal(5000)
        spec = dsp.stft(x)
        frames = naive_frames(x)
        win = dsp.hann_window()
        for t in range(spec.shape[0]):
            row = np.abs(spec[t]) ** 2
            # One-sided spectrum: interior bins count twice.
            spec_energy = row[0] + row[-1] + 2 * row[1:-1].sum()
            time_energy = dsp.FFT_SIZE * ((frames[t] * win) ** 2).sum()
            if time_energy > 1e-12:
                assert abs(spec_energy - time_energy) / time_energy < 1e-6

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            dsp.stft(np.array([]))


class TestIstft:
    @pytest.mark.parametrize("n", [8000, 16000, 16256, 24001, 48000])
    def test_round_trip(self, n):
        rng = np.random.default_rng(n)
        x = rng.standard_normal(n)
        y = dsp.istft(dsp.stft(x), length=n)
        assert y.shape == x.shape
        interior = slice(dsp.WIN_LENGTH, n - dsp.WIN_LENGTH)
        assert np.abs(y[interior] - x[interior]).max() < 1e-6
        assert np.abs(y - x).max() < 1e-8

    def test_zero_spectrogram_zero_waveform(self):
        y = dsp.istft(np.zeros((64, dsp.N_BINS), dtype=complex))
        assert np.abs(y).max() == 0.0

    def test_identity_mask_round_trip(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(12000)
        mag, phase = dsp.split_mag_phase(dsp.stft(x))
        spec = (1.0 * mag) * np.exp(1j * phase)
        y = dsp.istft(spec, length=len(x))
        assert np.abs(y - x).max() < 1e-8

    def test_length_crop_and_pad(self):
        x = np.random.default_rng(1).standard_normal(10000)
        spec = dsp.stft(x)
        assert len(dsp.istft(spec, length=9000)) == 9000
        assert len(dsp.istft(spec, length=11000)) == 11000

    def test_wrong_bin_count_rejected(self):
        with pytest.raises(ValueError):
            dsp.istft(np.zeros((10, 256), dtype=complex))

    @settings(max_examples=10, deadline=None)
    @given(st.integers(min_value=2048, max_value=20000))
    def test_round_trip_random_lengths(self, n):
        rng = np.random.default_rng(n)
        x = rng.standard_normal(n)
        y = dsp.istft(dsp.stft(x), length=n)
        assert np.abs(y - x).max() < 1e-8


class TestMagPhase:
    def test_recombination(self):
        rng = np.random.default_rng(9)
        spec = rng.standard_normal((40, dsp.N_BINS)) + 1j * rng.standard_normal((40, dsp.N_BINS))
        mag, phase = dsp.split_mag_phase(spec)
        back = mag * np.exp(1j * phase)
        assert np.abs(back - spec).max() < 1e-7
        assert (mag >= 0).all()


class TestMel:
    def test_shape_and_nonnegative(self):
        fb = dsp.mel_filterbank()
        assert fb.shape == (dsp.N_MELS, dsp.N_BINS)
        assert (fb >= 0).all()
        assert (fb.sum(axis=1) > 0).all()

    def test_unit_peak_triangles(self):
        fb = dsp.mel_filterbank()
        peaks = fb.max(axis=1)
        assert (peaks <= 1.0 + 1e-12).all()

    def test_contiguous_support(self):
        fb = dsp.mel_filterbank()
        for m in range(dsp.N_MELS):
            nz = np.flatnonzero(fb[m] > 0)
            assert nz.size > 0
            assert (np.diff(nz) == 1).all()

    def test_bin_covered_by_at_most_two_filters(self):
        fb = dsp.mel_filterbank()
        assert ((fb > 0).sum(axis=0) <= 2).all()

    def test_impulse_lights_only_overlapping_filters(self):
        fb = dsp.mel_filterbank()
        floor = math.log(dsp.LOG_FLOOR)
        for k in [5, 33, 100, 200, 250]:
            mag = np.zeros((1, dsp.N_BINS))
            mag[0, k] = 1000.0
            feat = dsp.log_mfb(mag)
            lit = set(np.flatnonzero(feat[0] > floor + 1e-9))
            assert lit == set(np.flatnonzero(fb[:, k] > 0))

    def test_zero_frame_hits_log_floor(self):
        feat = dsp.log_mfb(np.zeros((3, dsp.N_BINS)))
        assert np.allclose(feat, math.log(dsp.LOG_FLOOR))

    def test_matches_naive_triangle_oracle(self):
        # Rebuild one filter by hand from the mel break points.
        fb = dsp.mel_filterbank()
        mel_pts = np.linspace(
            2595 * math.log10(1 + dsp.MEL_FMIN / 700),
            2595 * math.log10(1 + dsp.MEL_FMAX / 700),
            dsp.N_MELS + 2,
        )
        hz_pts = 700 * (10 ** (mel_pts / 2595) - 1)
        bin_hz = np.arange(dsp.N_BINS) * dsp.SAMPLE_RATE / dsp.FFT_SIZE
        for m in [0, 17, 39]:
            lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
            rising = (bin_hz - lo) / (mid - lo)
            falling = (hi - bin_hz) / (hi - mid)
            want = np.clip(np.minimum(rising, falling), 0, None)
            assert np.abs(fb[m] - want).max() < 1e-12


class TestStandardize:
    def test_two_pass_oracle(self):
        rng = np.random.default_rng(21)
        mag = np.abs(rng.standard_normal((50, dsp.N_BINS)))
        z, mean, std = dsp.standardize(mag)
        flat = mag.ravel()
        mu = flat.sum() / flat.size
        var = ((flat - mu) ** 2).sum() / flat.size
        assert abs(mean - mu) < 1e-12
        assert abs(std - math.sqrt(var)) < 1e-12
        assert np.abs(z - (mag - mu) / math.sqrt(var)).max() < 1e-12

    def test_standardized_stats(self):
        rng = np.random.default_rng(22)
        mag = np.abs(rng.standard_normal((30, dsp.N_BINS))) * 5 + 2
        z, _, _ = dsp.standardize(mag)
        assert abs(z.mean()) < 1e-10
        assert abs(z.std() - 1.0) < 1e-10

    def test_degenerate_input_rejected(self):
        with pytest.raises(ValueError):
            dsp.standardize(np.full((10, dsp.N_BINS), 3.0))


class TestWavIo:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        x = np.clip(rng.standard_normal(4000) * 0.2, -1, 1)
        p = tmp_path / "t.wav"
        dsp.write_wav(p, x)
        y = dsp.read_wav(p)
        assert y.shape == x.shape
        # int16 quantization error only.
        assert np.abs(y - x).max() <= 1.0 / 32768 + 1e-12

    def test_rejects_wrong_rate(self, tmp_path):
        p = tmp_path / "bad.wav"
        with wave.open(str(p), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(8000)
            w.writeframes(np.zeros(100, dtype=np.int16).tobytes())
        with pytest.raises(ValueError):
            dsp.read_wav(p)

    def test_rejects_stereo(self, tmp_path):
        p = tmp_path / "bad.wav"
        with wave.open(str(p), "wb") as w:
            w.setnchannels(2)
            w.setsampwidth(2)
            w.setframerate(16000)
            w.writeframes(np.zeros(200, dtype=np.int16).tobytes())
        with pytest.raises(ValueError):
            dsp.read_wav(p)

    def test_rejects_8bit(self, tmp_path):
        p = tmp_path / "bad.wav"
        with wave.open(str(p), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(1)
            w.setframerate(16000)
            w.writeframes(np.zeros(100, dtype=np.uint8).tobytes())
        with pytest.raises(ValueError):
            dsp.read_wav(p)
