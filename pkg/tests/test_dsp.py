import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gelp import dsp
from gelp.dsp import (
    FILTER_STFT,
    MEL_STFT,
    MelSpectrogram,
    Spectrogram,
    StftConfig,
    build_mel_filterbank,
    cosine_window,
    deemphasis,
    griffin_lim,
    istft,
    mel_spectrogram,
    mel_to_linear,
    preemphasis,
    stft,
    upsample_linear,
)

RNG = np.random.default_rng(1234)


class TestEmphasis:
    def test_alpha_zero_is_identity(self):
        x = np.array([1.0, 1.0, 1.0])
        assert np.array_equal(preemphasis(x, 0.0), x)

    def test_forced_values(self):
        y = preemphasis(np.array([1.0, 1.0, 1.0]), 0.97)
        assert np.allclose(y, [1.0, 0.03, 0.03])

    def test_deemphasis_impulse_response(self):
        x = deemphasis(np.array([1.0, 0.0, 0.0]), 0.5)
        assert np.allclose(x, [1.0, 0.5, 0.25])

    def test_deemphasis_identity(self):
        y = RNG.standard_normal(50)
        assert np.allclose(deemphasis(y, 0.0), y)

    @given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(0.0, 0.99))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip(self, seed, alpha):
        x = np.random.default_rng(seed).standard_normal(16000)
        back = deemphasis(preemphasis(x, alpha), alpha)
        assert np.abs(back - x).max() < 1e-10

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            preemphasis(np.array([1.0, np.nan]), 0.5)

    def test_rejects_unstable_alpha(self):
        with pytest.raises(ValueError):
            deemphasis(np.ones(4), 1.0)
        with pytest.raises(ValueError):
            preemphasis(np.ones(4), 1.5)


class TestStftConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            StftConfig(160, 80, 100)  # not a power of two
        with pytest.raises(ValueError):
            StftConfig(160, 80, 128)  # fft < window
        with pytest.raises(ValueError):
            StftConfig(0, 80, 512)

    def test_cola_required_for_istft(self):
        S = stft(RNG.standard_normal(2000), MEL_STFT)
        with pytest.raises(ValueError):
            istft(S)


class TestStftIstft:
    def test_zeros(self):
        S = stft(np.zeros(1600), FILTER_STFT)
        assert np.all(S.frames == 0)
        assert np.all(istft(S) == 0)

    def test_cola_identity(self):
        w = cosine_window(160, np.float64)
        acc = np.zeros(1600)
        for k in range(0, len(acc) - 160 + 1, 80):
            acc[k : k + 160] += w * w
        assert np.abs(acc[160:-160] - 1.0).max() < 1e-12

    def test_frame_count(self):
        S = stft(np.zeros(16000), FILTER_STFT)
        assert S.frames.shape == (201, 257)
        assert stft(np.zeros(16000), MEL_STFT).frames.shape == (201, 257)

    @given(seed=st.integers(0, 2**32 - 1), length=st.integers(400, 20000))
    @settings(max_examples=20, deadline=None)
    def test_roundtrip_random(self, seed, length):
        x = np.random.default_rng(seed).standard_normal(length)
        y = istft(stft(x, FILTER_STFT))
        assert y.shape == x.shape
        assert np.abs(y - x).max() < 1e-6

    def test_sinusoid_matches_direct_dft_oracle(self):
        # direct-summation windowed DFT of one frame, computed independently
        cfg = FILTER_STFT
        n = np.arange(16000)
        x = np.cos(2 * np.pi * 2000.0 * n / 16000.0)
        S = stft(x, cfg)
        frame = dsp.frame_signal(x, cfg)[100] * cosine_window(160, np.float64)
        padded = np.zeros(cfg.fft_length)
        padded[:160] = frame
        k = np.arange(cfg.n_bins)
        dft = np.exp(-2j * np.pi * np.outer(k, np.arange(cfg.fft_length)) / cfg.fft_length)
        oracle = dft @ padded
        assert np.abs(oracle - S.frames[100]).max() < 1e-8

    def test_sinusoid_energy_concentrates_at_bin(self):
        # 2 kHz lands exactly on bin 64 of the 512-point FFT at 16 kHz; the
        # cosine window's mainlobe (widened by the 512/160 zero padding)
        # keeps >90% of the frame energy within +-3 bins of it.
        x = np.cos(2 * np.pi * 2000.0 * np.arange(16000) / 16000.0)
        fr = stft(x, FILTER_STFT).frames[100]
        w = np.full(fr.shape, 2.0)
        w[0] = w[-1] = 1.0
        energy = w * np.abs(fr) ** 2
        assert np.argmax(energy) == 64
        assert energy[61:68].sum() / energy.sum() > 0.9

    def test_parseval_per_frame(self):
        x = RNG.standard_normal(4000)
        cfg = FILTER_STFT
        S = stft(x, cfg)
        frames = dsp.frame_signal(x, cfg) * cosine_window(160, np.float64)
        w = np.full(cfg.n_bins, 2.0)
        w[0] = w[-1] = 1.0
        lhs = (w * np.abs(S.frames) ** 2).sum(axis=1) / cfg.fft_length
        rhs = (frames**2).sum(axis=1)
        assert np.abs(lhs - rhs).max() / rhs.max() < 1e-8

    def test_single_impulse_spectrum_frame_matches_ola_oracle(self):
        # one frame with all bins equal to one, reconstructed by hand
        cfg = FILTER_STFT
        frames = np.ones((1, cfg.n_bins), dtype=complex)
        y = istft(Spectrogram(frames, cfg, origin_length=80))
        full = np.fft.irfft(np.ones(cfg.n_bins), cfg.fft_length)[:160]
        oracle = (full * cosine_window(160, np.float64))[80:160]
        assert np.allclose(y, oracle, atol=1e-12)


class TestMelFilterbank:
    def test_near_identity_configuration(self):
        # over a narrow low band the mel scale is near-linear, so bin-spaced
        # centers make the matrix approximately the identity
        fb = build_mel_filterbank(n_mels=31, fft_length=64, sample_rate=64, fmin=0, fmax=32)
        ident = fb.matrix @ fb.pseudo_inverse
        assert np.abs(ident - np.eye(31)).max() < 0.05
        row_peaks = fb.matrix.argmax(axis=1)
        assert np.array_equal(row_peaks, np.arange(1, 32))

    def test_default_coverage_against_independent_mel_formula(self):
        fb = build_mel_filterbank(80, 512, 16000, 0.0, 8000.0)
        # independent re-implementation of the scale
        mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
        imel = lambda m: 700.0 * (10 ** (m / 2595.0) - 1.0)
        pts = imel(np.linspace(mel(0.0), mel(8000.0), 82))
        assert np.allclose(pts[1:-1], fb.centers_hz)
        colsum = fb.matrix.sum(axis=0)
        inside = (np.arange(257) * 16000 / 512 > pts[0]) & (
            np.arange(257) * 16000 / 512 < pts[-1]
        )
        assert np.all(colsum[inside] > 0)
        assert np.all(np.isfinite(colsum))

    def test_pinv_identity(self):
        fb = build_mel_filterbank(80, 512, 16000, 0.0, 8000.0)
        M = fb.matrix
        err = np.linalg.norm(M @ fb.pseudo_inverse @ M - M) / np.linalg.norm(M)
        assert err < 1e-6

    def test_rejects_unresolvable_filters(self):
        with pytest.raises(ValueError):
            build_mel_filterbank(n_mels=200, fft_length=256, sample_rate=16000)

    def test_rejects_bad_range(self):
        with pytest.raises(ValueError):
            build_mel_filterbank(80, 512, 16000, fmin=4000, fmax=2000)


class TestMelSpectrogram:
    fb = build_mel_filterbank(80, 512, 16000, 0.0, 8000.0)

    def test_silence_hits_floor(self):
        m = mel_spectrogram(np.zeros(4000), self.fb)
        assert np.allclose(m.frames, np.log(1e-5))

    def test_white_noise_sane(self):
        m = mel_spectrogram(RNG.standard_normal(8000), self.fb)
        assert np.all(np.isfinite(m.frames))
        assert m.frames.var() > 0

    def test_sinusoid_band(self):
        x = 0.5 * np.sin(2 * np.pi * 1000.0 * np.arange(16000) / 16000.0)
        m = mel_spectrogram(x, self.fb)
        band = np.argmax(m.frames[100])
        assert band == np.argmin(np.abs(self.fb.centers_hz - 1000.0))

    def test_frame_rate(self):
        m = mel_spectrogram(np.zeros(16000), self.fb)
        assert m.frame_rate == 200.0
        assert m.n_frames == 201


class TestMelToLinear:
    fb = build_mel_filterbank(80, 512, 16000, 0.0, 8000.0)

    def test_row_space_roundtrip(self):
        # X in the row space of M is reproduced exactly by the pseudo-inverse
        rng = np.random.default_rng(5)
        v = rng.uniform(0.5, 2.0, size=(7, 80))
        X = v @ self.fb.matrix  # (7, 257), nonnegative and well above eps
        m = MelSpectrogram(np.log(X @ self.fb.matrix.T), 200.0)
        back = mel_to_linear(m, self.fb, eps=1e-12)
        assert np.abs(back - X).max() < 1e-8

    def test_floor(self):
        m = MelSpectrogram(np.full((3, 80), -50.0), 200.0)
        out = mel_to_linear(m, self.fb, eps=1e-5)
        assert out.min() >= 1e-5

    def test_smooth_spectrum_projection(self):
        # synthetic all-pole magnitude spectra; the oracle is the forward
        # projection M @ reconstruction vs the original mel energies
        rng = np.random.default_rng(9)
        w = np.linspace(0, np.pi, 257)
        rel = []
        for _ in range(20):
            r = rng.uniform(0.7, 0.95)
            th = rng.uniform(0.2, 2.8)
            g = rng.uniform(0.5, 2.0)
            mag = g / np.abs(
                (1 - r * np.exp(1j * (w - th))) * (1 - r * np.exp(1j * (w + th)))
            )
            melvec = self.fb.matrix @ mag
            m = MelSpectrogram(np.log(melvec)[None, :], 200.0)
            back = self.fb.matrix @ mel_to_linear(m, self.fb)[0]
            rel.append(np.linalg.norm(back - melvec) / np.linalg.norm(melvec))
        assert np.median(rel) < 0.05

    def test_rejects_bad_eps(self):
        m = MelSpectrogram(np.zeros((2, 80)), 200.0)
        with pytest.raises(ValueError):
            mel_to_linear(m, self.fb, eps=0.0)


class TestUpsample:
    def test_identity(self):
        f = RNG.standard_normal((5, 3))
        assert np.array_equal(upsample_linear(f, 1), f)

    def test_forced_ramp(self):
        out = upsample_linear(np.array([[0.0], [4.0]]), 4)
        assert np.allclose(out.ravel(), [0, 1, 2, 3, 4, 4, 4, 4])

    def test_constant(self):
        out = upsample_linear(np.full((4, 2), 3.5), 7)
        assert np.allclose(out, 3.5)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            upsample_linear(np.zeros((0, 2)), 2)


class TestGriffinLim:
    def test_sinusoid_convergence(self):
        x = 0.4 * np.sin(2 * np.pi * 500.0 * np.arange(8000) / 16000.0)
        mag = np.abs(stft(x, FILTER_STFT).frames)
        _, errors = griffin_lim(mag, FILTER_STFT, iterations=32, seed=3)
        assert 20 * np.log10(errors[-1] / errors[0]) <= -10.0
        assert np.all(np.diff(errors[1:]) <= 1e-12)

    def test_true_phase_initialization_is_exact(self):
        x = RNG.standard_normal(4000)
        S = stft(x, FILTER_STFT)
        y, errors = griffin_lim(
            np.abs(S.frames), FILTER_STFT, iterations=1, init_phase=np.angle(S.frames)
        )
        assert errors[0] < 1e-10
        assert np.abs(y[: len(x)] - x).max() < 1e-8

    def test_deterministic(self):
        mag = np.abs(stft(RNG.standard_normal(3200), FILTER_STFT).frames)
        y1, e1 = griffin_lim(mag, FILTER_STFT, iterations=8, seed=11)
        y2, e2 = griffin_lim(mag, FILTER_STFT, iterations=8, seed=11)
        assert np.array_equal(y1, y2)
        assert np.array_equal(e1, e2)

    def test_rejects_zero_iterations(self):
        with pytest.raises(ValueError):
            griffin_lim(np.ones((4, 257)), FILTER_STFT, iterations=0)
