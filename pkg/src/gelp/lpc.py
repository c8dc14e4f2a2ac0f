"""All-pole envelope recovery and frame-wise STFT-domain filtering.

Envelopes are fitted per frame from a mel-spectrogram: the mel energies are
mapped back to the linear frequency axis through the filterbank
pseudo-inverse, squared into a power spectrum, turned into an
autocorrelation sequence by inverse FFT, and solved with the Levinson-Durbin
recursion. The resulting analysis polynomial A(z) is minimum phase whenever
the autocorrelation is positive definite, so the synthesis filter 1/A(z) is
stable and its impulse response decays fast.

Filtering applies the per-frame frequency response multiplicatively in the
STFT domain. Frames are windowed by the squared cosine window (the analysis
and synthesis windows of the transform, both applied before the FFT) and the
full inverse-FFT output is overlap-added, so a stationary filter acts as an
exact linear convolution as long as its impulse response fits inside the
fft_length - window_length zero-padding headroom.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .dsp import (
    FILTER_STFT,
    MEL_STFT,
    MelFilterbank,
    MelSpectrogram,
    StftConfig,
    cosine_window,
    frame_signal,
    mel_to_linear,
)
from .validation import as_samples

log = logging.getLogger(__name__)

LP_ORDER = 24            # fs/1000 + 8 at 16 kHz
RESPONSE_EPS = 1e-5      # magnitude floor inside the synthesis response
AUTOCORR_REG = 1e-9      # relative ridge added to r[0]


@dataclass(frozen=True)
class LpcFrame:
    """One frame's analysis polynomial, a[0] == 1."""
    a: np.ndarray
    error: float

    def __post_init__(self):
        if self.a.ndim != 1 or self.a[0] != 1.0:
            raise ValueError("coefficients must be 1-D with a[0] == 1")

    @property
    def order(self) -> int:
        return len(self.a) - 1


@dataclass
class LpcTrack:
    """Per-frame coefficients with precomputed frequency responses."""
    coefficients: np.ndarray   # (K, order+1)
    analysis: np.ndarray       # (K, n_bins) complex, A_k
    synthesis: np.ndarray      # (K, n_bins) complex, H_k
    eps: float = RESPONSE_EPS

    def __post_init__(self):
        mag = np.abs(self.synthesis) * np.maximum(np.abs(self.analysis), self.eps)
        if np.abs(mag - 1.0).max() > 1e-9:
            raise ValueError("synthesis response is not the floored inverse of analysis")

    @property
    def n_frames(self) -> int:
        return self.coefficients.shape[0]

    @property
    def order(self) -> int:
        return self.coefficients.shape[1] - 1

    @property
    def frames(self) -> list[LpcFrame]:
        return [LpcFrame(a, np.nan) for a in self.coefficients]


def autocorr_from_power(power: np.ndarray, fft_length: int, max_lag: int) -> np.ndarray:
    """Autocorrelation lags 0..max_lag of a (half-spectrum) power density.

    The power values are the non-negative-frequency bins; the inverse FFT of
    the implied even, conjugate-symmetric full spectrum is real.
    """
    power = np.asarray(power, dtype=np.float64)
    if power.ndim != 1 or len(power) != fft_length // 2 + 1:
        raise ValueError(f"power must have fft_length/2+1 = {fft_length // 2 + 1} bins")
    if np.any(power < 0):
        raise ValueError("power must be non-negative")
    if not np.any(power > 0):
        raise ValueError("all-zero power spectrum has no envelope")
    if max_lag >= fft_length:
        raise ValueError("max_lag must be < fft_length")
    return sfft.irfft(power, fft_length)[: max_lag + 1]


def _levinson_batch(R: np.ndarray, order: int):
    """Vectorized Levinson-Durbin over a batch of autocorrelation rows.

    Returns (a, err, ok) where rows with non-positive-definite input carry
    ok=False and undefined coefficients.
    """
    K = R.shape[0]
    a = np.zeros((K, order + 1), dtype=R.dtype)
    a[:, 0] = 1.0
    err = R[:, 0].copy()
    ok = err > 0
    safe = np.where(ok, err, 1.0)
    for m in range(1, order + 1):
        acc = R[:, m] + np.einsum("kj,kj->k", a[:, 1:m], R[:, m - 1 : 0 : -1])
        k = -acc / safe
        a[:, 1 : m + 1] = a[:, 1 : m + 1] + k[:, None] * a[:, m - 1 :: -1][:, : m]
        err = err * (1.0 - k * k)
        ok &= err > 0
        safe = np.where(ok, err, 1.0)
    return a, err, ok


def levinson_durbin(r: np.ndarray, order: int) -> tuple[LpcFrame, float]:
    """Solve the normal equations for one autocorrelation sequence.

    Returns the analysis polynomial (a[0] = 1) and the final prediction-error
    energy. Raises when the sequence is not positive definite.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1 or len(r) <= order:
        raise ValueError("need more than `order` autocorrelation lags")
    if r[0] <= 0:
        raise ValueError("r[0] must be positive")
    a, err, ok = _levinson_batch(r[None, : order + 1], order)
    if not ok[0]:
        raise ValueError("autocorrelation is not positive definite (degenerate spectrum)")
    return LpcFrame(a[0], float(err[0])), float(err[0])


def lp_frequency_response(a: np.ndarray, fft_length: int) -> np.ndarray:
    """A = FFT of the zero-padded polynomial; non-negative-frequency bins."""
    a = np.asarray(a, dtype=np.float64)
    if fft_length <= len(a) - 1:
        raise ValueError("fft_length must exceed the filter order")
    return sfft.rfft(a, fft_length)


def synthesis_response(A: np.ndarray, eps: float = RESPONSE_EPS) -> np.ndarray:
    """H = exp(-i*angle(A)) / max(|A|, eps): sign-inverted phase over floored magnitude."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return np.exp(-1j * np.angle(A)) / np.maximum(np.abs(A), eps)


def envelope_track_from_mel(
    m: MelSpectrogram,
    fb: MelFilterbank,
    cfg: StftConfig = MEL_STFT,
    order: int = LP_ORDER,
    eps: float = RESPONSE_EPS,
) -> LpcTrack:
    """Fit one all-pole envelope per mel frame.

    Frames whose reconstructed spectrum is numerically degenerate fall back
    to the white filter a = [1, 0, ...] with a logged warning.
    """
    mag = mel_to_linear(m, fb)
    power = mag.astype(np.float64) ** 2
    r = sfft.irfft(power, cfg.fft_length, axis=1)[:, : order + 1]
    r[:, 0] *= 1.0 + AUTOCORR_REG
    a, _, good = _levinson_batch(r, order)
    if not np.all(good):
        bad = np.flatnonzero(~good)
        log.warning(
            "envelope fit degenerate in %d frame(s) (first: %d); using white filter",
            len(bad), int(bad[0]),
        )
        a[bad] = 0.0
        a[bad, 0] = 1.0
    A = sfft.rfft(a, cfg.fft_length, axis=1)
    return LpcTrack(a, A, synthesis_response(A, eps), eps)


def _stft_filter(x: np.ndarray, response: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Multiply framed spectra by per-frame responses, exactly.

    The cosine window is applied twice on the analysis side (as both the
    analysis and synthesis window of the transform, summing to one across
    hops) and the full-length inverse FFT is overlap-added, so each frame's
    filter acts as a linear convolution within the zero-padding headroom.
    """
    x = as_samples(x)
    cfg.require_cola()
    K = cfg.n_frames(len(x))
    if response.shape != (K, cfg.n_bins):
        raise ValueError(
            f"filter track has {response.shape[0]} frames, signal needs {K}"
        )
    frames = frame_signal(x, cfg)
    w = cosine_window(cfg.window_length, frames.dtype)
    spec = sfft.rfft(frames * (w * w), n=cfg.fft_length, axis=1)
    g = sfft.irfft(spec * response, n=cfg.fft_length, axis=1)
    hop, n = cfg.hop_length, cfg.fft_length
    last_j = ((n - 1) // hop) * hop
    out = np.zeros(last_j + K * hop, dtype=g.dtype)
    for j in range(0, n, hop):
        b = min(hop, n - j)
        out[j : j + K * hop].reshape(K, hop)[:, :b] += g[:, j : j + b]
    left = cfg.window_length // 2
    return out[left : left + len(x)]


def apply_stft_filter(e: np.ndarray, track: LpcTrack, cfg: StftConfig = FILTER_STFT) -> np.ndarray:
    """Run an excitation through the all-pole synthesis responses (1/A per frame)."""
    return _stft_filter(e, track.synthesis, cfg)


def inverse_filter(x: np.ndarray, track: LpcTrack, cfg: StftConfig = FILTER_STFT) -> np.ndarray:
    """Whiten a signal with the per-frame analysis responses (A per frame)."""
    return _stft_filter(x, track.analysis, cfg)


def track_from_coefficients(
    a: np.ndarray, fft_length: int = FILTER_STFT.fft_length, eps: float = RESPONSE_EPS
) -> LpcTrack:
    """Build a track directly from (K, order+1) coefficient rows."""
    a = np.asarray(a, dtype=np.float64)
    A = sfft.rfft(a, fft_length, axis=1)
    return LpcTrack(a, A, synthesis_response(A, eps), eps)
