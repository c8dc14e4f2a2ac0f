"""Deterministic signal-processing primitives.

Pre/de-emphasis, cosine-windowed STFT/ISTFT with exact overlap-add
reconstruction, mel filterbank with its least-squares pseudo-inverse,
frame-rate upsampling, and a Griffin-Lim phase recovery baseline.

Framing policy: signals are reflect-padded by half a window on the left and
by however much is needed on the right so that frame k is centered at sample
k*hop of the original signal and every original sample is covered by a full
complement of windows. For a signal of T samples this yields
K = ceil(T / hop) + 1 frames.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .precision import resolve_dtype
from .validation import as_frames, as_samples, check_finite, check_in_range

SAMPLE_RATE = 16000
HOP_LENGTH = 80          # 200 Hz frame rate at 16 kHz
MEL_WINDOW = 400         # 25 ms analysis window for mel features
FILTER_WINDOW = 160      # 2 * hop, satisfies the squared-cosine OLA identity
FFT_LENGTH = 512
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
PREEMPHASIS = 0.97
MEL_FLOOR = 1e-5
MEL_EPS = 1e-5


@dataclass(frozen=True)
class StftConfig:
    """Window/hop/FFT geometry for framed transforms.

    `istft` and the STFT-domain filters additionally require
    hop_length * 2 == window_length (the squared-cosine overlap-add
    identity); analysis-only configs such as the mel front end may use

    longer windows.
    """
    window_length: int
    hop_length: int
    fft_length: int

    def __post_init__(self):
        if self.hop_length <= 0 or self.window_length <= 0:
            raise ValueError("window_length and hop_length must be positive")
        if self.fft_length < self.window_length:
            raise ValueError("fft_length must be >= window_length")
        if self.fft_length & (self.fft_length - 1):
            raise ValueError("fft_length must be a power of two")

    @property
    def n_bins(self) -> int:
        return self.fft_length // 2 + 1

    @property
    def is_cola(self) -> bool:
        return 2 * self.hop_length == self.window_length

    def require_cola(self):
        if not self.is_cola:
            raise ValueError(
                "overlap-add synthesis requires hop_length * 2 == window_length, "
                f"got window={self.window_length} hop={self.hop_length}"
            )

    def n_frames(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.hop_length) + 1


MEL_STFT = StftConfig(MEL_WINDOW, HOP_LENGTH, FFT_LENGTH)
FILTER_STFT = StftConfig(FILTER_WINDOW, HOP_LENGTH, FFT_LENGTH)


@dataclass
class Spectrogram:
    frames: np.ndarray       # (K, n_bins) complex
    config: StftConfig
    origin_length: int

    def __post_init__(self):
        check_finite(self.frames, "spectrogram frames")


@dataclass
class MelSpectrogram:
    frames: np.ndarray       # (K, n_mels) natural-log mel energies
    frame_rate: float

    def __post_init__(self):
        check_finite(self.frames, "mel frames")
        if self.frames.ndim != 2 or self.frames.shape[1] < 1:
            raise ValueError(f"mel frames must be (K, n_mels), got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


def cosine_window(length: int, dtype=None) -> np.ndarray:
    """w[n] = sin(pi * (n + 0.5) / length); shifted by hop=length/2 its square sums to 1."""
    n = np.arange(length, dtype=resolve_dtype(dtype))
    return np.sin(np.pi * (n + 0.5) / length)


def preemphasis(x: np.ndarray, alpha: float = PREEMPHASIS) -> np.ndarray:
    """y[n] = x[n] - alpha * x[n-1], with y[0] = x[0]."""
    x = as_samples(x)
    check_in_range(alpha, 0.0, 1.0, "alpha")
    y = x.copy()
    y[1:] -= alpha * x[:-1]
    return y


def deemphasis(y: np.ndarray, alpha: float = PREEMPHASIS) -> np.ndarray:
    """Exact inverse of `preemphasis`: x[n] = y[n] + alpha * x[n-1]."""
    y = as_samples(y)
    check_in_range(alpha, 0.0, 1.0, "alpha")
    from scipy.signal import lfilter

    return lfilter([1.0], [1.0, -alpha], y)


def pad_for_frames(x: np.ndarray, cfg: StftConfig) -> tuple[np.ndarray, int]:
    """Reflect-pad so K = ceil(T/hop)+1 full frames cover the signal.

    Returns (padded, left_pad); frame k of the padded signal is centered at
    sample k*hop of the original.
    """
    T = len(x)
    if T < 2:
        raise ValueError("signal too short to frame")
    K = cfg.n_frames(T)
    left = cfg.window_length // 2
    right = (K - 1) * cfg.hop_length + cfg.window_length - T - left
    return np.pad(x, (left, max(right, 0)), mode="reflect"), left


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Slice the padded signal into overlapping (K, window_length) frames."""
    xp, _ = pad_for_frames(x, cfg)
    K = cfg.n_frames(len(x))
    s = xp.strides[0]
    frames = np.lib.stride_tricks.as_strided(
        xp, (K, cfg.window_length), (cfg.hop_length * s, s)
    )
    return frames.copy()


def stft(x: np.ndarray, cfg: StftConfig) -> Spectrogram:
    """Cosine-windowed STFT; only non-negative-frequency bins are stored."""
    x = as_samples(x)
    frames = frame_signal(x, cfg)
    w = cosine_window(cfg.window_length, frames.dtype)
    spec = sfft.rfft(frames * w, n=cfg.fft_length, axis=1)
    return Spectrogram(spec, cfg, len(x))


def istft(S: Spectrogram) -> np.ndarray:
    """Windowed overlap-add inverse of `stft`.

    With the cosine window and hop = window/2 the shifted squared windows sum
    to one, so istft(stft(x)) reproduces x over the original sample range.
    """
    cfg = S.config
    cfg.require_cola()
    frames = sfft.irfft(S.frames, n=cfg.fft_length, axis=1)[:, : cfg.window_length]
    w = cosine_window(cfg.window_length, frames.dtype)
    frames = frames * w
    K, hop = frames.shape[0], cfg.hop_length
    left = cfg.window_length // 2
    out = np.zeros((K - 1) * hop + cfg.window_length, dtype=frames.dtype)
    for j in range(0, cfg.window_length, hop):
        out[j : j + K * hop].reshape(K, hop)[...] += frames[:, j : j + hop]
    return out[left : left + S.origin_length]


@dataclass
class MelFilterbank:
    """Triangular mel filterbank and its least-squares pseudo-inverse."""
    matrix: np.ndarray          # (n_mels, n_bins) non-negative weights
    pseudo_inverse: np.ndarray  # (n_bins, n_mels)
    sample_rate: int
    fft_length: int
    fmin: float
    fmax: float
    centers_hz: np.ndarray = field(repr=False, default=None)

    @property
    def n_mels(self) -> int:
        return self.matrix.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(
    n_mels: int = N_MELS,
    fft_length: int = FFT_LENGTH,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = FMIN,
    fmax: float = FMAX,
) -> MelFilterbank:
    """Triangular filters with centers uniform on the mel scale.

    Rows are normalized to unit sum so a constant spectrum maps to constant
    mel energies; the pseudo-inverse of a flat mel vector is then itself
    near-flat, which the envelope floor behavior relies on.
    """
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if not (0 <= fmin < fmax <= sample_rate / 2):
        raise ValueError(f"need 0 <= fmin < fmax <= nyquist, got [{fmin}, {fmax}]")
    points = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_hz = np.arange(fft_length // 2 + 1) * sample_rate / fft_length
    lo, mid, hi = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (bin_hz - lo) / np.maximum(mid - lo, 1e-12)
    falling = (hi - bin_hz) / np.maximum(hi - mid, 1e-12)
    M = np.maximum(0.0, np.minimum(rising, falling))
    dead = ~(M > 0).any(axis=1)
    if dead.any():
        raise ValueError(
            f"{int(dead.sum())} mel filters have no FFT bin support; "
            "reduce n_mels or increase fft_length"
        )
    M /= M.sum(axis=1, keepdims=True)
    return MelFilterbank(M, np.linalg.pinv(M), sample_rate, fft_length, fmin, fmax,
                         centers_hz=points[1:-1])


def mel_spectrogram(
    x: np.ndarray,
    fb: MelFilterbank,
    cfg: StftConfig = MEL_STFT,
    alpha: float = PREEMPHASIS,
    floor: float = MEL_FLOOR,
) -> MelSpectrogram:
    """Natural-log mel energies of the pre-emphasized magnitude spectrogram."""
    if cfg.fft_length != fb.fft_length:
        raise ValueError("filterbank fft_length does not match the STFT config")
    mag = np.abs(stft(preemphasis(x, alpha), cfg).frames)
    mel = np.log(np.maximum(mag @ fb.matrix.T, floor))
    return MelSpectrogram(mel, fb.sample_rate / cfg.hop_length)


def mel_to_linear(m: MelSpectrogram, fb: MelFilterbank, eps: float = MEL_EPS) -> np.ndarray:
    """Magnitude frames recovered through the filterbank pseudo-inverse,
    floored at eps to stay strictly positive."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if m.n_mels != fb.n_mels:
        raise ValueError(f"mel has {m.n_mels} bands, filterbank has {fb.n_mels}")
    return np.maximum(np.exp(m.frames) @ fb.pseudo_inverse.T, eps)


def upsample_linear(frames: np.ndarray, factor: int) -> np.ndarray:
    """Linear interpolation of frame-rate features to factor-times the rate.

    Output step t maps to frame position t/factor; positions past the last
    frame hold its value.
    """
    frames = as_frames(frames)
    if frames.shape[0] < 1:
        raise ValueError("need at least one frame to upsample")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return frames.copy()
    K = frames.shape[0]
    pos = np.arange(K * factor, dtype=frames.dtype) / factor
    i = np.minimum(pos.astype(np.int64), K - 1)
    j = np.minimum(i + 1, K - 1)
    g = (pos - i).astype(frames.dtype)[:, None]
    return (1.0 - g) * frames[i] + g * frames[j]


def griffin_lim(
    mag: np.ndarray,
    cfg: StftConfig = FILTER_STFT,
    iterations: int = 32,
    seed: int = 0,
    init_phase: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Iterative phase recovery from magnitude frames.

    Starting from seeded uniform-random phases (or `init_phase` when given,
    which is the deterministic test hook), alternately resynthesizes and
    re-applies the known magnitudes:  x <- istft(mag * exp(i*angle(stft(x)))).

    Returns (waveform, errors) where errors[i] is the spectral convergence
    error ||  |STFT(x_i)| - mag || / ||mag|| after i iterations (errors[0]
    measures the initialization).
    """
    mag = np.asarray(mag, dtype=np.float64)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if mag.ndim != 2 or mag.shape[1] != cfg.n_bins:
        raise ValueError(f"mag must be (K, {cfg.n_bins}), got {mag.shape}")
    cfg.require_cola()
    K = mag.shape[0]
    origin = (K - 1) * cfg.hop_length
    if init_phase is None:
        rng = np.random.default_rng(seed)
        init_phase = rng.uniform(-np.pi, np.pi, size=mag.shape)
    mag_norm = np.linalg.norm(mag)
    x = istft(Spectrogram(mag * np.exp(1j * init_phase), cfg, origin))
    errors = []
    for _ in range(iterations):
        S = stft(x, cfg).frames
        errors.append(np.linalg.norm(np.abs(S) - mag) / mag_norm)
        x = istft(Spectrogram(mag * np.exp(1j * np.angle(S)), cfg, origin))
    errors.append(np.linalg.norm(np.abs(stft(x, cfg).frames) - mag) / mag_norm)
    return x, np.asarray(errors)
