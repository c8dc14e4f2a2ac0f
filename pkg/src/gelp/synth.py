"""End-to-end synthesis: mel-spectrogram in, waveform out.

The chain is conditioner -> linear upsampling -> noise-excited generator ->
per-frame all-pole envelope filter. Everything runs in the pre-emphasized
domain; callers de-emphasize before writing audio.

Utterances longer than `chunk_seconds` are synthesized in overlapping
chunks (overlap = the generator's receptive field) whose excitations are
cross-faded over one hop, bounding memory; the envelope filter then runs
once over the whole excitation. Chunks may be dispatched to worker threads
sharing the immutable weights.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tape
from .config import FeatureConfig, parse_kv_text
from .dsp import MelSpectrogram, mel_spectrogram, preemphasis
from .io import read_gelpw, write_gelpw
from .lpc import apply_stft_filter, envelope_track_from_mel
from .nets import (
    ModelWeights,
    NetConfig,
    conditioner_forward,
    expected_shapes,
    generator_forward,
    init_weights,
    receptive_field,
    toy_config,
)
from .precision import resolve_dtype
from .tape import Tensor, no_grad

CHUNK_SECONDS = 30.0


@dataclass
class VocoderModel:
    features: FeatureConfig
    generator: ModelWeights
    conditioner: ModelWeights
    discriminator: ModelWeights
    _filterbank: object = None

    def filterbank(self):
        if self._filterbank is None:
            self._filterbank = self.features.filterbank()
        return self._filterbank

    @property
    def dtype(self):
        return self.generator.dtype

    def serialize(self) -> tuple[str, dict[str, np.ndarray]]:
        config = (
            self.features.to_text()
            + self.generator.config.to_text("g.")
            + self.conditioner.config.to_text("c.")
            + self.discriminator.config.to_text("d.")
        )
        tensors: dict[str, np.ndarray] = {}
        for prefix, mw in (("g", self.generator), ("c", self.conditioner), ("d", self.discriminator)):
            for name, t in mw.tensors.items():
                tensors[f"{prefix}.{name}"] = t.data
        return config, tensors

    def save(self, path: str) -> None:
        config, tensors = self.serialize()
        write_gelpw(path, config, tensors)

    @classmethod
    def deserialize(cls, config_text: str, tensors: dict[str, np.ndarray], dtype=None) -> "VocoderModel":
        from .io import FormatError

        dtype = resolve_dtype(dtype)
        items = parse_kv_text(config_text)
        features = FeatureConfig.from_items(items)
        parts = {}
        for prefix in ("g", "c", "d"):
            cfg = NetConfig.from_items(
                {k[len(prefix) + 1 :]: v for k, v in items.items() if k.startswith(prefix + ".")}
            )
            want = expected_shapes(cfg)
            got = {}
            for name, shape in want.items():
                key = f"{prefix}.{name}"
                if key not in tensors:
                    raise FormatError(f"missing tensor {key}")
                if tuple(tensors[key].shape) != shape:
                    raise FormatError(
                        f"tensor {key} has shape {tuple(tensors[key].shape)}, "
                        f"config expects {shape}"
                    )
                got[name] = Tensor(tensors[key].astype(dtype))  # writable copy
            parts[prefix] = ModelWeights(cfg, got)
        return cls(features, parts["g"], parts["c"], parts["d"])

    @classmethod
    def load(cls, path: str, dtype=None) -> "VocoderModel":
        config_text, tensors = read_gelpw(path)
        return cls.deserialize(config_text, tensors, dtype=dtype)

    @classmethod
    def fresh(cls, features: FeatureConfig | None = None, seed: int = 0, size: str = "full", dtype=None) -> "VocoderModel":
        features = features or FeatureConfig()
        if size == "full":
            cfgs = (
                NetConfig.generator(),
                NetConfig.discriminator(),
                NetConfig.conditioner(n_mels=features.n_mels),
            )
        elif size == "toy":
            cfgs = (
                toy_config("generator"),
                toy_config("discriminator"),
                toy_config("conditioner", n_mels=features.n_mels),
            )
        else:
            raise ValueError(f"size must be 'full' or 'toy', got {size!r}")
        g, d, c = cfgs
        return cls(
            features,
            init_weights(g, seed, dtype),
            init_weights(c, seed + 1, dtype),
            init_weights(d, seed + 2, dtype),
        )


def extract_mel(samples: np.ndarray, features: FeatureConfig, fb=None) -> MelSpectrogram:
    """Mel analysis of a raw (un-emphasized) waveform."""
    fb = fb or features.filterbank()
    return mel_spectrogram(
        samples, fb, features.mel_stft, features.preemphasis, features.mel_floor
    )


def _generate_excitation(model: VocoderModel, cond_up: np.ndarray, z: np.ndarray) -> np.ndarray:
    with no_grad():
        out = generator_forward(
            Tensor(z[:, None][None]), Tensor(cond_up[None]), model.generator
        )
    return out.data[0, :, 0]


def synthesize(
    model: VocoderModel,
    mel: MelSpectrogram,
    seed: int = 0,
    out_length: int | None = None,
    threads: int = 1,
) -> np.ndarray:
    """Pre-emphasized-domain synthesis from mel frames, deterministic per seed."""
    feats = model.features
    dtype = model.dtype
    K = mel.n_frames
    hop = feats.hop_length
    T = out_length if out_length is not None else (K - 1) * hop
    if T > (K - 1) * hop + hop:
        raise ValueError(f"out_length {T} exceeds the conditioned span {(K - 1) * hop + hop}")
    fb = model.filterbank()

    with no_grad():
        cond = conditioner_forward(
            Tensor(mel.frames[None].astype(dtype)), model.conditioner
        ).data[0]
    cond_up = tape.upsample_op(hop, K, K * hop)(Tensor(cond[None])).data[0][:T]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(T).astype(dtype)

    chunk = int(CHUNK_SECONDS * feats.sample_rate)
    if T <= chunk:
        e_hat = _generate_excitation(model, cond_up, z)
    else:
        e_hat = _chunked_excitation(model, cond_up, z, chunk, threads)

    track = envelope_track_from_mel(mel, fb, feats.mel_stft, feats.lp_order, feats.envelope_eps)
    return apply_stft_filter(e_hat.astype(np.float64), track, feats.filter_stft)


def _chunked_excitation(model, cond_up, z, chunk, threads):
    T = len(cond_up)
    overlap = receptive_field(model.generator.config)
    hop = model.features.hop_length
    starts = list(range(0, T, chunk))
    jobs = []
    for s in starts:
        e = min(s + chunk, T)
        lo = max(0, s - overlap)
        hi = min(T, e + overlap)
        jobs.append((s, e, lo, hi))

    def run(job):
        s, e, lo, hi = job
        piece = _generate_excitation(model, cond_up[lo:hi], z[lo:hi])
        return piece[s - lo : e - lo + min(hop, T - e)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pieces = list(pool.map(run, jobs))
    else:
        pieces = [run(j) for j in jobs]

    out = np.zeros(T, dtype=cond_up.dtype)
    fade_in = np.linspace(0.0, 1.0, hop, endpoint=False, dtype=out.dtype)
    for (s, e, lo, hi), piece in zip(jobs, pieces):
        main = piece[: e - s]
        if s == 0:
            out[s:e] = main
        else:
            out[s : s + hop] *= 1.0 - fade_in
            out[s : s + hop] += fade_in * main[:hop]
            out[s + hop : e] = main[hop:]
        tail = piece[e - s :]
        if len(tail):
            out[e : e + len(tail)] = (1.0 - fade_in[: len(tail)]) * tail
    return out


def copy_synthesis(model: VocoderModel, samples: np.ndarray, seed: int = 0, threads: int = 1) -> np.ndarray:
    """Full chain on natural audio: mel -> synthesize -> de-emphasis."""
    from .dsp import deemphasis

    mel = extract_mel(samples, model.features, model.filterbank())
    emphasized = synthesize(model, mel, seed=seed, out_length=len(samples), threads=threads)
    return deemphasis(emphasized, model.features.preemphasis)


def sequential_reference_rate(model: VocoderModel, n_samples: int = 24, seed: int = 0) -> float:
    """Samples/second of a forced sample-by-sample generator loop.

    Each output sample re-runs the generator over one full receptive field,
    the cost shape of autoregressive inference with no state reuse.
    """
    feats = model.features
    rf = receptive_field(model.generator.config)
    dtype = model.dtype
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(rf + n_samples).astype(dtype)
    cond = rng.standard_normal((rf + n_samples, model.generator.config.conditioning_channels)).astype(dtype)
    half = (rf - 1) // 2
    t0 = time.perf_counter()
    for t in range(n_samples):
        window = slice(t, t + rf)
        out = _generate_excitation(model, cond[window], z[window])
        _ = out[half]
    return n_samples / (time.perf_counter() - t0)


def benchmark(model: VocoderModel, seconds: float, threads: int = 1, seed: int = 0,
              sequential_samples: int = 24) -> dict:
    """Measure parallel synthesis throughput and the parallel/sequential ratio."""
    feats = model.features
    sr = feats.sample_rate
    n = int(seconds * sr)
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sr
    probe = 0.4 * np.sin(2 * np.pi * 150.0 * t) + 0.2 * np.sin(2 * np.pi * 450.0 * t)
    probe += 0.02 * rng.standard_normal(n)
    mel = extract_mel(probe, feats, model.filterbank())

    t0 = time.perf_counter()
    out = synthesize(model, mel, seed=seed, out_length=n, threads=threads)
    elapsed = time.perf_counter() - t0
    parallel_rate = n / elapsed
    seq_rate = sequential_reference_rate(model, n_samples=sequential_samples, seed=seed)
    return {
        "samples": n,
        "seconds": elapsed,
        "samples_per_second": parallel_rate,
        "real_time_factor": parallel_rate / sr,
        "sequential_samples_per_second": seq_rate,
        "parallel_over_sequential": parallel_rate / seq_rate,
        "output_rms": float(np.sqrt(np.mean(out**2))),
    }
