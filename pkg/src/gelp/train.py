"""Training loop: segmentation, excitation-domain pre-training, adversarial
speech-domain training with alternating Adam updates, and checkpointing.

One iteration processes one random segment. The critic step scores random
receptive-field crops of the target and the (detached) generated signal and
minimizes the Wasserstein loss plus gradient penalties. The generator step
re-synthesizes with fresh noise and minimizes the weighted STFT loss minus
the critic score; the conditioner is updated jointly and receives its
gradient only through the generator's input (the critic sees a detached
copy of the conditioning).

During the pre-training phase all targets live in the residual excitation
domain (the inverse filter applied to the target speech) and the envelope
filter is left out of the generator's path; afterwards targets switch to
the speech signal and the filter joins the graph.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tape
from .config import FeatureConfig
from .dsp import mel_spectrogram, preemphasis, upsample_linear
from .io import read_checkpoint, write_checkpoint
from .losses import LossReport, LossWeights, gan_loss, gradient_penalty, r1_penalty, stft_loss, total_losses
from .lpc import apply_stft_filter, envelope_track_from_mel, inverse_filter
from .nets import (
    ModelWeights,
    conditioner_forward,
    discriminator_forward,
    generator_forward,
    receptive_field,
    stft_filter_graph,
)
from .tape import Tensor, backward, no_grad
from .synth import VocoderModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    segment_seconds: float = 1.0
    pretrain_iters: int = 500
    total_iters: int = 2000
    crops_per_iter: int = 32
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.pretrain_iters > self.total_iters:
            raise ValueError("pretrain_iters must not exceed total_iters")
        if self.crops_per_iter < 1:
            raise ValueError("crops_per_iter must be >= 1")

    def to_text(self, prefix: str = "train.") -> str:
        out = []
        for f in fields(self):
            if f.name == "loss_weights":
                w = self.loss_weights
                out.append(f"{prefix}lambda1={w.lambda1}\n{prefix}lambda2={w.lambda2}\n{prefix}lambda3={w.lambda3}\n")
            else:
                out.append(f"{prefix}{f.name}={getattr(self, f.name)}\n")
        return "".join(out)

    @classmethod
    def from_items(cls, items: dict, prefix: str = "train.") -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name == "loss_weights":
                continue
            raw = items.get(prefix + f.name)
            if raw is not None:
                kwargs[f.name] = type(getattr(cls(), f.name))(raw)
        lams = [items.get(prefix + k) for k in ("lambda1", "lambda2", "lambda3")]
        if any(v is not None for v in lams):
            defaults = LossWeights()
            kwargs["loss_weights"] = LossWeights(
                *(float(v) if v is not None else getattr(defaults, n)
                  for v, n in zip(lams, ("lambda1", "lambda2", "lambda3")))
            )
        return cls(**kwargs)


class AdamState:
    """First/second moments per parameter plus the shared step count."""

    def __init__(self, params: list[tuple[str, Tensor]]):
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}


def adam_step(
    params: list[tuple[str, Tensor]],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> None:
    """Bias-corrected Adam update, in place."""
    state.t += 1
    c1 = 1.0 - cfg.beta1**state.t
    c2 = 1.0 - cfg.beta2**state.t
    for name, p in params:
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def make_segments(corpus: list[np.ndarray], seconds: float, sample_rate: int, rng):
    """Endless stream of fixed-length segments: random utterance, random offset."""
    if not corpus:
        raise ValueError("corpus is empty")
    length = int(round(seconds * sample_rate))
    while True:
        utt = corpus[int(rng.integers(len(corpus)))]
        if len(utt) < length:
            utt = np.pad(utt, (0, length - len(utt)), mode="reflect")
        offset = int(rng.integers(0, len(utt) - length + 1))
        yield utt[offset : offset + length]


def crop_for_discriminator(
    real: np.ndarray, fake: np.ndarray, cond: np.ndarray, n: int, rf: int, rng
):
    """n aligned (real, fake, conditioning) crops of rf samples each."""
    T = len(real)
    if rf > T:
        raise ValueError(f"receptive field {rf} exceeds segment length {T}")
    if fake.shape != real.shape or cond.shape[0] != T:
        raise ValueError("real/fake/conditioning lengths disagree")
    pos = rng.integers(0, T - rf + 1, size=n)
    real_c = np.stack([real[p : p + rf] for p in pos])[:, :, None]
    fake_c = np.stack([fake[p : p + rf] for p in pos])[:, :, None]
    cond_c = np.stack([cond[p : p + rf] for p in pos])
    return real_c, fake_c, cond_c, pos


@dataclass
class TrainState:
    iteration: int
    model: VocoderModel
    adam_g: AdamState
    adam_d: AdamState
    rng: np.random.Generator

    def phase(self, cfg: TrainConfig) -> str:
        return "excitation" if self.iteration < cfg.pretrain_iters else "speech"


def init_state(model: VocoderModel, cfg: TrainConfig) -> TrainState:
    return TrainState(
        iteration=0,
        model=model,
        adam_g=AdamState(_joint_params(model)),
        adam_d=AdamState(model.discriminator.parameters()),
        rng=np.random.default_rng(cfg.seed),
    )


def _joint_params(model: VocoderModel) -> list[tuple[str, Tensor]]:
    return [(f"g.{n}", t) for n, t in model.generator.parameters()] + [
        (f"c.{n}", t) for n, t in model.conditioner.parameters()
    ]


def compute_mel_stats(corpus: list[np.ndarray], features: FeatureConfig):
    """Per-band mean and standard deviation of log-mel energies."""
    fb = features.filterbank()
    frames = [
        mel_spectrogram(preemphasis(u, features.preemphasis), fb, features.mel_stft, 0.0,
                        features.mel_floor).frames
        for u in corpus
    ]
    stacked = np.concatenate(frames, axis=0)
    return stacked.mean(axis=0), stacked.std(axis=0)


def _grads_to_arrays(grads, params):
    out = {}
    finite = True
    for name, p in params:
        g = grads.get(p)
        arr = np.zeros_like(p.data) if g is None else g.data
        if not np.all(np.isfinite(arr)):
            finite = False
        out[name] = arr
    return out, finite


@dataclass
class IterationInputs:
    """Shared per-segment quantities consumed by both update steps."""
    phase: str
    x: np.ndarray            # pre-emphasized segment
    target: np.ndarray       # x, or its excitation during pre-training
    mel_t: Tensor
    response: np.ndarray     # synthesis responses aligned to the segment
    track: object
    rf: int


def prepare_iteration(state: TrainState, segment: np.ndarray, cfg: TrainConfig) -> IterationInputs:
    model = state.model
    feats = model.features
    dtype = model.generator.dtype
    fb = model.filterbank()
    phase = state.phase(cfg)
    x = preemphasis(segment, feats.preemphasis).astype(dtype)
    T = len(x)
    mel = mel_spectrogram(x.astype(np.float64), fb, feats.mel_stft, 0.0, feats.mel_floor)
    track = envelope_track_from_mel(mel, fb, feats.mel_stft, feats.lp_order, feats.envelope_eps)
    response = track.synthesis[: feats.filter_stft.n_frames(T)]
    if phase == "excitation":
        target = inverse_filter(x.astype(np.float64), track, feats.filter_stft).astype(dtype)
    else:
        target = x
    return IterationInputs(
        phase=phase,
        x=x,
        target=target,
        mel_t=Tensor(mel.frames[None].astype(dtype)),
        response=response,
        track=track,
        rf=receptive_field(model.discriminator.config),
    )


def critic_step(state: TrainState, prep: IterationInputs, cfg: TrainConfig) -> dict:
    """Score crops of the target against a detached synthesis, update D."""
    model = state.model
    feats = model.features
    dtype = model.generator.dtype
    rng = state.rng
    T = len(prep.x)
    model.generator.set_trainable(False)
    model.conditioner.set_trainable(False)
    model.discriminator.set_trainable(True)
    z = rng.standard_normal(T).astype(dtype)
    with no_grad():
        cond = conditioner_forward(prep.mel_t, model.conditioner)
        cond_up = upsample_linear(cond.data[0], feats.hop_length)[:T].astype(dtype)
        e_hat = generator_forward(
            Tensor(z[:, None][None]), Tensor(cond_up[None]), model.generator
        ).data[0, :, 0]
    if prep.phase == "speech":
        fake = apply_stft_filter(
            e_hat.astype(np.float64), prep.track, feats.filter_stft
        ).astype(dtype)
    else:
        fake = e_hat
    real_c, fake_c, cond_c, _ = crop_for_discriminator(
        prep.target, fake, cond_up, cfg.crops_per_iter, prep.rf, rng
    )
    cond_ct = Tensor(cond_c)
    critic = lambda xc, cc: discriminator_forward(xc, cc, model.discriminator)
    d_term, _ = gan_loss(critic(Tensor(real_c), cond_ct), critic(Tensor(fake_c), cond_ct))
    gp = gradient_penalty(real_c, fake_c, cond_ct, critic, rng)
    r1 = r1_penalty(real_c, cond_ct, critic)
    zero = Tensor(np.zeros((), dtype=dtype))
    _, l_d = total_losses(zero, d_term, gp, r1, cfg.loss_weights)
    d_params = model.discriminator.parameters()
    d_grads, finite = _grads_to_arrays(backward(l_d, wrt=[p for _, p in d_params]), d_params)
    if finite:
        adam_step(d_params, d_grads, state.adam_d, cfg)
    else:
        log.warning("iteration %d: non-finite critic gradients, update skipped", state.iteration)
    return {
        "l_gan_d": float(d_term.data),
        "l_gp": float(gp.data),
        "l_r1": float(r1.data),
        "total_d": float(l_d.data),
        "cond_up": cond_up,
    }


def generator_step(state: TrainState, prep: IterationInputs, cfg: TrainConfig) -> dict:
    """Re-synthesize with fresh noise, update G and C jointly."""
    model = state.model
    feats = model.features
    dtype = model.generator.dtype
    rng = state.rng
    T = len(prep.x)
    model.generator.set_trainable(True)
    model.conditioner.set_trainable(True)
    model.discriminator.set_trainable(False)
    z = rng.standard_normal(T).astype(dtype)
    cond = conditioner_forward(prep.mel_t, model.conditioner)
    cond_up = tape.narrow(
        tape.upsample_op(feats.hop_length, cond.shape[1], cond.shape[1] * feats.hop_length)(cond),
        1, 0, T,
    )
    e_hat = generator_forward(Tensor(z[:, None][None]), cond_up, model.generator)
    flat = tape.reshape(e_hat, (1, T))
    if prep.phase == "speech":
        ctype = np.complex128 if dtype == np.float64 else np.complex64
        x_hat = stft_filter_graph(flat, prep.response.astype(ctype), feats.filter_stft)
    else:
        x_hat = flat
    l_stft = stft_loss(Tensor(prep.target[None]), x_hat, feats.filter_stft)
    pos = rng.integers(0, T - prep.rf + 1, size=cfg.crops_per_iter)
    fake_crops = tape.gather_crops_op(pos, prep.rf, T)(x_hat)
    # the critic sees a detached copy of the conditioning: C learns only
    # through the generator's input
    cond_crops = Tensor(np.stack([cond_up.data[0, p : p + prep.rf] for p in pos]))
    sf = discriminator_forward(fake_crops, cond_crops, model.discriminator)
    with no_grad():
        sr = discriminator_forward(
            Tensor(np.stack([prep.target[p : p + prep.rf] for p in pos])[:, :, None]),
            cond_crops,
            model.discriminator,
        )
    l_gan = tape.sub(tape.mean(sf), Tensor(np.asarray(sr.data.mean(), dtype=dtype)))
    zero = Tensor(np.zeros((), dtype=dtype))
    l_gc, _ = total_losses(l_stft, l_gan, zero, zero, cfg.loss_weights)
    g_params = _joint_params(model)
    g_grads, finite = _grads_to_arrays(backward(l_gc, wrt=[p for _, p in g_params]), g_params)
    if finite:
        adam_step(g_params, g_grads, state.adam_g, cfg)
    else:
        log.warning("iteration %d: non-finite generator gradients, update skipped", state.iteration)
    return {
        "l_stft": float(l_stft.data),
        "l_gan_g": float(-sf.data.mean()),
        "total_g": float(l_gc.data),
    }


def train_iteration(state: TrainState, segment: np.ndarray, cfg: TrainConfig) -> LossReport:
    """One critic update followed by one generator/conditioner update."""
    t0 = time.perf_counter()
    prep = prepare_iteration(state, segment, cfg)
    d_out = critic_step(state, prep, cfg)
    g_out = generator_step(state, prep, cfg)
    state.iteration += 1
    return LossReport(
        iteration=state.iteration - 1,
        l_stft=g_out["l_stft"],
        l_gan_d=d_out["l_gan_d"],
        l_gan_g=g_out["l_gan_g"],
        l_gp=d_out["l_gp"],
        l_r1=d_out["l_r1"],
        total_g=g_out["total_g"],
        total_d=d_out["total_d"],
        wall_time=time.perf_counter() - t0,
    )


def save_checkpoint(path: str, state: TrainState, cfg: TrainConfig) -> None:
    model = state.model
    weights_cfg, weights = model.serialize()
    opt_tensors: dict[str, np.ndarray] = {}
    for prefix, mw in (("g", model.generator), ("c", model.conditioner), ("d", model.discriminator)):
        for name, t in mw.tensors.items():
            opt_tensors[f"param.{prefix}.{name}"] = t.data
    for name, arr in state.adam_g.m.items():
        opt_tensors[f"adam_g.m.{name}"] = arr
    for name, arr in state.adam_g.v.items():
        opt_tensors[f"adam_g.v.{name}"] = arr
    for name, arr in state.adam_d.m.items():
        opt_tensors[f"adam_d.m.{name}"] = arr
    for name, arr in state.adam_d.v.items():
        opt_tensors[f"adam_d.v.{name}"] = arr
    state_cfg = (
        f"iteration={state.iteration}\n"
        f"adam_g.t={state.adam_g.t}\n"
        f"adam_d.t={state.adam_d.t}\n"
        f"rng={json.dumps(state.rng.bit_generator.state)}\n" + cfg.to_text()
    )
    write_checkpoint(path, weights_cfg, weights, state_cfg, opt_tensors)


def load_checkpoint(path: str, dtype=None):
    """Restore (state, config); in 64-bit mode the resume is bit-exact."""
    from .config import parse_kv_text

    config_text, _, state_config, opt = read_checkpoint(path)
    model = VocoderModel.deserialize(config_text, {
        name[len("param."):]: arr for name, arr in opt.items() if name.startswith("param.")
    }, dtype=dtype)
    items = parse_kv_text(
        "\n".join(l for l in state_config.splitlines() if not l.startswith("rng="))
    )
    cfg = TrainConfig.from_items(items)
    state = init_state(model, cfg)
    state.iteration = int(items["iteration"])
    state.adam_g.t = int(items["adam_g.t"])
    state.adam_d.t = int(items["adam_d.t"])
    for name, arr in opt.items():
        dt = model.generator.dtype
        if name.startswith("adam_g.m."):
            state.adam_g.m[name[len("adam_g.m."):]] = arr.astype(dt)
        elif name.startswith("adam_g.v."):
            state.adam_g.v[name[len("adam_g.v."):]] = arr.astype(dt)
        elif name.startswith("adam_d.m."):
            state.adam_d.m[name[len("adam_d.m."):]] = arr.astype(dt)
        elif name.startswith("adam_d.v."):
            state.adam_d.v[name[len("adam_d.v."):]] = arr.astype(dt)
    rng_line = next(l for l in state_config.splitlines() if l.startswith("rng="))
    state.rng.bit_generator.state = json.loads(rng_line[len("rng="):])
    return state, cfg


def train(
    corpus: list[np.ndarray],
    cfg: TrainConfig,
    model: VocoderModel | None = None,
    log_path: str | None = None,
    checkpoint_path: str | None = None,
    state: TrainState | None = None,
    progress=None,
) -> tuple[TrainState, list[LossReport]]:
    """Run the schedule from `state` (or scratch) to cfg.total_iters."""
    if state is None:
        if model is None:
            raise ValueError("need a model to start training from scratch")
        mean, std = compute_mel_stats(corpus, model.features)
        from .nets import set_mel_stats

        set_mel_stats(model.conditioner, mean, std)
        state = init_state(model, cfg)
    model = state.model
    segments = make_segments(corpus, cfg.segment_seconds, model.features.sample_rate, state.rng)
    reports: list[LossReport] = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        if log_fh is not None and log_fh.tell() == 0:
            log_fh.write(LossReport.CSV_HEADER + "\n")
        while state.iteration < cfg.total_iters:
            segment = next(segments)
            report = train_iteration(state, segment, cfg)
            reports.append(report)
            if log_fh is not None:
                log_fh.write(report.csv_row() + "\n")
            if progress is not None:
                progress(report)
            if checkpoint_path and (
                state.iteration % cfg.checkpoint_every == 0
                or state.iteration == cfg.total_iters
            ):
                save_checkpoint(checkpoint_path, state, cfg)
    finally:
        if log_fh is not None:
            log_fh.close()
    return state, reports
