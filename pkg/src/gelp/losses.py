"""Training objectives: STFT magnitude regression, Wasserstein critic loss,
gradient penalty, and the R1 regularizer.

The penalties keep their inner gradients on the tape, so differentiating
the combined critic loss with respect to the critic's parameters includes
the second-order path through the gradient norm.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tape
from .dsp import FILTER_STFT, StftConfig
from .nets import stft_magnitude_graph
from .tape import Tensor, backward

MAGNITUDE_FLOOR = 1e-12
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """lambda1 scales the STFT loss, lambda2 the gradient penalty, lambda3 R1."""
    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda3: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    iteration: int
    l_stft: float
    l_gan_d: float
    l_gan_g: float
    l_gp: float
    l_r1: float
    total_g: float
    total_d: float
    wall_time: float

    CSV_HEADER = "iteration,l_stft,l_gan_d,l_gan_g,l_gp,l_r1,total_g,total_d,wall_time"

    def __post_init__(self):
        values = [getattr(self, f.name) for f in fields(self)]
        if not np.all(np.isfinite(values)):
            raise ValueError(f"non-finite loss report: {values}")

    def csv_row(self) -> str:
        return (
            f"{self.iteration},{self.l_stft:.8g},{self.l_gan_d:.8g},"
            f"{self.l_gan_g:.8g},{self.l_gp:.8g},{self.l_r1:.8g},"
            f"{self.total_g:.8g},{self.total_d:.8g},{self.wall_time:.4f}"
        )


def stft_loss(
    x: Tensor,
    x_hat: Tensor,
    cfg: StftConfig = FILTER_STFT,
    target_mag: Tensor | None = None,
) -> Tensor:
    """Mean squared error of STFT magnitudes over frames and bins.

    Magnitude-only, so it is blind to sign and insensitive to phase
    alignment within a frame; gradients w.r.t. x_hat flow through
    sqrt(re^2 + im^2 + 1e-12). Pass `target_mag` to reuse a precomputed
    |STFT(x)| when the target is fixed across calls.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {x_hat.shape}")
    mag_x = target_mag if target_mag is not None else stft_magnitude_graph(x, cfg, MAGNITUDE_FLOOR)
    mag_hat = stft_magnitude_graph(x_hat, cfg, MAGNITUDE_FLOOR)
    diff = tape.sub(mag_hat, mag_x)
    return tape.mean(tape.mul(diff, diff))


def gan_loss(scores_real: Tensor, scores_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Wasserstein terms: (critic loss, generator loss).

    d_term = -mean(real) + mean(fake), which the critic minimizes;
    g_term = -mean(fake), which the generator minimizes. Expectations are
    crop means.
    """
    if scores_real.size == 0 or scores_fake.size == 0:
        raise ValueError("need at least one score per side")
    d_term = tape.sub(tape.mean(scores_fake), tape.mean(scores_real))
    g_term = tape.neg(tape.mean(scores_fake))
    return d_term, g_term


def _critic_input_gradient(x_value: np.ndarray, c: Tensor, critic_fn):
    """Run the critic on a leaf copy of x and return (leaf, d critic / d x).

    `critic_fn(x, c)` maps a crop batch to per-crop scores; summing them
    makes each crop's gradient independent of the others.
    """
    leaf = Tensor(np.ascontiguousarray(x_value), requires_grad=True)
    scores = critic_fn(leaf, c)
    total = tape.tsum(scores)
    grad = backward(total, wrt=[leaf])[leaf]
    return leaf, grad


def _per_crop_sq_norm(g: Tensor) -> Tensor:
    return tape.tsum(tape.mul(g, g), axis=(1, 2))


def gradient_penalty(
    x_real: np.ndarray,
    x_fake: np.ndarray,
    c: Tensor,
    critic_fn,
    rng: np.random.Generator,
    epsilon: np.ndarray | None = None,
) -> Tensor:
    """Mean over crops of (||grad_x D(x_tilde, c)|| - 1)^2.

    x_tilde is sampled uniformly on the segment between each real crop and
    its paired fake crop (one epsilon per crop; pass `epsilon` explicitly to
    freeze the draw, e.g. for finite-difference checks). The result stays on
    the tape, so its gradient w.r.t. the critic's parameters exists.
    """
    if x_real.shape != x_fake.shape:
        raise ValueError(f"crop shape mismatch: {x_real.shape} vs {x_fake.shape}")
    if epsilon is None:
        epsilon = rng.uniform(0.0, 1.0, size=(x_real.shape[0], 1, 1))
    eps = epsilon.astype(x_real.dtype)
    mixed = eps * x_real + (1.0 - eps) * x_fake
    _, grad = _critic_input_gradient(mixed, c, critic_fn)
    floor = Tensor(np.asarray(NORM_FLOOR, dtype=grad.dtype))
    norms = tape.sqrt(tape.add(_per_crop_sq_norm(grad), floor))
    one = Tensor(np.asarray(1.0, dtype=grad.dtype))
    excess = tape.sub(norms, one)
    return tape.mean(tape.mul(excess, excess))


def r1_penalty(x_real: np.ndarray, c: Tensor, critic_fn) -> Tensor:
    """Mean over crops of ||grad_x D(x, c)||^2 at the real data points."""
    _, grad = _critic_input_gradient(x_real, c, critic_fn)
    return tape.mean(_per_crop_sq_norm(grad))


def total_losses(l_stft, l_gan, l_gp, l_r1, w: LossWeights):
    """Combined objectives: generator/conditioner loss and critic loss."""
    dt = l_gan.dtype
    lam1 = Tensor(np.asarray(w.lambda1, dtype=dt))
    lam2 = Tensor(np.asarray(w.lambda2, dtype=dt))
    lam3 = Tensor(np.asarray(w.lambda3, dtype=dt))
    l_gc = tape.sub(tape.mul(lam1, l_stft), l_gan)
    l_d = tape.add(tape.add(l_gan, tape.mul(lam2, l_gp)), tape.mul(lam3, l_r1))
    return l_gc, l_d
