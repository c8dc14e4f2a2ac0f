"""The three networks: excitation generator, mel conditioner, critic.

All share one architecture: a stack of dilated gated convolution blocks
with skip connections collected into a small post-net. The generator and
conditioner preserve sequence length with zero-padded convolutions and use
residual connections; the critic uses valid convolutions (no padding, no
residuals) so its receptive field collapses to a single output step.

Conditioning enters every gated block of the generator and critic through
1x1 projections; the conditioner itself runs unconditioned on normalized
mel frames.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tape
from .dsp import N_MELS, StftConfig, cosine_window, pad_for_frames
from .precision import resolve_dtype
from .tape import Tensor

NON_TRAINABLE = ("mel_mean", "mel_std")


@dataclass(frozen=True)
class NetConfig:
    in_channels: int
    out_channels: int
    residual_channels: int = 64
    skip_channels: int = 64
    filter_width: int = 5
    dilated_stacks: int = 3
    dilation_cycle: int = 8
    use_residual: bool = True
    padding: str = "same"
    conditioning_channels: int = 0

    def __post_init__(self):
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be same or valid, got {self.padding!r}")
        if self.filter_width % 2 == 0:
            raise ValueError("filter_width must be odd")

    @property
    def dilations(self) -> tuple[int, ...]:
        cycle = tuple(2**i for i in range(self.dilation_cycle))
        return cycle * self.dilated_stacks

    @property
    def n_layers(self) -> int:
        return self.dilated_stacks * self.dilation_cycle

    @classmethod
    def generator(cls, channels=64, stacks=3, cycle=8):
        return cls(1, 1, channels, channels, 5, stacks, cycle, True, "same", channels)

    @classmethod
    def discriminator(cls, channels=64, stacks=3, cycle=7):
        return cls(1, 1, channels, channels, 5, stacks, cycle, False, "valid", channels)

    @classmethod
    def conditioner(cls, channels=64, stacks=2, cycle=4, n_mels=N_MELS):
        return cls(n_mels, channels, channels, channels, 5, stacks, cycle, True, "same", 0)

    def to_text(self, prefix: str = "") -> str:
        return "".join(
            f"{prefix}{f.name}={getattr(self, f.name)}\n" for f in fields(self)
        )

    @classmethod
    def from_items(cls, items: dict) -> "NetConfig":
        kwargs = {}
        for f in fields(cls):
            raw = items[f.name]
            if f.type == "bool" or isinstance(f.default, bool):
                kwargs[f.name] = raw in (True, "True", "true", "1")
            elif isinstance(raw, str) and raw.lstrip("-").isdigit():
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


def toy_config(role: str, n_mels: int = N_MELS) -> NetConfig:
    """Small configuration keeping finite-difference checks tractable."""
    if role == "generator":
        return NetConfig.generator(channels=16, stacks=1, cycle=4)
    if role == "discriminator":
        return NetConfig.discriminator(channels=16, stacks=1, cycle=4)
    if role == "conditioner":
        return NetConfig.conditioner(channels=16, stacks=1, cycle=4, n_mels=n_mels)
    raise ValueError(f"unknown role {role!r}")


def receptive_field(cfg: NetConfig) -> int:
    """1 + stacks * (width - 1) * (2^cycle - 1) input steps feed one output."""
    return 1 + cfg.dilated_stacks * (cfg.filter_width - 1) * (2**cfg.dilation_cycle - 1)


def expected_shapes(cfg: NetConfig) -> dict[str, tuple]:
    R, S = cfg.residual_channels, cfg.skip_channels
    shapes = {"in.w": (cfg.in_channels, R), "in.b": (R,)}
    for i in range(cfg.n_layers):
        p = f"l{i:02d}."
        shapes[p + "wf"] = (cfg.filter_width, R, R)
        shapes[p + "wg"] = (cfg.filter_width, R, R)
        shapes[p + "bf"] = (R,)
        shapes[p + "bg"] = (R,)
        if cfg.conditioning_channels:
            shapes[p + "vf"] = (cfg.conditioning_channels, R)
            shapes[p + "vg"] = (cfg.conditioning_channels, R)
        shapes[p + "wo"] = (R, R)
        shapes[p + "bo"] = (R,)
    shapes["post1.w"] = (cfg.n_layers * R, S)
    shapes["post1.b"] = (S,)
    shapes["post2.w"] = (S, cfg.out_channels)
    shapes["post2.b"] = (cfg.out_channels,)
    if cfg.in_channels > 1 and cfg.conditioning_channels == 0:
        # conditioner carries its input normalization with the weights
        shapes["mel_mean"] = (cfg.in_channels,)
        shapes["mel_std"] = (cfg.in_channels,)
    return shapes


class ModelWeights:
    """Named tensors for one network plus its architecture config."""

    def __init__(self, config: NetConfig, tensors: dict[str, Tensor]):
        want = expected_shapes(config)
        missing = set(want) - set(tensors)
        extra = set(tensors) - set(want)
        if missing or extra:
            raise ValueError(f"weight names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in tensors.items():
            if tuple(t.shape) != want[name]:
                raise ValueError(
                    f"tensor {name} has shape {tuple(t.shape)}, expected {want[name]}"
                )
        self.config = config
        self.tensors = {name: tensors[name] for name in want}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.tensors.items() if n not in NON_TRAINABLE]

    def set_trainable(self, flag: bool) -> "ModelWeights":
        for name, t in self.parameters():
            t.requires_grad = flag
        return self

    def n_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(
            self.config,
            {n: Tensor(t.data.astype(dtype)) for n, t in self.tensors.items()},
        )

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.config, {n: Tensor(t.data.copy()) for n, t in self.tensors.items()}
        )


def init_weights(cfg: NetConfig, seed: int, dtype=None) -> ModelWeights:
    """Uniform init in +-sqrt(1/fan_in) per tensor, deterministic per seed."""
    dtype = resolve_dtype(dtype)
    rng = np.random.default_rng(seed)
    fan = {
        "in.w": cfg.in_channels, "in.b": cfg.in_channels,
        "post1.w": cfg.n_layers * cfg.residual_channels,
        "post1.b": cfg.n_layers * cfg.residual_channels,
        "post2.w": cfg.skip_channels, "post2.b": cfg.skip_channels,
    }
    conv_fan = cfg.filter_width * cfg.residual_channels
    tensors = {}
    for name, shape in expected_shapes(cfg).items():
        if name == "mel_mean":
            tensors[name] = Tensor(np.zeros(shape, dtype=dtype))
            continue
        if name == "mel_std":
            tensors[name] = Tensor(np.ones(shape, dtype=dtype))
            continue
        leaf = name.split(".")[-1]
        fan_in = fan.get(name) or {
            "wf": conv_fan, "wg": conv_fan, "bf": conv_fan, "bg": conv_fan,
            "vf": cfg.conditioning_channels, "vg": cfg.conditioning_channels,
            "wo": cfg.residual_channels, "bo": cfg.residual_channels,
        }[leaf]
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))
    return ModelWeights(cfg, tensors)


def set_mel_stats(weights: ModelWeights, mean: np.ndarray, std: np.ndarray) -> None:
    dtype = weights.dtype
    weights.tensors["mel_mean"] = Tensor(np.asarray(mean, dtype=dtype))
    weights.tensors["mel_std"] = Tensor(np.maximum(np.asarray(std, dtype=dtype), 1e-6))


def save_weights(weights: ModelWeights, path: str) -> None:
    from .io import write_gelpw

    write_gelpw(
        path,
        weights.config.to_text(),
        {n: t.data for n, t in weights.tensors.items()},
    )


def load_weights(path: str, dtype=None) -> ModelWeights:
    from .io import FormatError, read_gelpw

    config_text, arrays = read_gelpw(path)
    items = dict(line.split("=", 1) for line in config_text.splitlines() if line)
    cfg = NetConfig.from_items(items)
    dtype = resolve_dtype(dtype)
    want = expected_shapes(cfg)
    for name, shape in want.items():
        if name not in arrays:
            raise FormatError(f"{path}: missing tensor {name}")
        if tuple(arrays[name].shape) != shape:
            raise FormatError(
                f"{path}: tensor {name} has shape {tuple(arrays[name].shape)}, "
                f"config expects {shape}"
            )
    return ModelWeights(cfg, {n: Tensor(arrays[n].astype(dtype)) for n in want})


# ---------------------------------------------------------------------------
# forward passes


def gated_block(
    x: Tensor,
    c: Tensor | None,
    weights: ModelWeights,
    layer: int,
    dilation: int,
    c_offset: int = 0,
):
    """One dilated gated convolution block.

    Returns (y, h): the residual-path output and the hidden state exported
    to the skip path. For valid padding `c_offset` is where this layer's
    output starts inside the conditioning sequence.
    """
    cfg = weights.config
    R = cfg.residual_channels
    p = f"l{layer:02d}."
    wfg = tape.concat([weights[p + "wf"], weights[p + "wg"]], axis=2)
    bfg = tape.concat([weights[p + "bf"], weights[p + "bg"]], axis=0)
    if cfg.conditioning_channels:
        if c is None:
            raise ValueError("this configuration requires conditioning input")
        if c.shape[2] != cfg.conditioning_channels + 1:
            raise ValueError(
                f"conditioning has {c.shape[2] - 1} channels, config expects "
                f"{cfg.conditioning_channels}"
            )
        c_use = c
        pre = tape.conv1d_dilated(x, wfg, None, dilation=dilation, padding=cfg.padding)
        if cfg.padding == "valid":
            c_use = tape.narrow(c, 1, c_offset, pre.shape[1])
        elif c.shape[1] != pre.shape[1]:
            raise ValueError(
                f"conditioning length {c.shape[1]} does not match block length "
                f"{pre.shape[1]}"
            )
        # gate biases ride along as an extra row against the ones column
        vfg = tape.concat([weights[p + "vf"], weights[p + "vg"]], axis=1)
        vfgb = tape.concat([vfg, tape.reshape(bfg, (1, 2 * R))], axis=0)
        pre = tape.add(pre, tape.matmul(c_use, vfgb))
    else:
        pre = tape.conv1d_dilated(x, wfg, bfg, dilation=dilation, padding=cfg.padding)
    h = tape.gated_unit(pre, R)
    out = tape.affine(h, weights[p + "wo"], weights[p + "bo"])
    if cfg.use_residual:
        x_res = x
        if cfg.padding == "valid":
            trim = (x.shape[1] - out.shape[1]) // 2
            x_res = tape.narrow(x, 1, trim, out.shape[1])
        out = tape.add(out, x_res)
    return out, h


def postnet(skips: list[Tensor], weights: ModelWeights) -> Tensor:
    """Skip aggregation: channel-concat -> affine -> tanh -> affine.

    Valid-mode skips are center-cropped to the shortest before the joint
    projection, which is applied layer by layer to avoid materializing the
    concatenated tensor.
    """
    if not skips:
        raise ValueError("postnet needs at least one skip input")
    cfg = weights.config
    R = cfg.residual_channels
    t_min = min(s.shape[1] for s in skips)
    acc = None
    for i, h in enumerate(skips):
        trim = (h.shape[1] - t_min) // 2
        if trim:
            h = tape.narrow(h, 1, trim, t_min)
        part = tape.affine(h, tape.narrow(weights["post1.w"], 0, i * R, R))
        acc = part if acc is None else tape.add(acc, part)
    hidden = tape.tanh(tape.add(acc, weights["post1.b"]))
    return tape.affine(hidden, weights["post2.w"], weights["post2.b"])


def _stack_forward(x: Tensor, c: Tensor | None, weights: ModelWeights) -> Tensor:
    cfg = weights.config
    x = tape.affine(x, weights["in.w"], weights["in.b"])
    skips = []
    c_offset = 0
    for layer, dilation in enumerate(cfg.dilations):
        if cfg.padding == "valid":
            c_offset += (cfg.filter_width - 1) // 2 * dilation
        x, h = gated_block(x, c, weights, layer, dilation, c_offset)
        skips.append(h)
    return postnet(skips, weights)


def generator_forward(z: Tensor, c: Tensor, weights: ModelWeights) -> Tensor:
    """White noise (B, T, 1) + audio-rate conditioning -> excitation (B, T, 1)."""
    if z.data.ndim != 3 or z.shape[2] != weights.config.in_channels:
        raise ValueError(f"generator input must be (B, T, 1), got {z.shape}")
    if c.shape[:2] != z.shape[:2]:
        raise ValueError(
            f"conditioning shape {c.shape} does not align with input {z.shape}"
        )
    return _stack_forward(z, c, weights)


def conditioner_forward(mel: Tensor, weights: ModelWeights) -> Tensor:
    """Normalized mel frames (B, K, n_mels) -> frame-rate context (B, K, Rc)."""
    cfg = weights.config
    if mel.data.ndim != 3 or mel.shape[2] != cfg.in_channels:
        raise ValueError(f"mel input must be (B, K, {cfg.in_channels}), got {mel.shape}")
    inv_std = Tensor((1.0 / weights["mel_std"].data).astype(mel.dtype))
    normalized = tape.mul(tape.sub(mel, weights["mel_mean"]), inv_std)
    return _stack_forward(normalized, None, weights)


def discriminator_forward(x: Tensor, c: Tensor, weights: ModelWeights) -> Tensor:
    """A receptive-field-length crop -> one unbounded critic score (B, 1, 1)."""
    rf = receptive_field(weights.config)
    if x.data.ndim != 3 or x.shape[1] != rf:
        raise ValueError(f"critic input must be (B, {rf}, 1), got {x.shape}")
    if c.shape[:2] != x.shape[:2]:
        raise ValueError(f"conditioning shape {c.shape} does not match crop {x.shape}")
    out = _stack_forward(x, c, weights)
    assert out.shape[1] == 1, "valid stack must collapse to one step"
    return out


# ---------------------------------------------------------------------------
# in-graph STFT-domain synthesis filter


def stft_filter_graph(e: Tensor, response: np.ndarray, cfg: StftConfig) -> Tensor:
    """Differentiable frame-wise spectral filtering of (B, T) signals.

    Mirrors the array pipeline exactly: reflect pad, frame, apply the
    squared cosine window, real DFT, multiply by the constant per-frame
    response, inverse DFT, full-frame overlap-add, crop.
    """
    cfg.require_cola()
    B, T = e.shape
    K = cfg.n_frames(T)
    if response.shape != (K, cfg.n_bins):
        raise ValueError(
            f"response track has shape {response.shape}, need ({K}, {cfg.n_bins})"
        )
    left = cfg.window_length // 2
    right = (K - 1) * cfg.hop_length + cfg.window_length - T - left
    padded = reflect_pad_graph(e, left, max(right, 0))
    frames = tape.frame_op(cfg.window_length, cfg.hop_length, 1, 0, 0)(
        tape.reshape(padded, (B, padded.shape[1], 1))
    )
    w = cosine_window(cfg.window_length, np.float64).astype(e.dtype)
    windowed = tape.mul(frames, Tensor(w * w))
    spec = tape.rdft_op(cfg.fft_length, cfg.window_length)(windowed)
    filtered = tape.cmul_const_op(response.astype(np.complex128 if e.dtype == np.float64 else np.complex64))(spec)
    g = tape.irdft_op(cfg.fft_length)(filtered)
    hop, n = cfg.hop_length, cfg.fft_length
    out_length = ((n - 1) // hop) * hop + K * hop
    summed = tape.overlap_add_op(n, hop, out_length)(g)
    return tape.narrow(summed, 1, left, T)


def reflect_pad_graph(x: Tensor, left: int, right: int) -> Tensor:
    if left == 0 and right == 0:
        return x
    return tape.reflect_pad_op(left, right)(x)


def stft_magnitude_graph(x: Tensor, cfg: StftConfig, floor: float = 1e-12) -> Tensor:
    """|STFT| of (B, T) signals as (B, K, n_bins), differentiable.

    Magnitude is sqrt(re^2 + im^2 + floor) so the gradient stays defined at
    silent bins.
    """
    B, T = x.shape
    K = cfg.n_frames(T)
    left = cfg.window_length // 2
    right = (K - 1) * cfg.hop_length + cfg.window_length - T - left
    padded = reflect_pad_graph(x, left, max(right, 0))
    frames = tape.frame_op(cfg.window_length, cfg.hop_length, 1, 0, 0)(
        tape.reshape(padded, (B, padded.shape[1], 1))
    )
    w = cosine_window(cfg.window_length, np.float64).astype(x.dtype)
    spec = tape.rdft_op(cfg.fft_length, cfg.window_length)(tape.mul(frames, Tensor(w)))
    bins = cfg.n_bins
    re = tape.narrow(spec, 2, 0, bins)
    im = tape.narrow(spec, 2, bins, bins)
    power = tape.add(tape.mul(re, re), tape.mul(im, im))
    return tape.sqrt(tape.add(power, Tensor(np.asarray(floor, dtype=x.dtype))))
