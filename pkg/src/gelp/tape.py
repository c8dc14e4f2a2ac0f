"""Minimal reverse-mode automatic differentiation.

Covers exactly the op set the vocoder needs: dilated 1-D convolution (as
framing + matmul), pointwise nonlinearities and arithmetic, and the linear
signal ops used by the in-graph STFT filter (padding, framing, windowing,
real DFT, overlap-add, upsampling). Complex spectra travel as paired real
channels [re || im] along the last axis.

Every backward rule is itself built from tape ops: pointwise VJPs are
compositions of recorded primitives and each linear op's VJP applies its
adjoint as another linear op. Gradients returned by `backward` are therefore
ordinary graph tensors and can be differentiated again, which the gradient
penalty's parameter gradient requires.

Forward values are computed by the same kernels whether or not anything is
being recorded; recording only attaches parent/VJP metadata.
"""
from __future__ import annotations

import os
import threading
from contextlib import contextmanager

import numpy as np
from scipy import fft as sfft

_state = threading.local()
_state.grad_enabled = True
_CHECK_FINITE = os.environ.get("GELP_CHECK_FINITE", "0") == "1"


def _grad_enabled() -> bool:
    try:
        return _state.grad_enabled
    except AttributeError:  # first touch on a fresh thread
        _state.grad_enabled = True
        return True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class MissingGradient(KeyError):
    """Raised when a tensor outside the differentiated graph is queried."""


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if type(data) is np.ndarray else np.asarray(data)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.vjp = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis=axis)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a tape op")
    out = Tensor(data)
    if _grad_enabled():
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out.parents = parents
                out.vjp = vjp
                break
    return out


def _check_same_dtype(a: Tensor, b: Tensor):
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"mixed dtypes on tape: {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# shape primitives


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    in_shape = x.shape
    data = np.broadcast_to(x.data, shape)

    def vjp(g: Tensor):
        # sum over every axis the input lacked or had at size one
        pad = len(shape) - len(in_shape)
        axes = tuple(
            i for i in range(len(shape)) if i < pad or in_shape[i - pad] == 1
        )
        summed = tsum(g, axis=axes, keepdims=True) if axes else g
        return (reshape(summed, in_shape),)

    return _node(data, (x,), vjp)


def _broadcast_pair(a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return a, b
    shape = np.broadcast_shapes(a.shape, b.shape)
    return broadcast_to(a, shape), broadcast_to(b, shape)


def reshape(x: Tensor, shape) -> Tensor:
    in_shape = x.shape
    return _node(
        np.reshape(x.data, shape), (x,), lambda g: (reshape(g, in_shape),)
    )


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("transpose2d expects a matrix")
    # view, not copy: BLAS consumers handle the transposed layout natively
    return _node(x.data.T, (x,), lambda g: (transpose2d(g),))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` elements from `start` along `axis`."""
    if start < 0 or start + length > x.shape[axis]:
        raise ValueError(
            f"narrow [{start}:{start + length}] out of bounds for axis {axis} "
            f"of size {x.shape[axis]}"
        )
    idx = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(x.data.ndim)
    )
    before, after = start, x.shape[axis] - start - length
    return _node(
        x.data[idx].copy(), (x,), lambda g: (pad_axis(g, axis, before, after),)
    )


def pad_axis(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad along one axis; adjoint of `narrow`."""
    length = x.shape[axis]
    shape = list(x.shape)
    shape[axis] += before + after
    data = np.zeros(shape, dtype=x.dtype)
    idx = tuple(
        slice(before, before + length) if i == axis else slice(None)
        for i in range(x.data.ndim)
    )
    data[idx] = x.data
    return _node(data, (x,), lambda g: (narrow(g, axis, before, length),))


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis if axis >= 0 else data.ndim + axis
    sizes = [t.shape[ax] for t in tensors]

    def vjp(g: Tensor):
        parts, start = [], 0
        for s in sizes:
            parts.append(narrow(g, ax, start, s))
            start += s
        return tuple(parts)

    return _node(data, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# arithmetic and pointwise


def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to the operand's shape (tape ops)."""
    if g.shape == shape:
        return g
    pad = len(g.shape) - len(shape)
    axes = tuple(
        i for i in range(len(g.shape)) if i < pad or shape[i - pad] == 1
    )
    return reshape(tsum(g, axis=axes, keepdims=True), shape) if axes else g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape == b.shape:
        return _node(a.data - b.data, (a, b), lambda g: (g, neg(g)))
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (neg(g),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)),
    )


def reciprocal(x: Tensor) -> Tensor:
    out = _node(1.0 / x.data, (x,), None)
    out.vjp = lambda g: (neg(mul(g, mul(out, out))),)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    return mul(a, reciprocal(b))


def sqrt(x: Tensor) -> Tensor:
    out = _node(np.sqrt(x.data), (x,), None)
    half = Tensor(np.asarray(0.5, dtype=x.dtype))
    out.vjp = lambda g: (mul(g, mul(half, reciprocal(out))),)
    return out


def tanh(x: Tensor) -> Tensor:
    out = _node(np.tanh(x.data), (x,), None)
    one = Tensor(np.asarray(1.0, dtype=x.dtype))
    out.vjp = lambda g: (mul(g, sub(one, mul(out, out))),)
    return out


def _sigmoid_kernel(x: np.ndarray) -> np.ndarray:
    out = np.exp(np.negative(x))
    out += 1.0
    np.reciprocal(out, out=out)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _node(_sigmoid_kernel(x.data), (x,), None)
    one = Tensor(np.asarray(1.0, dtype=x.dtype))
    out.vjp = lambda g: (mul(g, mul(out, sub(one, out))),)
    return out


def gated_unit(pre: Tensor, channels: int) -> Tensor:
    """tanh(pre[..., :R]) * sigmoid(pre[..., R:]) in one fused forward.

    The backward rule recomputes both halves with ordinary tape ops, so
    second derivatives need no special handling.
    """
    R = channels
    if pre.shape[-1] != 2 * R:
        raise ValueError(f"gated unit needs 2*{R} channels, got {pre.shape[-1]}")
    th = np.tanh(pre.data[..., :R])
    sg = _sigmoid_kernel(pre.data[..., R:])
    np.multiply(th, sg, out=th)

    def vjp(g: Tensor):
        f = narrow(pre, pre.data.ndim - 1, 0, R)
        s = narrow(pre, pre.data.ndim - 1, R, R)
        tf = tanh(f)
        sgs = sigmoid(s)
        one = Tensor(np.asarray(1.0, dtype=pre.dtype))
        d_f = mul(mul(g, sgs), sub(one, mul(tf, tf)))
        d_s = mul(mul(g, mul(tf, sgs)), sub(one, sgs))
        return (concat([d_f, d_s], axis=-1),)

    return _node(th, (pre,), vjp)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = x.shape
    if axis is None:
        axes = tuple(range(x.data.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.data.ndim,)
    else:
        axes = tuple(a % x.data.ndim for a in axis)
    data = np.sum(x.data, axis=axes, keepdims=keepdims)

    def vjp(g: Tensor):
        if not keepdims and in_shape:
            kept = [1 if i in axes else s for i, s in enumerate(in_shape)]
            g = reshape(g, kept)
        return (broadcast_to(g, in_shape),)

    return _node(data, (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    total = tsum(x, axis=axis)
    n = x.size if axis is None else np.prod(
        [x.shape[a % x.data.ndim] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(total, Tensor(np.asarray(1.0 / n, dtype=x.dtype)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., K) @ (K, N); the left side may carry one batch dimension."""
    _check_same_dtype(a, b)
    if b.data.ndim != 2 or a.data.ndim not in (2, 3):
        raise ValueError(f"matmul expects (B, M, K) or (M, K) @ (K, N), got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def vjp(g: Tensor):
        ga = matmul(g, transpose2d(b))
        if a.data.ndim == 3:
            a2 = reshape(a, (-1, a.shape[-1]))
            g2 = reshape(g, (-1, g.shape[-1]))
            gb = matmul(transpose2d(a2), g2)
        else:
            gb = matmul(transpose2d(a), g)
        return ga, gb

    return _node(a.data @ b.data, (a, b), vjp)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """(..., Cin) @ (Cin, Cout) + b."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def detach(x: Tensor) -> Tensor:
    return x.detach()


# ---------------------------------------------------------------------------
# linear signal ops: each VJP applies the adjoint map as another linear op


def _linear(fwd, adj, name: str):
    def op(x: Tensor) -> Tensor:
        return _node(fwd(x.data), (x,), lambda g: (_adj_op(g),))

    def _adj_op(g: Tensor) -> Tensor:
        return _node(adj(g.data), (g,), lambda h: (op(h),))

    op.__name__ = name
    return op


def frame_op(width: int, hop: int, dilation: int, pad_left: int, pad_right: int):
    """(B, T, C) -> (B, K, width*C) windows; adjoint scatters back.

    Window j of output step k reads input position k*hop + j*dilation -
    pad_left. K is derived from the padded length.
    """
    span = (width - 1) * dilation + 1

    def fwd(x):
        B, T, C = x.shape
        if pad_left or pad_right:
            xp = np.zeros((B, T + pad_left + pad_right, C), dtype=x.dtype)
            xp[:, pad_left : pad_left + T] = x
        else:
            xp = x
        K = (T + pad_left + pad_right - span) // hop + 1
        sB, sT, sC = xp.strides
        v = np.lib.stride_tricks.as_strided(
            xp, (B, K, width, C), (sB, hop * sT, dilation * sT, sC)
        )
        return np.ascontiguousarray(v).reshape(B, K, width * C)

    def adj(g):
        B, K, WC = g.shape
        C = WC // width
        g = g.reshape(B, K, width, C)
        T_pad = (K - 1) * hop + span
        if dilation == 1 and width > hop:
            # group taps into disjoint hop-sized blocks per pass
            slack = ((width - 1) // hop) * hop + K * hop
            out = np.zeros((B, slack, C), dtype=g.dtype)
            for j in range(0, width, hop):
                b = min(hop, width - j)
                out[:, j : j + K * hop].reshape(B, K, hop, C)[:, :, :b] += g[
                    :, :, j : j + b
                ]
            out = out[:, :T_pad]
        else:
            out = np.zeros((B, T_pad, C), dtype=g.dtype)
            for j in range(width):
                target = out[:, j * dilation : j * dilation + (K - 1) * hop + 1 : hop, :]
                target += g[:, :, j, :]
        return out[:, pad_left : T_pad - pad_right, :]

    return _linear(fwd, adj, f"frame(w={width},h={hop},d={dilation})")


def overlap_add_op(width: int, hop: int, out_length: int):
    """(B, K, width) frames -> (B, out_length) by summation at hop offsets."""

    def fwd(g):
        B, K, W = g.shape
        slack = ((W - 1) // hop) * hop + K * hop
        out = np.zeros((B, max(out_length, slack)), dtype=g.dtype)
        for j in range(0, W, hop):
            b = min(hop, W - j)
            out[:, j : j + K * hop].reshape(B, K, hop)[:, :, :b] += g[:, :, j : j + b]
        return out[:, :out_length]

    if out_length < width:
        raise ValueError("out_length must cover at least one frame")

    def adj(x):
        B, T = x.shape
        K = (out_length - width) // hop + 1
        sB, sT = x.strides
        v = np.lib.stride_tricks.as_strided(x, (B, K, width), (sB, hop * sT, sT))
        return np.ascontiguousarray(v)

    return _linear(fwd, adj, f"overlap_add(w={width},h={hop})")


def reflect_pad_op(left: int, right: int):
    """Reflect padding along axis 1 of (B, T, ...); adjoint folds edges back.

    Single-pass reflection only: pads must be shorter than the signal.
    """

    def fwd(x):
        if left >= x.shape[1] or right >= x.shape[1]:
            raise ValueError("reflect pad wider than the signal")
        parts = [x]
        if left:
            parts.insert(0, x[:, left:0:-1])
        if right:
            parts.append(x[:, -2 : -right - 2 : -1])
        return np.concatenate(parts, axis=1)

    def adj(g):
        T = g.shape[1] - left - right
        out = g[:, left : left + T].copy()
        for i in range(left):        # g[:, i] was read from x[left - i]
            out[:, left - i] += g[:, i]
        for i in range(right):       # g[:, left+T+i] was read from x[T - 2 - i]
            out[:, T - 2 - i] += g[:, left + T + i]
        return out

    return _linear(fwd, adj, f"reflect_pad({left},{right})")


def rdft_op(n: int, in_length: int):
    """Real DFT of (B, K, in_length) zero-padded to n -> (B, K, 2*(n//2+1))."""
    bins = n // 2 + 1

    def fwd(x):
        S = sfft.rfft(x, n=n, axis=-1)
        return np.concatenate([S.real, S.imag], axis=-1)

    def adj(g):
        G = g[..., :bins] + 1j * g[..., bins:]
        G = G.copy()
        G[..., 1 : bins - 1] *= 0.5
        full = sfft.irfft(G, n=n, axis=-1) * n
        return np.ascontiguousarray(full[..., :in_length])

    return _linear(fwd, adj, f"rdft({n})")


def irdft_op(n: int):
    """Inverse real DFT of paired channels (B, K, 2*(n//2+1)) -> (B, K, n)."""
    bins = n // 2 + 1

    def fwd(g):
        G = g[..., :bins] + 1j * g[..., bins:]
        return sfft.irfft(G, n=n, axis=-1)

    def adj(x):
        S = sfft.rfft(x, n=n, axis=-1) / n
        S[..., 1 : bins - 1] *= 2.0
        return np.concatenate([S.real, S.imag], axis=-1)

    return _linear(fwd, adj, f"irdft({n})")


def cmul_const_op(h: np.ndarray):
    """Multiply paired-channel spectra by a constant complex response.

    `h` broadcasts against the frame axes; the adjoint multiplies by the
    conjugate.
    """
    hr, hi = h.real, h.imag

    def _mulc(x, re_h, im_h):
        bins = x.shape[-1] // 2
        xr, xi = x[..., :bins], x[..., bins:]
        return np.concatenate(
            [xr * re_h - xi * im_h, xr * im_h + xi * re_h], axis=-1
        )

    return _linear(
        lambda x: _mulc(x, hr, hi),
        lambda g: _mulc(g, hr, -hi),
        "cmul_const",
    )


def gather_crops_op(positions: np.ndarray, length: int, total_length: int):
    """Stack fixed-position crops of a (1, T) signal into (n, length, 1).

    The adjoint scatter-adds each crop gradient back into the signal, which
    is how crop gradients reach the generator without one pad per crop.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if len(positions) and positions.max() + length > total_length:
        raise ValueError("crop positions run past the signal end")

    def fwd(x):
        return np.stack([x[0, p : p + length] for p in positions])[:, :, None]

    def adj(g):
        out = np.zeros((1, total_length), dtype=g.dtype)
        for i, p in enumerate(positions):
            out[0, p : p + length] += g[i, :, 0]
        return out

    return _linear(fwd, adj, f"gather_crops(n={len(positions)})")


def upsample_op(factor: int, n_frames: int, out_length: int):
    """Linear interpolation (B, K, C) -> (B, out_length, C); hold-last past K-1."""
    pos = np.arange(out_length) / factor
    i0 = np.minimum(pos.astype(np.int64), n_frames - 1)
    i1 = np.minimum(i0 + 1, n_frames - 1)
    w1 = pos - i0

    def fwd(f):
        w = w1.astype(f.dtype)[:, None]
        return (1.0 - w) * f[:, i0, :] + w * f[:, i1, :]

    def adj(g):
        B, T, C = g.shape
        w = w1.astype(g.dtype)[:, None]
        out = np.zeros((B, n_frames, C), dtype=g.dtype)
        for b in range(B):
            np.add.at(out[b], i0, (1.0 - w) * g[b])
            np.add.at(out[b], i1, w * g[b])
        return out

    return _linear(fwd, adj, f"upsample(x{factor})")


# ---------------------------------------------------------------------------
# convolution


def conv1d_dilated(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    dilation: int = 1,
    padding: str = "same",
) -> Tensor:
    """Cross-correlation of (B, T, Cin) with (width, Cin, Cout) taps.

    Orientation: out[t] = sum_j w[j] * x[t + (j - (width-1)/2) * dilation]
    for "same" padding; "valid" keeps only fully covered steps and shrinks T
    by (width-1)*dilation.
    """
    width, cin, cout = w.shape
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    if padding == "same" and width % 2 == 0:
        raise ValueError("same padding requires an odd filter width")
    if x.data.ndim != 3 or x.shape[2] != cin:
        raise ValueError(f"input shape {x.shape} does not match weight {w.shape}")
    if padding == "same":
        pad = (width - 1) // 2 * dilation
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    span = (width - 1) * dilation
    if padding == "valid" and x.shape[1] <= span:
        raise ValueError(f"input of length {x.shape[1]} too short for valid conv span {span + 1}")
    cols = frame_op(width, 1, dilation, pad, pad)(x)
    B, K, _ = cols.shape
    out = matmul(reshape(cols, (B * K, width * cin)), reshape(w, (width * cin, cout)))
    out = reshape(out, (B, K, cout))
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# backward pass


class Gradients:
    """Result of `backward`: gradients keyed by tensor identity.

    Querying a tensor that did not participate in the differentiated graph
    raises `MissingGradient` (an explicitly absent gradient, not zero).
    """

    def __init__(self):
        self._grads: dict[int, Tensor] = {}
        self._keys: dict[int, Tensor] = {}

    def _store(self, t: Tensor, g: Tensor):
        self._grads[id(t)] = g
        self._keys[id(t)] = t

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __getitem__(self, t: Tensor) -> Tensor:
        try:
            return self._grads[id(t)]
        except KeyError:
            raise MissingGradient(
                f"no gradient for {t!r}; it is detached from the loss graph"
            ) from None

    def get(self, t: Tensor, default=None):
        return self._grads.get(id(t), default)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt=None) -> Gradients:
    """Reverse accumulation from a scalar loss.

    Returned gradients are tape tensors, so differentiating through them
    (backward-of-backward) is supported.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor requiring gradients")
    grads = Gradients()
    acc: dict[int, Tensor] = {
        id(loss): Tensor(np.ones(loss.shape, dtype=loss.dtype))
    }
    for node in reversed(_toposort(loss)):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        grads._store(node, g)
        if node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            held = acc.get(id(p))
            acc[id(p)] = pg if held is None else add(held, pg)
    if wrt is not None:
        filtered = Gradients()
        for t in wrt:
            got = grads.get(t)
            if got is not None:
                filtered._store(t, got)
        return filtered
    return grads


def grad_check(f, inputs: list[Tensor], step: float = 1e-4) -> float:
    """Max relative error between analytic gradients and central differences.

    All inputs must be float64 leaves with requires_grad set; denominators
    are floored at 1e-8.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        if not t.requires_grad:
            raise ValueError("grad_check inputs must require gradients")
        if not t.data.flags["C_CONTIGUOUS"]:
            t.data = np.ascontiguousarray(t.data)
    loss = f(*inputs)
    grads = backward(loss, wrt=inputs)
    worst = 0.0
    for t in inputs:
        analytic = grads.get(t)
        analytic = np.zeros_like(t.data) if analytic is None else analytic.data
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            # note: f may itself run backward passes (penalty losses), so the
            # probe evaluations must stay in grad mode
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(*inputs).data)
            flat[i] = orig - step
            lo = float(f(*inputs).data)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst
