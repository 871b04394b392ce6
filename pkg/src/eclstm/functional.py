"""Differentiable layer primitives: activations, fusion convolutions, pooling,
batch normalization, dropout and dense affine maps.

All operations take a leading batch axis. Window tensors are laid out as
``(batch, time, channel)`` (2D window) or ``(batch, time, feature, channel)``
(3D window).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .autograd import DTYPE, Tensor, _make, as_tensor, concatenate, parameter, reshape

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
MAX_DROPOUT = 0.99


class GeometryError(ValueError):
    """A convolution or pooling window does not fit its input."""


class ConfigError(ValueError):
    """A layer argument lies outside its admissible range."""


class FusionKind(str, enum.Enum):
    EARLY = "early"
    LATE = "late"
    HYBRID = "hybrid"


class ActivationKind(str, enum.Enum):
    SIGMOID = "sigmoid"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    LINEAR = "linear"
    HARD_SIGMOID = "hard_sigmoid"
    TANH = "tanh"


@dataclass(frozen=True)
class ConvSpec:
    fusion: FusionKind = FusionKind.EARLY
    kernel_width: int = 1
    stride: int = 1
    dilation: int = 1
    filters: int = 1
    padding: str = "valid"
    activation: ActivationKind = ActivationKind.LINEAR

    def __post_init__(self):
        object.__setattr__(self, "fusion", FusionKind(self.fusion))
        object.__setattr__(self, "activation", ActivationKind(self.activation))
        for name in ("kernel_width", "stride", "dilation", "filters"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.padding not in ("valid", "same"):
            raise ConfigError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        if self.padding == "same" and self.stride != 1:
            raise ConfigError("same padding requires stride 1")

    @property
    def span(self) -> int:
        return self.dilation * (self.kernel_width - 1) + 1

    def output_length(self, length: int) -> int:
        if self.padding == "same":
            return length
        return conv_output_length(length, self.kernel_width, self.stride, self.dilation)


def conv_output_length(length: int, kernel_width: int, stride: int = 1, dilation: int = 1) -> int:
    """Valid-padding output length; raises GeometryError when nothing fits."""
    out = (length - dilation * (kernel_width - 1) - 1) // stride + 1
    if out < 1:
        raise GeometryError(
            f"kernel {kernel_width} (dilation {dilation}) exceeds input length {length}")
    return out


# -- activations -------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: x._accum(g * y * (1.0 - y)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: x._accum(g * (1.0 - y * y)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: x._accum(g * mask))


def leaky_relu(x: Tensor) -> Tensor:
    slope = np.where(x.data > 0, 1.0, LEAKY_SLOPE)
    return _make(x.data * slope, (x,), lambda g: x._accum(g * slope))


def hard_sigmoid(x: Tensor) -> Tensor:
    z = 0.2 * x.data + 0.5
    inside = (z > 0.0) & (z < 1.0)
    return _make(np.clip(z, 0.0, 1.0), (x,), lambda g: x._accum(g * 0.2 * inside))


def linear(x: Tensor) -> Tensor:
    return x


_ACTIVATIONS = {
    ActivationKind.SIGMOID: sigmoid,
    ActivationKind.RELU: relu,
    ActivationKind.LEAKY_RELU: leaky_relu,
    ActivationKind.LINEAR: linear,
    ActivationKind.HARD_SIGMOID: hard_sigmoid,
    ActivationKind.TANH: tanh,
}


def apply_activation(kind: ActivationKind | str, x: Tensor) -> Tensor:
    return _ACTIVATIONS[ActivationKind(kind)](as_tensor(x))


# -- time-axis convolution machinery -----------------------------------------

def _pad_time(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, int]:
    if spec.padding == "valid":
        return x, 0
    total = spec.dilation * (spec.kernel_width - 1)
    left = total // 2
    widths = [(0, 0)] * x.ndim
    widths[1] = (left, total - left)
    return np.pad(x, widths), left


def _patches(xp: np.ndarray, spec: ConvSpec, out_len: int) -> np.ndarray:
    """Gather (batch, out_len, k, ...) receptive fields along axis 1."""
    s, d = spec.stride, spec.dilation
    stop = s * (out_len - 1) + 1
    return np.stack([xp[:, j * d: j * d + stop: s] for j in range(spec.kernel_width)], axis=2)


def _scatter_patches(dpatch: np.ndarray, padded_shape, spec: ConvSpec, out_len: int) -> np.ndarray:
    s, d = spec.stride, spec.dilation
    stop = s * (out_len - 1) + 1
    dxp = np.zeros(padded_shape, dtype=DTYPE)
    for j in range(spec.kernel_width):
        dxp[:, j * d: j * d + stop: s] += dpatch[:, :, j]
    return dxp


def _geometry(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, int, int]:
    xp, left = _pad_time(x, spec)
    if xp.shape[1] < spec.span:
        raise GeometryError(
            f"kernel span {spec.span} exceeds padded input length {xp.shape[1]}")
    out_len = (xp.shape[1] - spec.span) // spec.stride + 1
    return xp, left, out_len


def _unpad(dxp: np.ndarray, left: int, length: int) -> np.ndarray:
    return dxp[:, left: left + length]


def fold_features(x: Tensor) -> Tensor:
    """(B, w, F, C) -> (B, w, F*C); 2D windows pass through."""
    if x.ndim == 4:
        b, w, f, c = x.shape
        return reshape(x, (b, w, f * c))
    return x


def promote_features(x: Tensor) -> Tensor:
    """(B, w, C) -> (B, w, C, 1); 3D windows pass through."""
    if x.ndim == 3:
        return reshape(x, x.shape + (1,))
    return x


def conv1d_early(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor) -> Tensor:
    """Joint convolution over all channels; output (B, w', filters)."""
    x = fold_features(as_tensor(x))
    if x.ndim != 3:
        raise GeometryError(f"early fusion expects (B, w, C) input, got {x.shape}")
    k, c_in, f = weights.shape
    if c_in != x.shape[2] or k != spec.kernel_width:
        raise GeometryError(f"weights {weights.shape} do not match input {x.shape} / {spec}")
    xp, left, out_len = _geometry(x.data, spec)
    patches = _patches(xp, spec, out_len)
    b = x.shape[0]
    cols = patches.reshape(b * out_len, k * c_in)
    wmat = weights.data.reshape(k * c_in, f)
    out = (cols @ wmat).reshape(b, out_len, f) + bias.data

    def bw(g):
        g2 = g.reshape(b * out_len, f)
        if weights.requires_grad:
            weights._accum((cols.T @ g2).reshape(weights.shape))
        if bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        if x.requires_grad:
            dpatch = (g2 @ wmat.T).reshape(patches.shape)
            x._accum(_unpad(_scatter_patches(dpatch, xp.shape, spec, out_len), left, x.shape[1]))
    return _make(out, (x, weights, bias), bw)


def conv1d_late(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor) -> Tensor:
    """Per-feature kernels along time; output (B, w', F, filters)."""
    x = promote_features(as_tensor(x))
    nf, k, c_in, f = weights.shape
    if x.ndim != 4 or x.shape[2] != nf or x.shape[3] != c_in or k != spec.kernel_width:
        raise GeometryError(f"weights {weights.shape} do not match input {x.shape} / {spec}")
    xp, left, out_len = _geometry(x.data, spec)
    patches = _patches(xp, spec, out_len)                      # (B, L', k, F, C)
    b = x.shape[0]
    cols = patches.transpose(3, 0, 1, 2, 4).reshape(nf, b * out_len, k * c_in)
    wmat = weights.data.reshape(nf, k * c_in, f)
    out = np.matmul(cols, wmat).reshape(nf, b, out_len, f).transpose(1, 2, 0, 3) + bias.data

    def bw(g):
        g3 = g.transpose(2, 0, 1, 3).reshape(nf, b * out_len, f)
        if weights.requires_grad:
            weights._accum(np.matmul(cols.transpose(0, 2, 1), g3).reshape(weights.shape))
        if bias.requires_grad:
            bias._accum(g.sum(axis=(0, 1)))
        if x.requires_grad:
            dcols = np.matmul(g3, wmat.transpose(0, 2, 1))     # (F, B*L', k*C)
            dpatch = dcols.reshape(nf, b, out_len, k, c_in).transpose(1, 2, 3, 0, 4)
            x._accum(_unpad(_scatter_patches(dpatch, xp.shape, spec, out_len), left, x.shape[1]))
    return _make(out, (x, weights, bias), bw)


def conv1d_hybrid(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor) -> Tensor:
    """One kernel shared by every feature; output (B, w', F, filters)."""
    x = promote_features(as_tensor(x))
    k, c_in, f = weights.shape
    if x.ndim != 4 or x.shape[3] != c_in or k != spec.kernel_width:
        raise GeometryError(f"weights {weights.shape} do not match input {x.shape} / {spec}")
    xp, left, out_len = _geometry(x.data, spec)
    patches = _patches(xp, spec, out_len)                      # (B, L', k, F, C)
    b, nf = x.shape[0], x.shape[2]
    cols = patches.transpose(0, 1, 3, 2, 4).reshape(b * out_len * nf, k * c_in)
    wmat = weights.data.reshape(k * c_in, f)
    out = (cols @ wmat).reshape(b, out_len, nf, f) + bias.data

    def bw(g):
        g2 = g.reshape(b * out_len * nf, f)
        if weights.requires_grad:
            weights._accum((cols.T @ g2).reshape(weights.shape))
        if bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        if x.requires_grad:
            dcols = g2 @ wmat.T
            dpatch = dcols.reshape(b, out_len, nf, k, c_in).transpose(0, 1, 3, 2, 4)
            x._accum(_unpad(_scatter_patches(dpatch, xp.shape, spec, out_len), left, x.shape[1]))
    return _make(out, (x, weights, bias), bw)


_CONVS = {
    FusionKind.EARLY: conv1d_early,
    FusionKind.LATE: conv1d_late,
    FusionKind.HYBRID: conv1d_hybrid,
}


def conv1d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor) -> Tensor:
    return _CONVS[spec.fusion](x, spec, weights, bias)


def conv_weight_shapes(spec: ConvSpec, in_channels: int, n_features: int = 1):
    """Weight and bias shapes of one fusion convolution."""
    k, f = spec.kernel_width, spec.filters
    if spec.fusion is FusionKind.LATE:
        return (n_features, k, in_channels, f), (n_features, f)
    return (k, in_channels, f), (f,)


def conv_param_count(spec: ConvSpec, in_channels: int, n_features: int = 1) -> int:
    w, b = conv_weight_shapes(spec, in_channels, n_features)
    return int(np.prod(w) + np.prod(b))


# -- pooling -----------------------------------------------------------------

def maxpool1d(x: Tensor, pool_width: int, axis: int = 1) -> Tensor:
    """Non-overlapping max pool (stride = width, trailing remainder dropped)."""
    x = as_tensor(x)
    axis = axis % x.ndim
    length = x.shape[axis]
    if pool_width < 1 or pool_width > length:
        raise GeometryError(f"pool width {pool_width} does not fit length {length}")
    n = length // pool_width
    moved = np.moveaxis(x.data, axis, -1)
    blocks = moved[..., : n * pool_width].reshape(moved.shape[:-1] + (n, pool_width))
    arg = blocks.argmax(axis=-1)  # first maximum on ties
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gm = np.moveaxis(g, axis, -1)
        dblocks = np.zeros(blocks.shape, dtype=DTYPE)
        np.put_along_axis(dblocks, arg[..., None], gm[..., None], axis=-1)
        dmoved = np.zeros(moved.shape, dtype=DTYPE)
        dmoved[..., : n * pool_width] = dblocks.reshape(moved.shape[:-1] + (n * pool_width,))
        x._accum(np.moveaxis(dmoved, -1, axis))
    return _make(np.moveaxis(out, -1, axis), (x,), bw)


# -- batch normalization -----------------------------------------------------

@dataclass
class BatchNormState:
    """Per-channel scale/shift plus running statistics for inference."""

    channels: int
    gamma: Tensor = None
    beta: Tensor = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    updates: int = 0
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __post_init__(self):
        if self.gamma is None:
            self.gamma = parameter(np.ones(self.channels), name="bn.gamma")
        if self.beta is None:
            self.beta = parameter(np.zeros(self.channels), name="bn.beta")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def batch_norm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Normalize the last (channel) axis using statistics over all other axes."""
    x = as_tensor(x)
    if x.shape[-1] != state.channels:
        raise GeometryError(f"batch norm expects {state.channels} channels, got {x.shape}")
    axes = tuple(range(x.ndim - 1))
    gamma, beta = state.gamma, state.beta
    if not train:
        if state.updates == 0:
            raise RuntimeError("batch norm used in inference mode before any training update")
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv

        def bw_infer(g):
            if x.requires_grad:
                x._accum(g * gamma.data * inv)
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=axes))
            if beta.requires_grad:
                beta._accum(g.sum(axis=axes))
        return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw_infer)

    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    m = state.momentum
    state.running_mean = m * state.running_mean + (1.0 - m) * mu
    state.running_var = m * state.running_var + (1.0 - m) * var
    state.updates += 1
    n = x.data.size // state.channels

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accum(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data
            x._accum(inv / n * (n * dxhat - dxhat.sum(axis=axes)
                                - xhat * (dxhat * xhat).sum(axis=axes)))
    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


# -- dropout / dense / concat ------------------------------------------------

def check_dropout_rate(rate: float) -> float:
    if not 0.0 <= rate <= MAX_DROPOUT:
        raise ConfigError(f"dropout rate must lie in [0, {MAX_DROPOUT}], got {rate}")
    return float(rate)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    rate = check_dropout_rate(rate)
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: x._accum(g * keep))


def dense(x: Tensor, weights: Tensor, bias: Tensor,
          activation: ActivationKind | str = ActivationKind.LINEAR) -> Tensor:
    x = as_tensor(x)
    if x.ndim > 2:
        x = reshape(x, (x.shape[0], -1))
    if x.shape[-1] != weights.shape[0]:
        raise ValueError(f"dense input width {x.shape[-1]} != weight rows {weights.shape[0]}")
    return apply_activation(activation, x @ weights + bias)


def concat_channels(a: Tensor, b: Tensor, fusion: FusionKind | str = FusionKind.LATE) -> Tensor:
    """Join along the channel axis after reconciling 2D/3D layouts.

    Early fusion folds 3D operands to 2D; late/hybrid promote 2D operands to
    3D with channels reinterpreted as features, so the join is always on channels.
    """
    fusion = FusionKind(fusion)
    a, b = as_tensor(a), as_tensor(b)
    if fusion is FusionKind.EARLY:
        a, b = fold_features(a), fold_features(b)
    else:
        a, b = promote_features(a), promote_features(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise GeometryError(f"cannot concatenate {a.shape} with {b.shape}")
    return concatenate([a, b], axis=-1)


def concat_shape(a: tuple[int, ...], b: tuple[int, ...], fusion: FusionKind) -> tuple[int, ...]:
    """Shape-only twin of :func:`concat_channels` (no batch axis)."""
    def fold(s):
        return (s[0], s[1] * s[2]) if len(s) == 3 else s

    def promote(s):
        return s + (1,) if len(s) == 2 else s

    if fusion is FusionKind.EARLY:
        a, b = fold(a), fold(b)
    else:
        a, b = promote(a), promote(b)
    if a[:-1] != b[:-1]:
        raise GeometryError(f"cannot concatenate {a} with {b}")
    return a[:-1] + (a[-1] + b[-1],)


# -- initialization ------------------------------------------------------------

def glorot_init(shape: tuple[int, ...], rng: np.random.Generator | int,
                fan_in: int | None = None, fan_out: int | None = None) -> np.ndarray:
    """Glorot-uniform draw; fans default to (k*C, k*f) for (k, C, f) kernels."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    shape = tuple(int(s) for s in shape)
    if fan_in is None or fan_out is None:
        if len(shape) == 1:
            fi = fo = shape[0]
        else:
            receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
            fi, fo = shape[-2] * receptive, shape[-1] * receptive
        fan_in = fan_in or fi
        fan_out = fan_out or fo
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
