"""Embedded convolutional LSTM layers and the flatten-input LSTM baseline."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import functional as F
from .autograd import Tensor, concatenate, getitem, parameter, reshape, stack
from .functional import ActivationKind, ConvSpec, FusionKind, GeometryError

GATES = ("i", "f", "o", "c")
FORGET_BIAS = 1.0


@dataclass(frozen=True)
class ConvCell:
    """Structure shared by the four gate paths of one ECLSTM layer."""

    stack: tuple[ConvSpec, ...]

    def __post_init__(self):
        if not 1 <= len(self.stack) <= 4:
            raise F.ConfigError(f"cell depth must lie in [1, 4], got {len(self.stack)}")
        # cells keep the window length so h_t lines up with x_t
        specs = tuple(replace(s, padding="same", stride=1) for s in self.stack)
        object.__setattr__(self, "stack", specs)

    @property
    def depth(self) -> int:
        return len(self.stack)

    @classmethod
    def uniform(cls, depth: int, filters: int, kernel_width: int,
                fusion: FusionKind | str = FusionKind.EARLY,
                activation: ActivationKind | str = ActivationKind.SIGMOID) -> "ConvCell":
        spec = ConvSpec(fusion=fusion, kernel_width=kernel_width, filters=filters,
                        padding="same", activation=activation)
        return cls(tuple([spec] * depth))


@dataclass
class ECLSTMState:
    h: Tensor
    c: Tensor


def _conv_io(spec: ConvSpec, in_shape: tuple[int, ...]):
    """Resolve one convolution's input layout; returns (in_channels, n_features, out_shape)."""
    if spec.fusion is FusionKind.EARLY:
        w = in_shape[0]
        channels = int(np.prod(in_shape[1:]))
        return channels, 1, (w, spec.filters)
    if len(in_shape) == 2:
        in_shape = in_shape + (1,)
    w, nf, channels = in_shape
    return channels, nf, (w, nf, spec.filters)


def trace_cell(cell: ConvCell, in_shape: tuple[int, ...]):
    """Per-depth (in_channels, n_features, out_shape) for an input window shape."""
    out = []
    shape = tuple(in_shape)
    for spec in cell.stack:
        if shape[0] < 1:
            raise GeometryError(f"empty window {shape}")
        channels, nf, shape = _conv_io(spec, shape)
        out.append((channels, nf, shape))
    return out


def infer_state_shape(cell: ConvCell, x_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Hidden/memory shape (no batch axis) for windows of shape ``x_shape``.

    The state must reproduce itself when concatenated with the input, so the
    trace is run once on the input alone and once on [x, h].
    """
    first = cell.stack[0].fusion
    guess = trace_cell(cell, x_shape)[-1][2]
    joint = F.concat_shape(tuple(x_shape), guess, first)
    shape = trace_cell(cell, joint)[-1][2]
    if shape != guess:
        raise GeometryError(f"cell state shape is not closed: {guess} -> {shape}")
    return shape


def state_init(cell: ConvCell, input_probe: Tensor | np.ndarray | tuple) -> ECLSTMState:
    """Zero state sized by shape inference; probe may be batched (B, *window)."""
    probe = input_probe.shape if hasattr(input_probe, "shape") else tuple(input_probe)
    batch, window = probe[0], tuple(probe[1:])
    shape = (batch,) + infer_state_shape(cell, window)
    return ECLSTMState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


class GatePath:
    """One gate's depth-stacked convolutions (weights are not shared across gates)."""

    def __init__(self, cell: ConvCell, joint_shape, rng: np.random.Generator,
                 final_bias: float = 0.0, name: str = "gate"):
        self.cell = cell
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for depth, (spec, (channels, nf, _)) in enumerate(zip(cell.stack, trace_cell(cell, joint_shape))):
            wshape, bshape = F.conv_weight_shapes(spec, channels, nf)
            k = spec.kernel_width
            w = F.glorot_init(wshape, rng, fan_in=k * channels, fan_out=k * spec.filters)
            b = np.full(bshape, final_bias if depth == cell.depth - 1 else 0.0)
            self.weights.append(parameter(w, name=f"{name}.W{depth + 1}"))
            self.biases.append(parameter(b, name=f"{name}.b{depth + 1}"))

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def forward(self, z: Tensor, skip_first: bool = False) -> Tensor:
        """Run the stack; inner activations only, the gate applies its own.

        ``skip_first`` treats ``z`` as the already computed first pre-activation.
        """
        out = z
        for depth, spec in enumerate(self.cell.stack):
            if depth > 0 or not skip_first:
                out = F.conv1d(out, spec, self.weights[depth], self.biases[depth])
            if depth < self.cell.depth - 1:
                out = F.apply_activation(spec.activation, out)
        return out


def conv_cell_forward(cell: ConvCell, path: GatePath, z: Tensor) -> Tensor:
    """Pre-activation of the outermost convolution of one gate path."""
    if path.cell != cell:
        raise ValueError("gate path was built for a different cell")
    return path.forward(z)


class ECLSTMLayer:
    """ECLSTM layer: LSTM recurrences whose gate transforms are convolution stacks."""

    def __init__(self, cell: ConvCell, window_shape: Sequence[int], seed: int | np.random.Generator = 0):
        self.cell = cell
        self.window_shape = tuple(int(s) for s in window_shape)
        self.state_shape = infer_state_shape(cell, self.window_shape)
        self.joint_shape = F.concat_shape(self.window_shape, self.state_shape, cell.stack[0].fusion)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.gates = {g: GatePath(cell, self.joint_shape, rng,
                                  final_bias=FORGET_BIAS if g == "f" else 0.0, name=g)
                      for g in GATES}
        self._x_channels = trace_cell(cell, self.window_shape)[0][0]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.state_shape

    def parameters(self) -> list[Tensor]:
        return [p for g in GATES for p in self.gates[g].parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_state(self, batch: int) -> ECLSTMState:
        shape = (batch,) + self.state_shape
        return ECLSTMState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    def step(self, x_t: Tensor, state: ECLSTMState) -> ECLSTMState:
        """One literal update on the concatenated input [x_t, h_{t-1}]."""
        z = F.concat_channels(x_t, state.h, self.cell.stack[0].fusion)
        pre = {g: self.gates[g].forward(z) for g in GATES}
        return self._update(pre, state)

    @staticmethod
    def _update(pre: dict[str, Tensor], state: ECLSTMState) -> ECLSTMState:
        i = F.sigmoid(pre["i"])
        f = F.sigmoid(pre["f"])
        o = F.sigmoid(pre["o"])
        cand = F.tanh(pre["c"])
        if not (i.shape == f.shape == o.shape == cand.shape == state.c.shape):
            raise GeometryError("gate output shapes differ")
        c = f * state.c + i * cand
        return ECLSTMState(o * F.tanh(c), c)

    def _split_first(self):
        """First-depth weights split into input and recurrent halves, fused over gates."""
        wx, wh, bs = [], [], []
        n = self._x_channels
        for g in GATES:
            w = self.gates[g].weights[0]
            wx.append(getitem(w, (Ellipsis, slice(0, n), slice(None))))
            wh.append(getitem(w, (Ellipsis, slice(n, None), slice(None))))
            bs.append(self.gates[g].biases[0])
        return concatenate(wx, -1), concatenate(wh, -1), concatenate(bs, -1)

    def forward(self, seq: Tensor, state: ECLSTMState | None = None) -> list[Tensor]:
        """Unroll over ``seq`` of shape (B, L, *window); returns h_1..h_L."""
        b, length = seq.shape[0], seq.shape[1]
        if length < 1:
            raise ValueError("empty sequence")
        state = state or self.zero_state(b)
        first = self.cell.stack[0]
        spec = replace(first, filters=4 * first.filters)
        wx, wh, bias = self._split_first()
        # the first convolution is linear in [x, h]; project all inputs at once
        flat = reshape(seq, (b * length,) + seq.shape[2:])
        if first.fusion is not FusionKind.EARLY and flat.ndim == 3:
            flat = F.promote_features(flat)
        xproj = F.conv1d(flat, spec, wx, bias)
        xproj = reshape(xproj, (b, length) + xproj.shape[1:])
        zero_bias = Tensor(np.zeros(bias.shape))
        fsz = first.filters
        hs = []
        for t in range(length):
            h_in = state.h
            if first.fusion is not FusionKind.EARLY and h_in.ndim == 3:
                h_in = F.promote_features(h_in)
            joint = F.conv1d(h_in, spec, wh, zero_bias) + getitem(xproj, (slice(None), t))
            pre = {}
            for k, g in enumerate(GATES):
                z = getitem(joint, (Ellipsis, slice(k * fsz, (k + 1) * fsz)))
                pre[g] = self.gates[g].forward(z, skip_first=True)
            state = self._update(pre, state)
            hs.append(state.h)
        self.last_state = state
        return hs


def eclstm_step(layer: ECLSTMLayer, x_t: Tensor, state: ECLSTMState) -> ECLSTMState:
    return layer.step(x_t, state)


def eclstm_layer_forward(layer: ECLSTMLayer, sequence: Tensor) -> list[Tensor]:
    return layer.forward(sequence)


class FCLSTMLayer:
    """Conventional LSTM over flattened windows; gate order (i, f, o, c)."""

    def __init__(self, input_dim: int, hidden_units: int, seed: int | np.random.Generator = 0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.input_dim = int(input_dim)
        self.hidden_units = h = int(hidden_units)
        self.w_x = parameter(F.glorot_init((self.input_dim, 4 * h), rng), name="fc.Wx")
        self.w_h = parameter(F.glorot_init((h, 4 * h), rng), name="fc.Wh")
        b = np.zeros(4 * h)
        b[h: 2 * h] = FORGET_BIAS
        self.bias = parameter(b, name="fc.b")

    @property
    def output_shape(self) -> tuple[int, ...]:
        return (self.hidden_units,)

    def parameters(self) -> list[Tensor]:
        return [self.w_x, self.w_h, self.bias]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    @staticmethod
    def expected_param_count(input_dim: int, hidden: int) -> int:
        return 4 * (input_dim + hidden) * hidden + 4 * hidden

    def zero_state(self, batch: int) -> ECLSTMState:
        z = np.zeros((batch, self.hidden_units))
        return ECLSTMState(Tensor(z), Tensor(z.copy()))

    def _gates(self, pre: Tensor, state: ECLSTMState) -> ECLSTMState:
        h = self.hidden_units
        parts = {g: getitem(pre, (slice(None), slice(k * h, (k + 1) * h))) for k, g in enumerate(GATES)}
        return ECLSTMLayer._update(parts, state)

    def step(self, x_t: Tensor, state: ECLSTMState) -> ECLSTMState:
        x_t = reshape(x_t, (x_t.shape[0], -1)) if x_t.ndim > 2 else x_t
        if x_t.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} inputs, got {x_t.shape[1]}")
        return self._gates(x_t @ self.w_x + state.h @ self.w_h + self.bias, state)

    def forward(self, seq: Tensor, state: ECLSTMState | None = None) -> list[Tensor]:
        b, length = seq.shape[0], seq.shape[1]
        if length < 1:
            raise ValueError("empty sequence")
        flat = reshape(seq, (b * length, -1))
        if flat.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} inputs, got {flat.shape[1]}")
        xproj = reshape(flat @ self.w_x + self.bias, (b, length, 4 * self.hidden_units))
        state = state or self.zero_state(b)
        hs = []
        for t in range(length):
            pre = getitem(xproj, (slice(None), t)) + state.h @ self.w_h
            state = self._gates(pre, state)
            hs.append(state.h)
        self.last_state = state
        return hs


def fclstm_step(layer: FCLSTMLayer, x_t: Tensor, state: ECLSTMState) -> ECLSTMState:
    return layer.step(x_t, state)


def stack_hidden(hs: list[Tensor]) -> Tensor:
    return stack(hs, axis=1)
