"""Model configuration and the three-stage network: reducer, recurrent backbone, dense head."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .autograd import Tensor, as_tensor, no_grad, parameter, reshape, stack
from .cell import ConvCell, ECLSTMLayer, FCLSTMLayer
from .functional import BatchNormState, ConfigError, ConvSpec, FusionKind, GeometryError

POOL_WIDTH = 2
CONFIG_FORMAT = "eclstm-model-config"
CONFIG_VERSION = 1
SEARCH_ACTIVATIONS = ("sigmoid", "relu", "leaky_relu", "linear", "hard_sigmoid")
ABLATION_SEQUENCE_LENGTH = 30
ABLATION_FILTERS = 10


class InfeasibleConfigError(ValueError):
    """A configuration cannot be realized for the given input geometry."""

    def __init__(self, stage: str, reason: str):
        super().__init__(f"{stage}: {reason}")
        self.stage = stage
        self.reason = reason


# -- configuration -------------------------------------------------------------

@dataclass
class PreConfig:
    n_layers: int = 0
    kernel_width: int = 2
    stride: int = 1
    dilation: int = 1
    activation: str = "linear"
    n_filters: int = 1
    max_pool: bool = False

    def kernel_at(self, layer: int) -> int:
        return max(2, self.kernel_width // 2**layer)


@dataclass
class CellLayerConfig:
    activation: str = "sigmoid"
    fusion: str = "early"
    filters: int = 10
    kernel_width: int = 3


@dataclass
class BackboneLayerConfig:
    """One recurrent layer: an ECLSTM cell stack, or an FCLSTM when ``lstm_units`` is set."""

    dropout: float = 0.0
    cells: list[CellLayerConfig] = field(default_factory=list)
    lstm_units: int | None = None

    @property
    def depth(self) -> int:
        return len(self.cells)


@dataclass
class HeadLayerConfig:
    units: int = 8
    activation: str = "relu"
    dropout: float = 0.0


@dataclass
class ModelConfig:
    pre: PreConfig = field(default_factory=PreConfig)
    backbone: list[BackboneLayerConfig] = field(default_factory=list)
    head: list[HeadLayerConfig] = field(default_factory=list)
    sequence_length: int = ABLATION_SEQUENCE_LENGTH
    window_size: int = 1
    batch_size: int = 512
    batch_norm: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        pre = PreConfig(**d.pop("pre", {}))
        backbone = [BackboneLayerConfig(dropout=b.get("dropout", 0.0),
                                        cells=[CellLayerConfig(**c) for c in b.get("cells", [])],
                                        lstm_units=b.get("lstm_units"))
                    for b in d.pop("backbone", [])]
        head = [HeadLayerConfig(**h) for h in d.pop("head", [])]
        return cls(pre=pre, backbone=backbone, head=head, **d)

    # -- flat key/value text form ------------------------------------------------
    def to_flat(self) -> dict[str, str]:
        """Dotted keys (1-based layer indices); inactive children are omitted."""
        out = {"sequence_length": str(self.sequence_length), "window_size": str(self.window_size),
               "batch_size": str(self.batch_size), "batch_norm": str(self.batch_norm),
               "pre.n_layers": str(self.pre.n_layers)}
        if self.pre.n_layers > 0:
            for k in ("kernel_width", "stride", "dilation", "activation", "n_filters", "max_pool"):
                out[f"pre.{k}"] = str(getattr(self.pre, k))
        out["backbone.n_layers"] = str(len(self.backbone))
        for i, b in enumerate(self.backbone, 1):
            out[f"backbone.{i}.dropout"] = repr(float(b.dropout))
            if b.lstm_units is not None:
                out[f"backbone.{i}.lstm_units"] = str(b.lstm_units)
                continue
            out[f"backbone.{i}.depth"] = str(b.depth)
            for j, c in enumerate(b.cells, 1):
                for k in ("activation", "fusion", "filters", "kernel_width"):
                    out[f"backbone.{i}.{j}.{k}"] = str(getattr(c, k))
        out["head.n_layers"] = str(len(self.head))
        for i, h in enumerate(self.head, 1):
            out[f"head.{i}.units"] = str(h.units)
            out[f"head.{i}.activation"] = h.activation
            out[f"head.{i}.dropout"] = repr(float(h.dropout))
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "ModelConfig":
        def get(key, conv, default=None):
            if key not in flat:
                if default is None:
                    raise ConfigError(f"missing key {key!r}")
                return default
            return conv(flat[key])

        def as_bool(v):
            if v not in ("True", "False"):
                raise ConfigError(f"bad boolean {v!r}")
            return v == "True"

        n_pre = get("pre.n_layers", int)
        pre = PreConfig(n_layers=n_pre)
        if n_pre > 0:
            pre = PreConfig(n_pre, get("pre.kernel_width", int), get("pre.stride", int),
                            get("pre.dilation", int), get("pre.activation", str),
                            get("pre.n_filters", int), get("pre.max_pool", as_bool))
        backbone = []
        for i in range(1, get("backbone.n_layers", int) + 1):
            drop = get(f"backbone.{i}.dropout", float)
            if f"backbone.{i}.lstm_units" in flat:
                backbone.append(BackboneLayerConfig(drop, [], get(f"backbone.{i}.lstm_units", int)))
                continue
            cells = [CellLayerConfig(get(f"backbone.{i}.{j}.activation", str), get(f"backbone.{i}.{j}.fusion", str),
                                     get(f"backbone.{i}.{j}.filters", int), get(f"backbone.{i}.{j}.kernel_width", int))
                     for j in range(1, get(f"backbone.{i}.depth", int) + 1)]
            backbone.append(BackboneLayerConfig(drop, cells))
        head = [HeadLayerConfig(get(f"head.{i}.units", int), get(f"head.{i}.activation", str),
                                get(f"head.{i}.dropout", float))
                for i in range(1, get("head.n_layers", int) + 1)]
        return cls(pre, backbone, head, get("sequence_length", int), get("window_size", int),
                   get("batch_size", int), get("batch_norm", as_bool, "True"))

    def dumps(self) -> str:
        lines = [f"# format = {CONFIG_FORMAT}", f"# version = {CONFIG_VERSION}"]
        return "\n".join(lines + [f"{k} = {v}" for k, v in self.to_flat().items()]) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ModelConfig":
        flat = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            k, v = (part.strip() for part in line.split("=", 1))
            flat[k] = v
        return cls.from_flat(flat)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.loads(Path(path).read_text())

    def validate(self) -> "ModelConfig":
        """Check every active field against the searchable ranges; returns self."""
        def check(name, v, lo, hi):
            if not lo <= v <= hi:
                raise ConfigError(f"{name}={v} outside [{lo}, {hi}]")

        def act(name, v):
            if v not in SEARCH_ACTIVATIONS:
                raise ConfigError(f"{name}={v!r} not in {SEARCH_ACTIVATIONS}")

        check("pre.n_layers", self.pre.n_layers, 0, 5)
        if self.pre.n_layers:
            check("pre.kernel_width", self.pre.kernel_width, 2, 1024)
            check("pre.stride", self.pre.stride, 1, 20)
            check("pre.dilation", self.pre.dilation, 1, 10)
            check("pre.n_filters", self.pre.n_filters, 1, 20)
            act("pre.activation", self.pre.activation)
        check("backbone.n_layers", len(self.backbone), 1, 3)
        for i, b in enumerate(self.backbone, 1):
            if b.lstm_units is not None:
                raise ConfigError(f"backbone.{i}: flatten-input LSTM layers are not part of the search space")
            check(f"backbone.{i}.dropout", b.dropout, 0.0, 0.99)
            check(f"backbone.{i}.depth", b.depth, 1, 4)
            for j, c in enumerate(b.cells, 1):
                act(f"backbone.{i}.{j}.activation", c.activation)
                if c.fusion not in ("early", "hybrid", "late"):
                    raise ConfigError(f"backbone.{i}.{j}.fusion={c.fusion!r}")
                check(f"backbone.{i}.{j}.filters", c.filters, 4, 64)
                check(f"backbone.{i}.{j}.kernel_width", c.kernel_width, 2, 32)
        check("head.n_layers", len(self.head), 1, 4)
        for i, h in enumerate(self.head, 1):
            check(f"head.{i}.units", h.units, 8, 1024)
            act(f"head.{i}.activation", h.activation)
            check(f"head.{i}.dropout", h.dropout, 0.0, 0.99)
        return self


def ablation_kernel(window: int) -> int:
    # Python rounding (ties to even), guarded so w=1 stays valid
    return max(1, round(window / 4))


def fclstm_baseline(window: int = 1, batch_size: int = 512) -> ModelConfig:
    """Flatten-input LSTM 32 -> LSTM 64 -> dense 8 -> dense 8 -> 1."""
    return ModelConfig(
        backbone=[BackboneLayerConfig(lstm_units=32), BackboneLayerConfig(lstm_units=64)],
        head=[HeadLayerConfig(8, "relu"), HeadLayerConfig(8, "relu")],
        sequence_length=ABLATION_SEQUENCE_LENGTH, window_size=window, batch_size=batch_size)


def eclstm_ablation(window: int, batch_size: int = 512, fusion: str = "early",
                    activation: str = "sigmoid") -> ModelConfig:
    """The FCLSTM baseline with both recurrent layers swapped for 2-depth ECLSTM."""
    k = ablation_kernel(window)
    cell = [CellLayerConfig(activation, fusion, ABLATION_FILTERS, k) for _ in range(2)]
    return ModelConfig(
        backbone=[BackboneLayerConfig(cells=list(cell)), BackboneLayerConfig(cells=list(cell))],
        head=[HeadLayerConfig(8, "relu"), HeadLayerConfig(8, "relu")],
        sequence_length=ABLATION_SEQUENCE_LENGTH, window_size=window, batch_size=batch_size)


# -- stages ----------------------------------------------------------------------

class Preprocessor:
    """Per-cycle, per-feature strided/dilated convolutions with weights shared everywhere.

    Input windows are (w, n, m); output windows are (w, n, m' * filters).
    """

    def __init__(self, cfg: PreConfig, samples_per_cycle: int, rng: np.random.Generator):
        self.cfg = cfg
        self.specs: list[ConvSpec] = []
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.lengths = [samples_per_cycle]
        length, channels = samples_per_cycle, 1
        for i in range(cfg.n_layers):
            spec = ConvSpec(FusionKind.EARLY, cfg.kernel_at(i), cfg.stride, cfg.dilation,
                            cfg.n_filters, "valid", cfg.activation)
            try:
                length = spec.output_length(length)
                if cfg.max_pool and i < cfg.n_layers - 1:
                    if length < POOL_WIDTH:
                        raise GeometryError(f"pool width {POOL_WIDTH} exceeds length {length}")
                    length //= POOL_WIDTH
            except GeometryError as err:
                raise InfeasibleConfigError("preprocessing", f"layer {i}: {err}") from err
            self.specs.append(spec)
            wshape, bshape = F.conv_weight_shapes(spec, channels)
            self.weights.append(parameter(F.glorot_init(wshape, rng), name=f"pre.W{i}"))
            self.biases.append(parameter(np.zeros(bshape), name=f"pre.b{i}"))
            self.lengths.append(length)
            channels = cfg.n_filters
        self.out_channels = length * channels

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def __call__(self, x: Tensor) -> Tensor:
        if not self.specs:
            return x
        lead, m = x.shape[:-1], x.shape[-1]
        out = reshape(x, (int(np.prod(lead)), m, 1))
        for i, spec in enumerate(self.specs):
            out = F.apply_activation(spec.activation, F.conv1d_early(out, spec, self.weights[i], self.biases[i]))
            if self.cfg.max_pool and i < len(self.specs) - 1:
                out = F.maxpool1d(out, POOL_WIDTH, axis=1)
        return reshape(out, lead + (self.out_channels,))


class Backbone:
    """Stacked recurrent layers with batch norm + dropout between them."""

    def __init__(self, layers: list[BackboneLayerConfig], window_shape: tuple[int, ...],
                 rng: np.random.Generator, batch_norm: bool = True):
        if not layers:
            raise InfeasibleConfigError("backbone", "at least one recurrent layer is required")
        self.configs = layers
        self.layers = []
        self.norms: list[BatchNormState | None] = []
        shape = tuple(window_shape)
        for i, cfg in enumerate(layers):
            F.check_dropout_rate(cfg.dropout)
            try:
                if cfg.lstm_units is not None:
                    layer = FCLSTMLayer(int(np.prod(shape)), cfg.lstm_units, rng)
                else:
                    cell = ConvCell(tuple(ConvSpec(c.fusion, c.kernel_width, 1, 1, c.filters, "same", c.activation)
                                          for c in cfg.cells))
                    layer = ECLSTMLayer(cell, shape, rng)
            except (GeometryError, F.ConfigError) as err:
                raise InfeasibleConfigError("backbone", f"layer {i}: {err}") from err
            self.layers.append(layer)
            shape = layer.output_shape
            last = i == len(layers) - 1
            self.norms.append(BatchNormState(shape[-1]) if batch_norm and not last else None)
        self.output_shape = shape

    def parameters(self) -> list[Tensor]:
        params = [p for layer in self.layers for p in layer.parameters()]
        params += [p for bn in self.norms if bn is not None for p in bn.parameters()]
        return params

    def __call__(self, seq: Tensor, train: bool, rng: np.random.Generator | None) -> Tensor:
        """(B, L, *window) -> final hidden state h_L of the last layer."""
        for i, layer in enumerate(self.layers):
            hs = layer.forward(seq)
            if i == len(self.layers) - 1:
                return hs[-1]
            seq = stack(hs, axis=1)
            if self.norms[i] is not None:
                seq = F.batch_norm(seq, self.norms[i], train)
            seq = F.dropout(seq, self.configs[i].dropout, train, rng)
        raise AssertionError("unreachable")


class Head:
    """Stacked dense layers ending in one linear output unit."""

    def __init__(self, layers: list[HeadLayerConfig], in_dim: int, rng: np.random.Generator):
        self.configs = list(layers)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.activations: list[str] = []
        self.dropouts: list[float] = []
        dims = [in_dim] + [c.units for c in layers] + [1]
        for i in range(len(dims) - 1):
            self.weights.append(parameter(F.glorot_init((dims[i], dims[i + 1]), rng), name=f"head.W{i}"))
            self.biases.append(parameter(np.zeros(dims[i + 1]), name=f"head.b{i}"))
            if i < len(layers):
                self.activations.append(layers[i].activation)
                self.dropouts.append(F.check_dropout_rate(layers[i].dropout))
            else:
                self.activations.append("linear")
                self.dropouts.append(0.0)

    @property
    def n_affine(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def __call__(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        out = reshape(x, (x.shape[0], -1))
        for w, b, act, rate in zip(self.weights, self.biases, self.activations, self.dropouts):
            out = F.dense(out, w, b, act)
            out = F.dropout(out, rate, train, rng)
        return reshape(out, (out.shape[0],))


def build_preprocessor(cfg: PreConfig, samples_per_cycle: int, rng) -> Preprocessor:
    return Preprocessor(cfg, samples_per_cycle, _rng(rng))


def build_backbone(layers: list[BackboneLayerConfig], window_shape, rng, batch_norm: bool = True) -> Backbone:
    return Backbone(layers, tuple(window_shape), _rng(rng), batch_norm)


def build_head(layers: list[HeadLayerConfig], in_dim: int, rng) -> Head:
    return Head(layers, in_dim, _rng(rng))


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


class Model:
    """Composed pipeline mapping (B, L, w, n, m) batches to (B,) RUL predictions."""

    def __init__(self, cfg: ModelConfig, n_features: int, samples_per_cycle: int = 1, seed: int = 0):
        self.cfg = cfg
        self.n_features = n_features
        self.samples_per_cycle = samples_per_cycle
        rng = np.random.default_rng(seed)
        self.pre = Preprocessor(cfg.pre, samples_per_cycle, rng)
        window = (cfg.window_size, n_features, self.pre.out_channels)
        self.backbone = Backbone(cfg.backbone, window, rng, cfg.batch_norm)
        self.head = Head(cfg.head, int(np.prod(self.backbone.output_shape)), rng)

    def parameters(self) -> list[Tensor]:
        return self.pre.parameters() + self.backbone.parameters() + self.head.parameters()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def stage_param_counts(self) -> dict[str, int]:
        return {"preprocessing": sum(p.size for p in self.pre.parameters()),
                "backbone": sum(p.size for p in self.backbone.parameters()),
                "head": sum(p.size for p in self.head.parameters())}

    def forward(self, batch, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x = as_tensor(batch)
        if x.ndim != 5:
            raise ValueError(f"expected (batch, L, w, n, m) input, got {x.shape}")
        x = self.pre(x)
        h = self.backbone(x, train, rng)
        return self.head(h, train, rng)

    __call__ = forward

    def predict(self, batch, chunk: int = 1024) -> np.ndarray:
        batch = np.asarray(batch)
        with no_grad():
            out = [self.forward(batch[i: i + chunk], train=False).data for i in range(0, len(batch), chunk)]
        return np.concatenate(out) if out else np.zeros(0)

    # -- persistence ----------------------------------------------------------
    def _norms(self) -> list[BatchNormState]:
        return [bn for bn in self.backbone.norms if bn is not None]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"p{i}": p.data.copy() for i, p in enumerate(self.parameters())}
        for j, bn in enumerate(self._norms()):
            state[f"bn{j}.mean"] = bn.running_mean.copy()
            state[f"bn{j}.var"] = bn.running_var.copy()
            state[f"bn{j}.updates"] = np.array(bn.updates)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for i, p in enumerate(self.parameters()):
            src = np.asarray(state[f"p{i}"])
            if src.shape != p.shape:
                raise ValueError(f"parameter {i} shape {src.shape} != {p.shape}")
            p.data[...] = src
        for j, bn in enumerate(self._norms()):
            bn.running_mean = np.array(state[f"bn{j}.mean"], dtype=float)
            bn.running_var = np.array(state[f"bn{j}.var"], dtype=float)
            bn.updates = int(state[f"bn{j}.updates"])

    def save(self, path: str | Path) -> None:
        meta = json.dumps({"format": "eclstm-model", "version": 1, "config": self.cfg.to_dict(),
                           "n_features": self.n_features, "samples_per_cycle": self.samples_per_cycle})
        np.savez(path, __meta__=np.array(meta), **self.state_dict())

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            model = cls(ModelConfig.from_dict(meta["config"]), meta["n_features"], meta["samples_per_cycle"])
            model.load_state_dict({k: z[k] for k in z.files if k != "__meta__"})
        return model


def assemble_model(cfg: ModelConfig, n_features: int, samples_per_cycle: int = 1, seed: int = 0) -> Model:
    """Build all three stages; raises InfeasibleConfigError naming the failing stage."""
    try:
        return Model(cfg, n_features, samples_per_cycle, seed)
    except InfeasibleConfigError:
        raise
    except (GeometryError, F.ConfigError) as err:
        raise InfeasibleConfigError("model", str(err)) from err
