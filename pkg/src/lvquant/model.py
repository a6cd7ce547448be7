"""Network assembly: shared per-slice encoder, spatio-temporal 3D stack and
the two output branches.

The network is described by an :class:`Architecture` (an ordered list of
layer descriptors per block) and executed by a tiny interpreter that keeps a
per-layer cache for the backward pass. Parameters live in a flat dict keyed
by dotted names; batch-norm running statistics live in a separate buffer
dict so that only true parameters receive gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import nnops as F
from .errors import ConfigError, CorruptedStateError, ShapeError
from .nnops import BatchNormState, ConvSpec

SUPPORTED_KAPPAS = (1, 3, 5, 7)
NUM_REGRESSION = 11
NUM_PHASES = 2

#: Order of operations inside every conv block. Swap to ("conv", "relu", "bn")
#: to try the other reading.
BLOCK_ORDER = ("conv", "bn", "relu")


@dataclass(frozen=True)
class ModelConfig:
    kappa: int = 5
    encoder_channels: int = 40
    st_channels: tuple[int, int] = (64, 64)
    phase_conv_channels: int = 64
    phase_hidden: int = 640
    seed: int = 0
    # free choices: geometry knobs used to build the miniature
    # gradient-check variant; the defaults give the 80 -> 16 -> 6 pipeline
    reg_conv_channels: int = 64
    image_size: int = 80
    kernel: int = 5
    pool1_stride: int = 5

    def __post_init__(self):
        if self.kappa not in SUPPORTED_KAPPAS:
            raise ConfigError(f"kappa must be one of {SUPPORTED_KAPPAS}, got {self.kappa}")
        if len(self.st_channels) != 2:
            raise ConfigError("st_channels needs exactly two entries")
        counts = (self.encoder_channels, *self.st_channels, self.phase_conv_channels,
                  self.phase_hidden, self.reg_conv_channels)
        if any(int(c) < 1 for c in counts):
            raise ConfigError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel must be a positive odd size")

    @classmethod
    def miniature(cls, kappa: int = 5, seed: int = 0) -> "ModelConfig":
        """8x8-input variant small enough for exhaustive finite differences."""
        return cls(kappa=kappa, encoder_channels=3, st_channels=(4, 4), phase_conv_channels=3,
                   phase_hidden=5, seed=seed, reg_conv_channels=3, image_size=8, kernel=3,
                   pool1_stride=1)


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # conv | bn | relu | maxpool | flatten | linear
    spec: ConvSpec | None = None
    bias: bool = False
    channels: int = 0
    pool: tuple[int, int, int] | None = None  # kernel, stride, padding
    features: tuple[int, int] | None = None   # linear in, out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "conv":
            shapes = {"weight": self.spec.weight_shape}
            if self.bias:
                shapes["bias"] = (self.spec.out_channels,)
            return shapes
        if self.kind == "bn":
            return {"gamma": (self.channels,), "beta": (self.channels,)}
        if self.kind == "linear":
            return {"weight": self.features, "bias": (self.features[1],)}
        return {}

    def describe(self) -> str:
        if self.kind == "conv":
            s = self.spec
            pad = ",".join(f"{lo}/{hi}" for lo, hi in s.padding)
            text = (f"conv{s.ndim}d {s.in_channels}->{s.out_channels} kernel={'x'.join(map(str, s.kernel))} "
                    f"stride={'x'.join(map(str, s.stride))} pad={pad} bias={'yes' if self.bias else 'no'}")
        elif self.kind == "bn":
            text = f"batchnorm channels={self.channels}"
        elif self.kind == "maxpool":
            k, st, p = self.pool
            text = f"maxpool2d kernel={k}x{k} stride={st} pad={p}"
        elif self.kind == "linear":
            text = f"linear {self.features[0]}->{self.features[1]}"
        else:
            text = self.kind
        return text


def _conv_block(prefix: str, index: int, spec: ConvSpec) -> list[Layer]:
    layers = {
        "conv": Layer(f"{prefix}conv{index}", "conv", spec=spec),
        "bn": Layer(f"{prefix}bn{index}", "bn", channels=spec.out_channels),
        "relu": Layer(f"{prefix}relu{index}", "relu"),
    }
    return [layers[k] for k in BLOCK_ORDER]


@dataclass
class Architecture:
    config: ModelConfig
    encoder: list[Layer]
    st: list[Layer]
    reg: list[Layer]
    phase: list[Layer]
    encoded_size: int
    st_size: int

    @property
    def blocks(self) -> dict[str, list[Layer]]:
        return {"encoder": self.encoder, "st": self.st, "reg": self.reg, "phase": self.phase}

    @property
    def st_kernels(self) -> list[tuple[int, ...]]:
        return [l.spec.kernel for l in self.st if l.kind == "conv"]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for block, layers in self.blocks.items():
            for layer in layers:
                for pname, shape in layer.param_shapes().items():
                    shapes[f"{block}.{layer.name}.{pname}"] = tuple(shape)
        return dict(sorted(shapes.items()))

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for block, layers in self.blocks.items():
            for layer in layers:
                if layer.kind == "bn":
                    shapes[f"{block}.{layer.name}.running_mean"] = (layer.channels,)
                    shapes[f"{block}.{layer.name}.running_var"] = (layer.channels,)
        return dict(sorted(shapes.items()))

    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def describe(self) -> str:
        c = self.config
        lines = [f"architecture kappa={c.kappa} input={c.image_size}x{c.image_size} "
                 f"encoded={c.encoder_channels}x{self.encoded_size}x{self.encoded_size} "
                 f"st_out={c.st_channels[1]}x1x{self.st_size}x{self.st_size}"]
        shapes = self.param_shapes()
        for block, layers in self.blocks.items():
            for layer in layers:
                params = "; ".join(f"{p}{list(s)}" for p, s in layer.param_shapes().items())
                lines.append(f"{block}.{layer.name:<8} {layer.describe()}" + (f"  [{params}]" if params else ""))
        lines.append(f"parameters {sum(int(np.prod(s)) for s in shapes.values())}")
        return "\n".join(lines)


def build_architecture(config: ModelConfig) -> Architecture:
    c = config
    k = c.kernel
    half = k // 2
    E = c.encoder_channels

    encoder = (
        _conv_block("", 1, ConvSpec.make(1, E, (k, k), 1, half))
        + [Layer("pool1", "maxpool", pool=(k, c.pool1_stride, 0))]
        + _conv_block("", 2, ConvSpec.make(E, E, (k, k), 1, half))
        + [Layer("pool2", "maxpool", pool=(k, 1, half))]
    )
    if c.image_size < k:
        raise ConfigError(f"image size {c.image_size} smaller than kernel {k}")
    encoded = (c.image_size - k) // c.pool1_stride + 1
    st_size = (encoded - k) // 2 + 1
    if st_size < 1:
        raise ConfigError(f"encoded size {encoded} too small for the spatio-temporal stack")

    C1, C2 = c.st_channels
    sp_pad = ((0, 0), (half, half), (half, half))
    no_pad = ((0, 0), (0, 0), (0, 0))
    if c.kappa == 5:
        specs = [ConvSpec(E, C1, (3, k, k), (2, 2, 2), no_pad),
                 ConvSpec(C1, C2, (2, k, k), (1, 1, 1), sp_pad)]
    elif c.kappa == 3:
        specs = [ConvSpec(E, C1, (3, k, k), (2, 2, 2), ((1, 1), (0, 0), (0, 0))),
                 ConvSpec(C1, C2, (2, k, k), (1, 1, 1), sp_pad)]
    elif c.kappa == 1:
        specs = [ConvSpec(E, C1, (1, k, k), (1, 2, 2), no_pad),
                 ConvSpec(C1, C2, (1, k, k), (1, 1, 1), sp_pad)]
    else:  # 7
        specs = [ConvSpec(E, C1, (3, k, k), (2, 2, 2), no_pad),
                 ConvSpec(C1, C2, (2, k, k), (1, 1, 1), sp_pad),
                 ConvSpec(C2, C2, (2, 3, 3), (1, 1, 1), ((0, 0), (1, 1), (1, 1)))]
    st = [layer for i, spec in enumerate(specs, 1) for layer in _conv_block("", i, spec)]

    head_pad = ((0, 0), (1, 1), (1, 1))
    reg = (
        _conv_block("", 1, ConvSpec(C2, c.reg_conv_channels, (1, 3, 3), (1, 1, 1), head_pad))
        + [Layer("conv2", "conv", ConvSpec(c.reg_conv_channels, NUM_REGRESSION, (1, st_size, st_size),
                                           (1, 1, 1), no_pad), bias=True),
           Layer("flatten", "flatten")]
    )
    P = c.phase_conv_channels
    phase = (
        _conv_block("", 1, ConvSpec(C2, P, (1, 3, 3), (1, 1, 1), head_pad))
        + [Layer("flatten", "flatten"),
           Layer("fc1", "linear", features=(P * st_size * st_size, c.phase_hidden)),
           Layer("relu2", "relu"),
           Layer("fc2", "linear", features=(c.phase_hidden, NUM_PHASES))]
    )
    return Architecture(c, encoder, st, reg, phase, encoded, st_size)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if len(shape) == 2:  # linear [in, out]
        return shape[0]
    return int(np.prod(shape[1:]))


def init_params(config: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal weights (variance 2/fan_in), zero biases, unit gamma, zero beta."""
    arch = build_architecture(config)
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "weight":
            std = np.sqrt(2.0 / _fan_in(name, shape))
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
        elif leaf == "gamma":
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    return params


def init_buffers(arch: Architecture, dtype=np.float32) -> dict[str, np.ndarray]:
    return {name: (np.ones if name.endswith("running_var") else np.zeros)(shape, dtype)
            for name, shape in arch.buffer_shapes().items()}


def is_regularized(name: str) -> bool:
    """Only convolution and linear weights enter the L2 penalty."""
    return name.endswith(".weight")


@dataclass
class Prediction:
    regression: np.ndarray    # (B, 11): 2 areas, 3 dims, 6 RWT (IS, I, IL, AL, A, AS)
    phase_logits: np.ndarray  # (B, 2): 0 = diastole, 1 = systole

    @property
    def areas(self):
        return self.regression[:, 0:2]

    @property
    def dims(self):
        return self.regression[:, 2:5]

    @property
    def rwt(self):
        return self.regression[:, 5:11]

    @property
    def phase(self) -> np.ndarray:
        # argmax resolves ties to index 0 (diastole)
        return np.argmax(self.phase_logits, axis=1)

    def __len__(self):
        return self.regression.shape[0]


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------

@dataclass
class ForwardCache:
    batch: int
    kappa: int
    caches: dict[str, list] = field(default_factory=dict)
    param_ids: dict[str, int] = field(default_factory=dict)


class Network:
    """A built architecture together with its parameters and BN buffers."""

    def __init__(self, config: ModelConfig, params=None, buffers=None, dtype=np.float32):
        self.config = config
        self.arch = build_architecture(config)
        self.dtype = np.dtype(dtype)
        self.params = init_params(config, dtype) if params is None else dict(sorted(params.items()))
        self.buffers = init_buffers(self.arch, dtype) if buffers is None else dict(sorted(buffers.items()))
        expected = self.arch.param_shapes()
        got = {k: v.shape for k, v in self.params.items()}
        if got != expected:
            raise CorruptedStateError("parameter names/shapes do not match the architecture")
        if {k: v.shape for k, v in self.buffers.items()} != self.arch.buffer_shapes():
            raise CorruptedStateError("buffer names/shapes do not match the architecture")

    def astype(self, dtype) -> "Network":
        return Network(self.config,
                       {k: v.astype(dtype) for k, v in self.params.items()},
                       {k: v.astype(dtype) for k, v in self.buffers.items()}, dtype)

    def copy(self) -> "Network":
        return self.astype(self.dtype)

    # -- interpreter ---------------------------------------------------

    def _run(self, block: str, x: np.ndarray, training: bool, caches: list | None):
        for layer in self.arch.blocks[block]:
            key = f"{block}.{layer.name}"
            if layer.kind == "conv":
                b = self.params.get(f"{key}.bias")
                y, cols = F.conv_forward(x, self.params[f"{key}.weight"], b, layer.spec, return_cols=True)
                entry = (x, cols)
            elif layer.kind == "bn":
                state = BatchNormState(
                    self.params[f"{key}.gamma"], self.params[f"{key}.beta"],
                    self.buffers[f"{key}.running_mean"], self.buffers[f"{key}.running_var"],
                    mode="train" if training else "eval")
                y, entry, new_state = F.batchnorm_forward(x, state)
                if training:
                    self.buffers[f"{key}.running_mean"] = new_state.running_mean
                    self.buffers[f"{key}.running_var"] = new_state.running_var
            elif layer.kind == "relu":
                y, entry = F.relu(x), x
            elif layer.kind == "maxpool":
                k, s, p = layer.pool
                y, argmax = F.maxpool2d_forward(x, k, s, p)
                entry = (argmax, x.shape)
            elif layer.kind == "flatten":
                y, entry = x.reshape(x.shape[0], -1), x.shape
            elif layer.kind == "linear":
                y = F.linear_forward(x, self.params[f"{key}.weight"], self.params[f"{key}.bias"])
                entry = x
            else:  # pragma: no cover
                raise CorruptedStateError(f"unknown layer kind {layer.kind}")
            if caches is not None:
                caches.append(entry)
            x = y
        return x

    def _back(self, block: str, caches: list, d: np.ndarray, grads: dict, input_grad: bool = True):
        layers = self.arch.blocks[block]
        if len(caches) != len(layers):
            raise CorruptedStateError(f"cache for block {block!r} has wrong length")
        for i in range(len(layers) - 1, -1, -1):
            layer, entry = layers[i], caches[i]
            key = f"{block}.{layer.name}"
            if layer.kind == "conv":
                x, cols = entry
                g = F.conv_backward(x, self.params[f"{key}.weight"], layer.spec, d, has_bias=layer.bias,
                                    input_grad=input_grad or i > 0, cols=cols)
                _accumulate(grads, f"{key}.weight", g.d_weights)
                if layer.bias:
                    _accumulate(grads, f"{key}.bias", g.d_bias)
                d = g.d_input
            elif layer.kind == "bn":
                g = F.batchnorm_backward(entry, d)
                _accumulate(grads, f"{key}.gamma", g.d_weights)
                _accumulate(grads, f"{key}.beta", g.d_bias)
                d = g.d_input
            elif layer.kind == "relu":
                d = F.relu_backward(entry, d)
            elif layer.kind == "maxpool":
                argmax, shape = entry
                d = F.maxpool2d_backward(argmax, d, shape)
            elif layer.kind == "flatten":
                d = d.reshape(entry)
            elif layer.kind == "linear":
                g = F.linear_backward(entry, self.params[f"{key}.weight"], d)
                _accumulate(grads, f"{key}.weight", g.d_weights)
                _accumulate(grads, f"{key}.bias", g.d_bias)
                d = g.d_input
        return d

    # -- stages --------------------------------------------------------

    def encoder_forward(self, slices: np.ndarray, training: bool = False, caches: list | None = None):
        """(B, 1, S, S) slices -> (B, E, s, s) encodings; weights shared across slices."""
        n = self.config.image_size
        if slices.ndim != 4 or slices.shape[1:] != (1, n, n):
            raise ShapeError(f"encoder expects (B, 1, {n}, {n}), got {slices.shape}")
        return self._run("encoder", slices.astype(self.dtype, copy=False), training, caches)

    def st_forward(self, volume: np.ndarray, training: bool = False, caches: list | None = None):
        c = self.config
        e = self.arch.encoded_size
        if volume.ndim != 5 or volume.shape[1:] != (c.encoder_channels, c.kappa, e, e):
            raise ShapeError(f"spatio-temporal stage expects (B, {c.encoder_channels}, {c.kappa}, {e}, {e}), "
                             f"got {volume.shape}")
        return self._run("st", volume, training, caches)

    def heads_forward(self, features: np.ndarray, training: bool = False, caches: dict | None = None):
        s = self.arch.st_size
        if features.ndim != 5 or features.shape[1:] != (self.config.st_channels[1], 1, s, s):
            raise ShapeError(f"heads expect (B, {self.config.st_channels[1]}, 1, {s}, {s}), got {features.shape}")
        reg_cache = [] if caches is not None else None
        phase_cache = [] if caches is not None else None
        reg = self._run("reg", features, training, reg_cache)
        logits = self._run("phase", features, training, phase_cache)
        if caches is not None:
            caches["reg"], caches["phase"] = reg_cache, phase_cache
        return Prediction(reg, logits)

    def forward(self, windows: np.ndarray, training: bool = False):
        """Run a batch of windows ``(B, kappa, S, S)``.

        Returns ``(Prediction, cache)``; the cache is None in eval mode.
        """
        c = self.config
        n = c.image_size
        if windows.ndim != 4 or windows.shape[1:] != (c.kappa, n, n):
            raise ShapeError(f"expected windows of shape (B, {c.kappa}, {n}, {n}), got {windows.shape}")
        B = windows.shape[0]
        cache = ForwardCache(B, c.kappa) if training else None
        lists = {k: [] for k in ("encoder", "st")} if training else {"encoder": None, "st": None}

        slices = windows.reshape(B * c.kappa, 1, n, n)
        enc = self.encoder_forward(slices, training, lists["encoder"])
        e = self.arch.encoded_size
        volume = np.ascontiguousarray(
            enc.reshape(B, c.kappa, c.encoder_channels, e, e).transpose(0, 2, 1, 3, 4))
        feats = self.st_forward(volume, training, lists["st"])
        head_caches = {} if training else None
        pred = self.heads_forward(feats, training, head_caches)
        if training:
            cache.caches = {**lists, **head_caches}
            cache.param_ids = {k: id(v) for k, v in self.params.items()}
        return pred, cache

    def predict(self, windows: np.ndarray, batch_size: int = 50) -> Prediction:
        regs, logits = [], []
        for start in range(0, len(windows), batch_size):
            p, _ = self.forward(windows[start:start + batch_size], training=False)
            regs.append(p.regression)
            logits.append(p.phase_logits)
        return Prediction(np.concatenate(regs), np.concatenate(logits))

    def backward(self, cache: ForwardCache, d_regression: np.ndarray, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of ``sum(d_regression*reg) + sum(d_logits*logits)`` w.r.t. every parameter."""
        if cache is None:
            raise CorruptedStateError("backward needs a training-mode forward cache")
        if cache.param_ids != {k: id(v) for k, v in self.params.items()}:
            raise CorruptedStateError("parameters changed between forward and backward")
        if d_regression.shape != (cache.batch, NUM_REGRESSION) or d_logits.shape != (cache.batch, NUM_PHASES):
            raise ShapeError("upstream gradients do not match the cached batch")
        c = self.config
        grads: dict[str, np.ndarray] = {}
        d_feat = self._back("reg", cache.caches["reg"], d_regression.astype(self.dtype, copy=False), grads)
        d_feat = d_feat + self._back("phase", cache.caches["phase"], d_logits.astype(self.dtype, copy=False), grads)
        d_vol = self._back("st", cache.caches["st"], d_feat, grads)
        e = self.arch.encoded_size
        d_enc = d_vol.transpose(0, 2, 1, 3, 4).reshape(cache.batch * c.kappa, c.encoder_channels, e, e)
        self._back("encoder", cache.caches["encoder"], np.ascontiguousarray(d_enc), grads, input_grad=False)
        return {k: grads.get(k, np.zeros_like(v)) for k, v in self.params.items()}


def _accumulate(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def build_network(config: ModelConfig, dtype=np.float32) -> tuple[dict[str, np.ndarray], Architecture]:
    net = Network(config, dtype=dtype)
    return net.params, net.arch


def iter_weight_tensors(params: dict[str, np.ndarray]) -> Iterable[tuple[str, np.ndarray]]:
    return ((k, v) for k, v in params.items() if is_regularized(k))
