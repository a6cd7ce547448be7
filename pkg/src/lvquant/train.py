"""Composite multi-task loss, SGD with momentum, the epoch loop and LVQC
checkpoints."""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import nnops as F
from .data import WindowSet
from .errors import ConfigError, CorruptedStateError, FormatError, ShapeError
from .model import ModelConfig, Network, Prediction, is_regularized

TERMS = ("areas", "dims", "rwt", "phase", "reg")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.5
    lam: float = 0.005
    batch_size: int = 20
    epochs: int = 100  # arbitrary; no published count
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in sorted(params.items())})


@dataclass
class LossResult:
    total: float
    terms: dict[str, float]
    d_regression: np.ndarray
    d_logits: np.ndarray
    d_params: dict[str, np.ndarray]  # regularizer gradients, weight tensors only


def regularizer(params: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Sum of squared entries over weight tensors and its gradient 2w."""
    value = 0.0
    grads = {}
    for name, w in params.items():
        if is_regularized(name):
            w64 = w.astype(np.float64, copy=False)
            value += float(np.dot(w64.ravel(), w64.ravel()))
            grads[name] = 2 * w
    return value, grads


def total_loss(pred: Prediction, labels: np.ndarray, phase: np.ndarray,
               params: dict[str, np.ndarray], lam: float) -> LossResult:
    reg = pred.regression
    labels = np.asarray(labels)
    if labels.shape != reg.shape or np.shape(phase) != (reg.shape[0],):
        raise ShapeError(f"labels {labels.shape} / phase {np.shape(phase)} do not match predictions {reg.shape}")
    target = labels.astype(reg.dtype, copy=False)
    d_reg = np.zeros_like(reg)
    terms = {}
    for name, cols in (("areas", slice(0, 2)), ("dims", slice(2, 5)), ("rwt", slice(5, 11))):
        terms[name], d_reg[:, cols] = F.mse(reg[:, cols], target[:, cols])
    terms["phase"], d_logits = F.softmax_cross_entropy(pred.phase_logits, np.asarray(phase))
    if lam:
        l2, l2_grads = regularizer(params)
        d_params = {k: lam * g for k, g in l2_grads.items()}
    else:
        l2, d_params = 0.0, {}
    terms["reg"] = l2
    terms = {k: float(v) for k, v in terms.items()}
    total = terms["areas"] + terms["dims"] + terms["rwt"] + terms["phase"] + lam * l2
    return LossResult(total, terms, d_reg, d_logits.astype(reg.dtype, copy=False), d_params)


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      state: OptimizerState, lr: float, mu: float):
    """Heavy-ball update ``v <- mu*v + g; p <- p - lr*v``.

    Returns fresh dicts; the inputs are left untouched.
    """
    if set(params) != set(state.velocity) or set(params) != set(grads):
        raise CorruptedStateError("parameter, gradient and velocity keys differ")
    velocity, updated = {}, {}
    for name, p in params.items():
        v = state.velocity[name]
        g = grads[name]
        if v.shape != p.shape or g.shape != p.shape:
            raise CorruptedStateError(f"shape mismatch for {name}")
        v = mu * v + g
        velocity[name] = v.astype(p.dtype, copy=False)
        updated[name] = (p - lr * velocity[name]).astype(p.dtype, copy=False)
    return updated, OptimizerState(velocity)


def train_step(net: Network, opt: OptimizerState, x: np.ndarray, labels: np.ndarray,
               phase: np.ndarray, config: TrainConfig) -> tuple[OptimizerState, LossResult]:
    """One forward/backward/update on a batch; updates ``net`` in place."""
    pred, cache = net.forward(x, training=True)
    loss = total_loss(pred, labels, phase, net.params, config.lam)
    grads = net.backward(cache, loss.d_regression, loss.d_logits)
    for name, g in loss.d_params.items():
        grads[name] = grads[name] + g
    net.params, opt = sgd_momentum_step(net.params, grads, opt, config.learning_rate, config.momentum)
    return opt, loss


@dataclass
class EpochStats:
    epoch: int
    loss: float
    terms: dict[str, float]
    batches: int
    samples: int

    def line(self) -> str:
        parts = [f"epoch={self.epoch}", f"loss={self.loss:.6g}"]
        parts += [f"{k}={self.terms[k]:.6g}" for k in TERMS]
        return " ".join(parts)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # one stream per epoch, so a resumed run shuffles exactly like an uninterrupted one
    return np.random.default_rng([seed, epoch])


def train_epoch(windows: WindowSet, net: Network, opt: OptimizerState, config: TrainConfig,
                rng: np.random.Generator, epoch: int = 0) -> tuple[OptimizerState, EpochStats]:
    if len(windows) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if windows.kappa != net.config.kappa:
        raise ConfigError(f"window length {windows.kappa} does not match model kappa {net.config.kappa}")
    order = rng.permutation(len(windows))
    labels_all, phase_all = windows.labels, windows.phase
    sums = dict.fromkeys(TERMS, 0.0)
    total = 0.0
    batches = 0
    for start in range(0, len(order), config.batch_size):
        rows = order[start:start + config.batch_size]
        opt, loss = train_step(net, opt, windows.inputs(rows), labels_all[rows], phase_all[rows], config)
        n = len(rows)
        total += loss.total * n
        for k in TERMS:
            sums[k] += loss.terms[k] * n
        batches += 1
    n = len(order)
    return opt, EpochStats(epoch, total / n, {k: v / n for k, v in sums.items()}, batches, n)


def fit(windows: WindowSet, net: Network, config: TrainConfig, opt: OptimizerState | None = None,
        start_epoch: int = 0, on_epoch: Callable[[EpochStats], None] | None = None):
    """Train epochs ``start_epoch .. config.epochs - 1``; returns the optimizer state and stats."""
    opt = OptimizerState.zeros_like(net.params) if opt is None else opt
    history = []
    for epoch in range(start_epoch, config.epochs):
        opt, stats = train_epoch(windows, net, opt, config, epoch_rng(config.seed, epoch), epoch)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return opt, history


def dataset_loss(windows: WindowSet, net: Network, lam: float, batch_size: int = 50) -> tuple[float, dict[str, float]]:
    """Eval-mode loss over a whole window set (sample-weighted)."""
    sums = dict.fromkeys(TERMS, 0.0)
    total = 0.0
    for start in range(0, len(windows), batch_size):
        rows = np.arange(start, min(start + batch_size, len(windows)))
        x, y, ph = windows.batch(rows)
        pred, _ = net.forward(x, training=False)
        loss = total_loss(pred, y, ph, net.params, lam)
        total += loss.total * len(rows)
        for k in TERMS:
            sums[k] += loss.terms[k] * len(rows)
    n = len(windows)
    return total / n, {k: v / n for k, v in sums.items()}


# --------------------------------------------------------------------------
# LVQC checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = b"LVQC"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    train_config: TrainConfig | None = None
    epoch: int = 0
    extra: dict = field(default_factory=dict)

    def network(self) -> Network:
        return Network(self.model_config, self.params, self.buffers)

    def optimizer(self) -> OptimizerState:
        return OptimizerState(dict(self.velocity))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    tensors += [(f"buffer/{k}", v) for k, v in sorted(ckpt.buffers.items())]
    tensors += [(f"velocity/{k}", v) for k, v in sorted(ckpt.velocity.items())]
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = {
        "model": dataclasses.asdict(ckpt.model_config),
        "train": dataclasses.asdict(ckpt.train_config) if ckpt.train_config else None,
        "epoch": ckpt.epoch,
        "extra": ckpt.extra,
    }
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(text)) + text)
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated while reading {what}", self.pos)
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"bad magic, expected {CKPT_MAGIC!r}", 0)
    version, count = r.unpack("<II", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported LVQC version {version}", 4)
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "velocity": {}}
    for _ in range(count):
        at = r.pos
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{rank}I", "tensor dims")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(4 * size, f"tensor {name}"), dtype="<f4").reshape(dims)
        group, _, key = name.partition("/")
        if group not in groups or not key:
            raise FormatError(f"unknown tensor group in {name!r}", at)
        groups[group][key] = data.astype(np.float32)
    (text_len,) = r.unpack("<I", "config length")
    at = r.pos
    try:
        meta = json.loads(r.take(text_len, "config text").decode("utf-8"))
        model_cfg = dict(meta["model"])
        model_cfg["st_channels"] = tuple(model_cfg["st_channels"])
        model = ModelConfig(**model_cfg)
        train_cfg = TrainConfig(**meta["train"]) if meta.get("train") else None
    except FormatError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid config blob: {exc}", at) from None
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes", r.pos)
    return Checkpoint(model, groups["param"], groups["buffer"], groups["velocity"],
                      train_cfg, int(meta.get("epoch", 0)), meta.get("extra") or {})


def save_checkpoint(path, net: Network, opt: OptimizerState | None = None,
                    train_config: TrainConfig | None = None, epoch: int = 0, extra: dict | None = None) -> None:
    velocity = opt.velocity if opt is not None else {}
    ckpt = Checkpoint(net.config, net.params, net.buffers, velocity, train_config, epoch, extra or {})
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_tensors(ckpt: Checkpoint) -> Iterable[tuple[str, np.ndarray]]:
    yield from ((f"param/{k}", v) for k, v in sorted(ckpt.params.items()))
    yield from ((f"buffer/{k}", v) for k, v in sorted(ckpt.buffers.items()))
    yield from ((f"velocity/{k}", v) for k, v in sorted(ckpt.velocity.items()))
