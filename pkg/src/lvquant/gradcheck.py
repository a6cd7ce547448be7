"""Finite-difference verification of every layer and of the miniature network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nnops as F
from .model import SUPPORTED_KAPPAS, ModelConfig, Network
from .nnops import BatchNormState, ConvSpec, finite_difference_check

OPS_THRESHOLD = 1e-5
MODEL_THRESHOLD = 1e-4
EPSILON = 1e-5
# model-scope upstream gradients are scaled down so the probed scalar stays
# small and central-difference roundoff stays below the relative-error floor
MODEL_PROBE_SCALE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.threshold)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<28} max_rel_err={self.max_error:.3e} threshold={self.threshold:.0e} {status}"


def _check_conv(rng, spatial, kernel, stride, pad) -> float:
    nd = len(spatial)
    x = rng.normal(size=(2, 2, *spatial))
    spec = ConvSpec.make(2, 3, kernel, stride, pad)
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=3)
    out = F.conv_forward(x, w, b, spec)
    d = rng.normal(size=out.shape)
    g = F.conv_backward(x, w, spec, d)
    fwd = F.conv2d_forward if nd == 2 else F.conv3d_forward
    return finite_difference_check(
        lambda x, w, b: float(np.sum(d * fwd(x, w, b, spec))),
        {"x": x, "w": w, "b": b},
        {"x": g.d_input, "w": g.d_weights, "b": g.d_bias},
        EPSILON,
    )


def _check_maxpool(rng, kernel, stride, pad) -> float:
    # a shuffled ramp keeps every window free of near-ties
    shape = (2, 2, 7, 7)
    x = (rng.permutation(int(np.prod(shape))) * 0.01).reshape(shape).astype(np.float64)
    out, idx = F.maxpool2d_forward(x, kernel, stride, pad)
    d = rng.normal(size=out.shape)
    grad = F.maxpool2d_backward(idx, d, x.shape)
    return finite_difference_check(
        lambda x: float(np.sum(d * F.maxpool2d_forward(x, kernel, stride, pad)[0])),
        {"x": x}, {"x": grad}, EPSILON,
    )


def _check_batchnorm(rng, shape) -> float:
    channels = shape[1]
    x = rng.normal(size=shape)
    gamma = rng.normal(size=channels)
    beta = rng.normal(size=channels)

    def run(x, gamma, beta):
        state = BatchNormState(gamma, beta, np.zeros(channels), np.ones(channels))
        return F.batchnorm_forward(x, state)

    out, cache, _ = run(x, gamma, beta)
    d = rng.normal(size=out.shape)
    g = F.batchnorm_backward(cache, d)
    return finite_difference_check(
        lambda x, gamma, beta: float(np.sum(d * run(x, gamma, beta)[0])),
        {"x": x, "gamma": gamma, "beta": beta},
        {"x": g.d_input, "gamma": g.d_weights, "beta": g.d_bias},
        EPSILON,
    )


def _check_relu(rng) -> float:
    x = rng.normal(size=(6, 7))
    x = np.where(np.abs(x) < 1e-2, 0.5, x)  # stay away from the kink
    d = rng.normal(size=x.shape)
    return finite_difference_check(lambda x: float(np.sum(d * F.relu(x))), {"x": x},
                                   {"x": F.relu_backward(x, d)}, EPSILON)


def _check_linear(rng) -> float:
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    d = rng.normal(size=(3, 5))
    g = F.linear_backward(x, w, d)
    return finite_difference_check(
        lambda x, w, b: float(np.sum(d * F.linear_forward(x, w, b))),
        {"x": x, "w": w, "b": b},
        {"x": g.d_input, "w": g.d_weights, "b": g.d_bias},
        EPSILON,
    )


def _check_cross_entropy(rng) -> float:
    logits = rng.normal(size=(5, 2))
    labels = rng.integers(0, 2, size=5)
    _, d = F.softmax_cross_entropy(logits, labels)
    return finite_difference_check(lambda z: F.softmax_cross_entropy(z, labels)[0],
                                   {"z": logits}, {"z": d}, EPSILON)


def _check_mse(rng) -> float:
    p, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    _, d = F.mse(p, t)
    return finite_difference_check(lambda p: F.mse(p, t)[0], {"p": p}, {"p": d}, EPSILON)


def op_checks(seed: int = 0) -> list[tuple[str, Callable[[np.random.Generator], float]]]:
    return [
        ("conv2d", lambda r: _check_conv(r, (6, 6), (3, 3), 1, 1)),
        ("conv2d_strided", lambda r: _check_conv(r, (7, 7), (3, 3), 2, 0)),
        ("conv3d", lambda r: _check_conv(r, (4, 5, 5), (3, 3, 3), 1, (1, 1, 1))),
        ("conv3d_strided", lambda r: _check_conv(r, (5, 6, 6), (3, 3, 3), (2, 1, 1), (0, 1, 1))),
        ("maxpool2d", lambda r: _check_maxpool(r, 2, 2, 0)),
        ("maxpool2d_overlap", lambda r: _check_maxpool(r, 3, 1, 1)),
        ("batchnorm2d", lambda r: _check_batchnorm(r, (3, 2, 3, 3))),
        ("batchnorm1d", lambda r: _check_batchnorm(r, (6, 3))),
        ("relu", _check_relu),
        ("linear", _check_linear),
        ("softmax_cross_entropy", _check_cross_entropy),
        ("mse", _check_mse),
    ]


def check_ops(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [CheckResult(name, fn(rng), OPS_THRESHOLD) for name, fn in op_checks(seed)]


def model_gradient_error(kappa: int, seed: int = 0, batch: int = 2) -> float:
    """Max relative error of all parameter gradients of the miniature network."""
    net = Network(ModelConfig.miniature(kappa, seed), dtype=np.float64)
    rng = np.random.default_rng(seed + 1000 * kappa)
    n = net.config.image_size
    windows = rng.random((batch, kappa, n, n))
    d_reg = rng.normal(size=(batch, 11)) * MODEL_PROBE_SCALE
    d_logits = rng.normal(size=(batch, 2)) * MODEL_PROBE_SCALE
    pred, cache = net.forward(windows, training=True)
    grads = net.backward(cache, d_reg, d_logits)

    def probe(**params):
        net.params = params
        p, _ = net.forward(windows, training=True)
        return float(np.sum(d_reg * p.regression) + np.sum(d_logits * p.phase_logits))

    params = dict(net.params)
    return finite_difference_check(probe, params, grads, EPSILON)


def check_model(kappas=SUPPORTED_KAPPAS, seed: int = 0) -> list[CheckResult]:
    return [CheckResult(f"miniature_kappa{k}", model_gradient_error(k, seed), MODEL_THRESHOLD) for k in kappas]
