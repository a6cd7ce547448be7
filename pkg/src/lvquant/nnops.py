"""Differentiable layer primitives with explicit forward and backward passes.

All functions are pure: they take arrays and return new arrays. Convolutions
are lowered im2col-style: the input is copied into a (C*K, B*L) column
matrix one kernel offset at a time and contracted against the weights with a
single BLAS call. The input gradient scatters the column gradient back the
same way.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    CorruptedStateError,
    DegenerateBatchError,
    InvalidSpecError,
    LabelError,
    ShapeError,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[tuple[int, int], ...]

    def __post_init__(self):
        nd = len(self.kernel)
        if len(self.stride) != nd or len(self.padding) != nd:
            raise InvalidSpecError(f"kernel/stride/padding rank mismatch in {self}")
        if any(s < 1 for s in self.stride) or any(k < 1 for k in self.kernel):
            raise InvalidSpecError(f"kernel and stride must be >= 1 in {self}")
        if any(lo < 0 or hi < 0 for lo, hi in self.padding):
            raise InvalidSpecError(f"negative padding in {self}")

    @classmethod
    def make(cls, in_channels, out_channels, kernel, stride=1, padding=0) -> "ConvSpec":
        """Build a spec, expanding scalar stride/padding to every spatial axis."""
        kernel = tuple(kernel)
        nd = len(kernel)
        if isinstance(stride, int):
            stride = (stride,) * nd
        if isinstance(padding, int):
            padding = ((padding, padding),) * nd
        else:
            padding = tuple((p, p) if isinstance(p, int) else tuple(p) for p in padding)
        return cls(in_channels, out_channels, kernel, tuple(stride), padding)

    @property
    def ndim(self) -> int:
        return len(self.kernel)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels) + self.kernel

    def output_spatial(self, spatial: Sequence[int]) -> tuple[int, ...]:
        out = []
        for n, k, s, (lo, hi) in zip(spatial, self.kernel, self.stride, self.padding):
            span = n + lo + hi - k
            if span < 0:
                raise ShapeError(f"kernel {self.kernel} larger than padded input {tuple(spatial)}")
            out.append(span // s + 1)
        return tuple(out)


@dataclass
class LayerGrads:
    d_input: np.ndarray | None
    d_weights: np.ndarray | None = None
    d_bias: np.ndarray | None = None


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _check_conv(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> tuple[int, ...]:
    nd = spec.ndim
    if x.ndim != nd + 2:
        raise ShapeError(f"expected rank-{nd + 2} input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weights {w.shape} do not match spec {spec.weight_shape}")
    return spec.output_spatial(x.shape[2:])


def _offset_slices(offs, out_spatial, stride):
    return tuple(slice(o, o + (n - 1) * s + 1, s) for o, n, s in zip(offs, out_spatial, stride))


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Lower ``x`` to columns of shape (C * prod(kernel), B * prod(out_spatial)).

    Row index is (channel, kernel offset) in row-major order, matching a
    reshape of the weights to (O, C * prod(kernel)).
    """
    out_spatial = spec.output_spatial(x.shape[2:])
    B, C = x.shape[:2]
    nd = spec.ndim
    widths = [(0, 0), (0, 0)] + [tuple(p) for p in spec.padding]
    xp = np.pad(x, widths) if any(lo or hi for lo, hi in spec.padding) else x
    xt = xp.swapaxes(0, 1)  # (C, B, *padded)
    K = int(np.prod(spec.kernel))
    cols = np.empty((C, K, B) + out_spatial, dtype=x.dtype)
    for k, offs in enumerate(np.ndindex(*spec.kernel)):
        cols[:, k] = xt[(slice(None), slice(None)) + _offset_slices(offs, out_spatial, spec.stride)]
    return cols.reshape(C * K, -1)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: ConvSpec,
                 return_cols: bool = False):
    """N-d cross-correlation with zero padding. ``b`` may be None (no bias).

    With ``return_cols`` the lowered input is returned too, so a training
    pass can hand it to :func:`conv_backward` instead of rebuilding it.
    """
    out_spatial = _check_conv(x, w, spec)
    nd = spec.ndim
    cols = im2col(x, spec)
    out = w.reshape(spec.out_channels, -1) @ cols  # (O, B*L)
    out = out.reshape((spec.out_channels, x.shape[0]) + out_spatial)
    out = np.ascontiguousarray(out.swapaxes(0, 1))
    if b is not None:
        if b.shape != (spec.out_channels,):
            raise ShapeError(f"bias shape {b.shape} != ({spec.out_channels},)")
        out += b.reshape((1, -1) + (1,) * nd)
    return (out, cols) if return_cols else out


def conv_backward(x: np.ndarray, w: np.ndarray, spec: ConvSpec, d_out: np.ndarray,
                  has_bias: bool = True, input_grad: bool = True, cols: np.ndarray | None = None) -> LayerGrads:
    out_spatial = _check_conv(x, w, spec)
    nd = spec.ndim
    B, C = x.shape[:2]
    O = spec.out_channels
    expected = (B, O) + out_spatial
    if d_out.shape != expected:
        raise ShapeError(f"d_output shape {d_out.shape} != forward output shape {expected}")
    if cols is None:
        cols = im2col(x, spec)
    d_out_t = np.ascontiguousarray(d_out.swapaxes(0, 1)).reshape(O, -1)  # (O, B*L)
    d_w = (d_out_t @ cols.T).reshape(w.shape).astype(w.dtype, copy=False)
    d_b = d_out_t.sum(axis=1) if has_bias else None

    d_x = None
    if input_grad:
        K = int(np.prod(spec.kernel))
        d_cols = (w.reshape(O, -1).T @ d_out_t).reshape((C, K, B) + out_spatial)
        padded = tuple(n + lo + hi for n, (lo, hi) in zip(x.shape[2:], spec.padding))
        d_xt = np.zeros((C, B) + padded, dtype=x.dtype)
        for k, offs in enumerate(np.ndindex(*spec.kernel)):
            d_xt[(slice(None), slice(None)) + _offset_slices(offs, out_spatial, spec.stride)] += d_cols[:, k]
        crop = (slice(None), slice(None)) + tuple(
            slice(lo, lo + n) for n, (lo, _) in zip(x.shape[2:], spec.padding)
        )
        d_x = np.ascontiguousarray(d_xt[crop].swapaxes(0, 1))
    return LayerGrads(d_x, d_w, d_b)


def conv2d_forward(x, w, b, spec: ConvSpec):
    if spec.ndim != 2:
        raise ShapeError("conv2d needs a 2-d spec")
    return conv_forward(x, w, b, spec)


def conv2d_backward(x, w, spec: ConvSpec, d_out, has_bias=True, input_grad=True):
    if spec.ndim != 2:
        raise ShapeError("conv2d needs a 2-d spec")
    return conv_backward(x, w, spec, d_out, has_bias, input_grad)


def conv3d_forward(x, w, b, spec: ConvSpec):
    if spec.ndim != 3:
        raise ShapeError("conv3d needs a 3-d spec")
    return conv_forward(x, w, b, spec)


def conv3d_backward(x, w, spec: ConvSpec, d_out, has_bias=True, input_grad=True):
    if spec.ndim != 3:
        raise ShapeError("conv3d needs a 3-d spec")
    return conv_backward(x, w, spec, d_out, has_bias, input_grad)


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def maxpool2d_forward(x: np.ndarray, kernel: int, stride: int, padding: int = 0):
    """Max pooling with -inf padding.

    Returns ``(out, argmax)`` where ``argmax`` holds, per output element, the
    flat row-major offset of the winning input element. Ties resolve to the
    first element in row-major window order.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects (B, C, H, W), got {x.shape}")
    if padding >= kernel:
        raise InvalidSpecError(f"padding {padding} >= kernel {kernel}: some windows see only padding")
    spec = ConvSpec.make(x.shape[1], x.shape[1], (kernel, kernel), stride, padding)
    oh, ow = spec.output_spatial(x.shape[2:])
    B, C, H, W = x.shape
    if stride == kernel and padding == 0:
        # non-overlapping windows: one reshape and a single argmax
        win = x[:, :, :oh * kernel, :ow * kernel].reshape(B, C, oh, kernel, ow, kernel)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, oh, ow, kernel * kernel)
        local = np.argmax(win, axis=-1)
        best = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    else:
        xp = np.pad(x, [(0, 0), (0, 0), (padding, padding), (padding, padding)],
                    constant_values=-np.inf) if padding else x
        views = [xp[(slice(None), slice(None)) + _offset_slices(offs, (oh, ow), (stride, stride))]
                 for offs in np.ndindex(kernel, kernel)]
        best = views[0].copy()
        for v in views[1:]:
            np.maximum(best, v, out=best)
        # reverse scan so the earliest matching offset is written last
        local = np.full(best.shape, len(views) - 1, dtype=np.int64)
        for k in range(len(views) - 2, -1, -1):
            np.putmask(local, views[k] == best, k)

    rows = np.arange(oh)[:, None] * stride + local // kernel - padding
    cols = np.arange(ow)[None, :] * stride + local % kernel - padding
    plane = (np.arange(B)[:, None, None, None] * C + np.arange(C)[None, :, None, None]) * (H * W)
    argmax = plane + rows * W + cols
    return np.ascontiguousarray(best), argmax


def maxpool2d_backward(argmax: np.ndarray, d_out: np.ndarray, input_shape: Sequence[int]) -> np.ndarray:
    if argmax.shape != d_out.shape:
        raise ShapeError(f"argmax {argmax.shape} vs d_output {d_out.shape}")
    size = int(np.prod(input_shape))
    if argmax.size and (argmax.min() < 0 or argmax.max() >= size):
        raise CorruptedStateError("pooling argmax index outside the input tensor")
    d_x = np.bincount(argmax.ravel(), weights=d_out.ravel(), minlength=size)
    return d_x.astype(d_out.dtype, copy=False).reshape(tuple(input_shape))


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)


def batchnorm_forward(x: np.ndarray, state: BatchNormState):
    """Per-channel normalization over every axis but axis 1.

    Returns ``(out, cache, new_state)``; ``state`` itself is never mutated.
    In train mode the running variance is updated with the unbiased batch
    variance.
    """
    if x.ndim < 2 or x.shape[1] != state.gamma.shape[0]:
        raise ShapeError(f"input {x.shape} incompatible with {state.gamma.shape[0]} BN channels")
    B, C = x.shape[:2]
    x3 = x.reshape(B, C, -1)
    n = B * x3.shape[2]
    if state.mode == "train":
        if n < 2:
            raise DegenerateBatchError("batch norm in train mode needs >= 2 values per channel")
        mean = x3.sum(axis=(0, 2)) / n
        centered = x3 - mean[None, :, None]
        var = np.square(centered).sum(axis=(0, 2)) / n
        m = state.momentum
        new_state = dataclasses.replace(
            state,
            running_mean=((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype),
            running_var=((1 - m) * state.running_var + m * var * (n / (n - 1))).astype(state.running_var.dtype),
        )
    elif state.mode == "eval":
        mean, var = state.running_mean, state.running_var
        centered = x3 - mean[None, :, None]
        new_state = state
    else:
        raise ValueError(f"unknown batch-norm mode {state.mode!r}")
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = centered * inv_std[None, :, None]
    out = xhat * state.gamma[None, :, None] + state.beta[None, :, None]
    cache = (xhat.reshape(x.shape), inv_std, state.gamma, state.mode)
    return out.reshape(x.shape).astype(x.dtype, copy=False), cache, new_state


def batchnorm_backward(cache, d_out: np.ndarray) -> LayerGrads:
    xhat, inv_std, gamma, mode = cache
    if d_out.shape != xhat.shape:
        raise ShapeError(f"d_output {d_out.shape} != forward output {xhat.shape}")
    B, C = d_out.shape[:2]
    d3 = d_out.reshape(B, C, -1)
    xh3 = xhat.reshape(B, C, -1)
    n = B * d3.shape[2]
    d_beta = d3.sum(axis=(0, 2))
    d_gamma = (d3 * xh3).sum(axis=(0, 2))
    scale = (gamma * inv_std)[None, :, None]
    if mode == "eval":
        d_x = d3 * scale
    else:
        d_x = scale * (d3 - (d_beta / n)[None, :, None] - xh3 * (d_gamma / n)[None, :, None])
    return LayerGrads(d_x.reshape(d_out.shape).astype(d_out.dtype, copy=False), d_gamma, d_beta)


# --------------------------------------------------------------------------
# elementwise / dense
# --------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    if x.shape != d_out.shape:
        raise ShapeError(f"relu input {x.shape} vs d_output {d_out.shape}")
    return d_out * (x > 0)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear shapes incompatible: x {x.shape}, w {w.shape}, b {b.shape}")
    return x @ w + b


def linear_backward(x: np.ndarray, w: np.ndarray, d_out: np.ndarray) -> LayerGrads:
    if d_out.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(f"d_output {d_out.shape} != ({x.shape[0]}, {w.shape[1]})")
    return LayerGrads(d_out @ w.T, x.T @ d_out, d_out.sum(axis=0))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise LabelError(f"class labels must be integers in [0, {logits.shape[1]})")
    B = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_sum = np.log(np.exp(z).sum(axis=1))
    log_p = z[np.arange(B), labels] - log_sum
    loss = float(-log_p.mean())
    d = softmax(logits)
    d[np.arange(B), labels] -= 1
    return loss, (d / B).astype(logits.dtype, copy=False)


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff.astype(np.float64) ** 2)), (2.0 * diff / diff.size).astype(pred.dtype, copy=False)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    fn: Callable[..., float],
    inputs: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    skip: Mapping[str, np.ndarray] | None = None,
) -> float:
    """Max relative error between ``analytic`` gradients and central differences.

    ``fn(**inputs)`` must return a scalar. Inputs are promoted to float64 and
    perturbed one element at a time. ``skip`` maps input names to boolean masks
    of elements excluded from the comparison (non-differentiable points).
    """
    values = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    worst = 0.0
    for name, grad in analytic.items():
        x = values[name]
        if grad.shape != x.shape:
            raise ShapeError(f"gradient for {name!r} has shape {grad.shape}, input {x.shape}")
        mask = None if skip is None or name not in skip else np.asarray(skip[name], bool)
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            if mask is not None and mask.reshape(-1)[i]:
                continue
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = fn(**values)
            flat[i] = orig - epsilon
            f_minus = fn(**values)
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2 * epsilon)
        err = relative_error(np.asarray(grad, np.float64), numeric)
        if mask is not None:
            err = np.where(mask, 0.0, err)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
