"""Brute-force reference implementations, deliberately loop-based and
independent of the vectorized code paths under test."""
import itertools

import numpy as np


def conv2d_loops(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, oh, ow))
    for n in range(B):
        for o in range(O):
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0 if b is None else b[o]
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                r, s = y * stride + i - pad, xx * stride + j - pad
                                if 0 <= r < H and 0 <= s < W:
                                    acc += x[n, c, r, s] * w[o, c, i, j]
                    out[n, o, y, xx] = acc
    return out


def conv3d_loops(x, w, b, stride, pad):
    """``stride`` and ``pad`` are 3-tuples; pad is symmetric per axis."""
    B, C, T, H, W = x.shape
    O, _, kt, kh, kw = w.shape
    dims = (T, H, W)
    ks = (kt, kh, kw)
    out_dims = [(n + 2 * p - k) // s + 1 for n, p, k, s in zip(dims, pad, ks, stride)]
    out = np.zeros((B, O, *out_dims))
    for n, o in itertools.product(range(B), range(O)):
        for pos in itertools.product(*(range(d) for d in out_dims)):
            acc = 0.0 if b is None else b[o]
            for c in range(C):
                for off in itertools.product(*(range(k) for k in ks)):
                    src = [p_ * s + k_ - pd for p_, s, k_, pd in zip(pos, stride, off, pad)]
                    if all(0 <= v < d for v, d in zip(src, dims)):
                        acc += x[(n, c, *src)] * w[(o, c, *off)]
            out[(n, o, *pos)] = acc
    return out


def maxpool2d_loops(x, k, stride, pad):
    B, C, H, W = x.shape
    oh = (H + 2 * pad - k) // stride + 1
    ow = (W + 2 * pad - k) // stride + 1
    out = np.full((B, C, oh, ow), -np.inf)
    for n, c, y, xx in itertools.product(range(B), range(C), range(oh), range(ow)):
        for i, j in itertools.product(range(k), range(k)):
            r, s = y * stride + i - pad, xx * stride + j - pad
            if 0 <= r < H and 0 <= s < W:
                out[n, c, y, xx] = max(out[n, c, y, xx], x[n, c, r, s])
    return out
