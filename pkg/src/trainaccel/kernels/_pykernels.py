"""Pure numpy implementations of the kernel set.

Used when the compiled extension is unavailable, and as the float64 path
for gradient checking (the compiled kernels are float32-only).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"


def round_half(x):
    x = np.asarray(x, dtype=np.float32)
    with np.errstate(over="ignore"):
        return x.astype(np.float16).astype(np.float32)


def to_half_bits(x):
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float32).astype(np.float16).view(np.uint16)


def from_half_bits(bits):
    return np.asarray(bits, dtype=np.uint16).view(np.float16).astype(np.float32)


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype, np.float32)
    return np.matmul(a.astype(dtype, copy=False), b.astype(dtype, copy=False))


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    x = np.asarray(x)
    if x.dtype != np.float64:
        x = x.astype(np.float32, copy=False)
    nb, nc, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (B, C, Ho, Wo, k, k) -> (B, Ho, Wo, C, k, k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(nb * ho * wo, nc * k * k)


def col2im(cols, shape, k, stride, pad):
    nb, nc, h, w = shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    cols = np.asarray(cols)
    dtype = np.float64 if cols.dtype == np.float64 else np.float32
    c6 = cols.reshape(nb, ho, wo, nc, k, k).astype(dtype, copy=False)
    out = np.zeros((nb, nc, h + 2 * pad, w + 2 * pad), dtype=dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += c6[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return out[:, :, pad:pad + h, pad:pad + w]
