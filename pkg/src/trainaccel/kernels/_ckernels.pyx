# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: binary16 snapping, im2col/col2im and a fixed-order matmul.

Every loop runs in a fixed order on a single thread. ``matmul`` itself goes
to BLAS; ``matmul_fixed_order`` is the BLAS-independent alternative.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint16_t, uint32_t
from libc.string cimport memcpy

cnp.import_array()

BACKEND = "cython"


cdef inline uint16_t _f32_to_half_bits(float f) noexcept nogil:
    cdef uint32_t u
    memcpy(&u, &f, 4)
    cdef uint32_t sign = (u >> 16) & 0x8000
    cdef uint32_t a = u & 0x7FFFFFFF
    cdef uint32_t e, m, s, rem, halfway, h
    if a >= 0x7F800000:
        if a > 0x7F800000:
            return <uint16_t>(sign | 0x7E00)
        return <uint16_t>(sign | 0x7C00)
    if a >= 0x47800000:
        # >= 65536 always overflows
        return <uint16_t>(sign | 0x7C00)
    if a >= 0x38800000:
        # normal range; carry out of the mantissa bumps the exponent,
        # and 65520 and above carry into the infinity encoding
        a = a + 0x0FFF + ((a >> 13) & 1)
        return <uint16_t>(sign | ((a >> 13) - (112 << 10)))
    e = a >> 23
    if e < 102:
        return <uint16_t>sign
    m = (a & 0x7FFFFF) | 0x800000
    s = 126 - e
    h = m >> s
    rem = m & ((1u << s) - 1)
    halfway = 1u << (s - 1)
    if rem > halfway or (rem == halfway and (h & 1)):
        h += 1
    return <uint16_t>(sign | h)


cdef inline float _half_bits_to_f32(uint16_t h) noexcept nogil:
    cdef uint32_t sign = (<uint32_t>h & 0x8000) << 16
    cdef uint32_t e = (h >> 10) & 0x1F
    cdef uint32_t m = h & 0x3FF
    cdef uint32_t u
    cdef float out
    if e == 0:
        if m == 0:
            u = sign
        else:
            # renormalise the subnormal
            e = 113
            while (m & 0x400) == 0:
                m <<= 1
                e -= 1
            m &= 0x3FF
            u = sign | (e << 23) | (m << 13)
    elif e == 31:
        u = sign | 0x7F800000 | (m << 13)
    else:
        u = sign | ((e + 112) << 23) | (m << 13)
    memcpy(&out, &u, 4)
    return out


def round_half(x):
    """Snap a float32 array to the nearest binary16 value (ties to even)."""
    src = np.ascontiguousarray(x, dtype=np.float32).reshape(-1)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] dst = np.empty_like(src)
    cdef Py_ssize_t i, n = src.shape[0]
    cdef const float[::1] s = src
    cdef float[::1] d = dst
    with nogil:
        for i in range(n):
            d[i] = _half_bits_to_f32(_f32_to_half_bits(s[i]))
    return dst.reshape(np.shape(x))


def to_half_bits(x):
    src = np.ascontiguousarray(x, dtype=np.float32).reshape(-1)
    cdef cnp.ndarray[cnp.uint16_t, ndim=1] dst = np.empty(src.shape[0], dtype=np.uint16)
    cdef Py_ssize_t i, n = src.shape[0]
    cdef const float[::1] s = src
    cdef uint16_t[::1] d = dst
    with nogil:
        for i in range(n):
            d[i] = _f32_to_half_bits(s[i])
    return dst.reshape(np.shape(x))


def from_half_bits(bits):
    src = np.ascontiguousarray(bits, dtype=np.uint16).reshape(-1)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] dst = np.empty(src.shape[0], dtype=np.float32)
    cdef Py_ssize_t i, n = src.shape[0]
    cdef const uint16_t[::1] s = src
    cdef float[::1] d = dst
    with nogil:
        for i in range(n):
            d[i] = _half_bits_to_f32(s[i])
    return dst.reshape(np.shape(bits))


def matmul(a, b):
    """(n, k) @ (k, m) in float32 via BLAS sgemm, which beats any loop written here."""
    A = np.asarray(a, dtype=np.float32)
    B = np.asarray(b, dtype=np.float32)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"matmul shape mismatch: {A.shape} @ {B.shape}")
    return np.matmul(A, B)


def matmul_fixed_order(a, b):
    """(n, k) @ (k, m) in float32 with float32 accumulation, i-k-j order.

    Independent of the BLAS build and thread count, at several times the cost.
    """
    cdef const float[:, ::1] A = np.ascontiguousarray(a, dtype=np.float32)
    cdef const float[:, ::1] B = np.ascontiguousarray(b, dtype=np.float32)
    cdef Py_ssize_t n = A.shape[0], kk = A.shape[1], m = B.shape[1]
    if B.shape[0] != kk:
        raise ValueError(f"matmul shape mismatch: ({n}, {kk}) @ ({B.shape[0]}, {m})")
    out = np.zeros((n, m), dtype=np.float32)
    cdef float[:, ::1] C = out
    cdef Py_ssize_t i, j, p
    cdef float aip
    with nogil:
        for i in range(n):
            for p in range(kk):
                aip = A[i, p]
                for j in range(m):
                    C[i, j] += aip * B[p, j]
    return out


def im2col(x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    """(B, C, H, W) -> (B*Ho*Wo, C*k*k), columns ordered (c, ki, kj)."""
    cdef const float[:, :, :, ::1] X = np.ascontiguousarray(x, dtype=np.float32)
    cdef Py_ssize_t nb = X.shape[0], nc = X.shape[1], H = X.shape[2], W = X.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((nb * Ho * Wo, nc * k * k), dtype=np.float32)
    cdef float[:, ::1] O = out
    cdef Py_ssize_t b, c, ki, kj, oi, oj, r, col, yi, xj
    with nogil:
        for b in range(nb):
            for oi in range(Ho):
                for oj in range(Wo):
                    r = (b * Ho + oi) * Wo + oj
                    for c in range(nc):
                        for ki in range(k):
                            yi = oi * stride + ki - pad
                            if yi < 0 or yi >= H:
                                continue
                            for kj in range(k):
                                xj = oj * stride + kj - pad
                                if xj < 0 or xj >= W:
                                    continue
                                col = (c * k + ki) * k + kj
                                O[r, col] = X[b, c, yi, xj]
    return out


def col2im(cols, shape, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    """Adjoint of im2col: scatter-add columns back into a (B, C, H, W) array."""
    cdef const float[:, ::1] Cc = np.ascontiguousarray(cols, dtype=np.float32)
    cdef Py_ssize_t nb = shape[0], nc = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((nb, nc, H, W), dtype=np.float32)
    cdef float[:, :, :, ::1] X = out
    cdef Py_ssize_t b, c, ki, kj, oi, oj, r, col, yi, xj
    with nogil:
        for b in range(nb):
            for oi in range(Ho):
                for oj in range(Wo):
                    r = (b * Ho + oi) * Wo + oj
                    for c in range(nc):
                        for ki in range(k):
                            yi = oi * stride + ki - pad
                            if yi < 0 or yi >= H:
                                continue
                            for kj in range(k):
                                xj = oj * stride + kj - pad
                                if xj < 0 or xj >= W:
                                    continue
                                col = (c * k + ki) * k + kj
                                X[b, c, yi, xj] += Cc[r, col]
    return out
