import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trainaccel import kernels
from trainaccel.kernels import _pykernels


def half_oracle(v):
    """Python's struct 'e' codec: an independent IEEE binary16 converter (RNE)."""
    try:
        return struct.unpack("<e", struct.pack("<e", float(v)))[0]
    except OverflowError:
        return float("inf") if v > 0 else float("-inf")


def half_bits_oracle(v):
    try:
        return struct.unpack("<H", struct.pack("<e", float(v)))[0]
    except OverflowError:
        return 0x7C00 if v > 0 else 0xFC00


def test_backend_listing():
    assert "python" in kernels.available_backends()
    assert kernels.backend_name() in kernels.available_backends()
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_use_backend_restores():
    before = kernels.backend_name()
    with kernels.use_backend("python"):
        assert kernels.backend_name() == "python"
    assert kernels.backend_name() == before


@pytest.mark.parametrize("value,expected", [
    (1.0, 1.0), (2.0, 2.0), (0.1, 0.0999755859375), (65504.0, 65504.0),
    (65519.99, 65504.0), (65520.0, np.inf), (-65520.0, -np.inf), (1e-8, 0.0),
    (2.0 ** -24, 2.0 ** -24), (2.0 ** -25, 0.0), (3 * 2.0 ** -25, 2.0 ** -23),
    (1 + 2.0 ** -11, 1.0), (1 + 3 * 2.0 ** -11, 1 + 2 * 2.0 ** -10),
])
def test_round_half_table(backend, value, expected):
    out = kernels.round_half(np.array([value], dtype=np.float32))
    assert out.dtype == np.float32
    assert out[0] == expected
    assert out[0] == half_oracle(np.float32(value))


def test_round_half_special_values(backend):
    x = np.array([np.nan, np.inf, -np.inf, -0.0], dtype=np.float32)
    out = kernels.round_half(x)
    assert np.isnan(out[0]) and out[1] == np.inf and out[2] == -np.inf
    assert out[3] == 0 and np.signbit(out[3])


def test_round_half_matches_struct_on_random_bits(backend):
    bits = np.random.default_rng(7).integers(0, 2 ** 32, 20000, dtype=np.uint64).astype(np.uint32)
    x = bits.view(np.float32)
    x = x[np.isfinite(x)]
    out = kernels.round_half(x)
    want = np.array([half_oracle(v) for v in x], dtype=np.float32)
    assert np.array_equal(out, want)


def test_half_bits_round_trip_all_patterns(backend):
    bits = np.arange(65536, dtype=np.uint16)
    vals = kernels.from_half_bits(bits)
    ref = bits.view(np.float16).astype(np.float32)
    finite = np.isfinite(ref)
    assert np.array_equal(vals[finite], ref[finite])
    assert np.array_equal(np.isnan(vals), np.isnan(ref))
    back = kernels.to_half_bits(vals[finite])
    assert np.array_equal(back, bits[finite])


@given(st.lists(st.floats(width=32, allow_nan=False), min_size=1, max_size=50))
@settings(max_examples=200, deadline=None)
def test_round_half_property(values):
    x = np.array(values, dtype=np.float32)
    for name in kernels.available_backends():
        with kernels.use_backend(name):
            once = kernels.round_half(x)
            assert np.array_equal(kernels.round_half(once), once)
            assert [half_bits_oracle(v) for v in x] == kernels.to_half_bits(x).tolist()


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def test_matmul_identity(backend):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert np.array_equal(kernels.matmul(np.eye(2, dtype=np.float32), a), a)


def test_matmul_triple_loop_oracle(backend, rng):
    a = rng.standard_normal((3, 4)).astype(np.float32)
    b = rng.standard_normal((4, 2)).astype(np.float32)
    out = kernels.matmul(a, b)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, naive_matmul(a, b), rtol=1e-6, atol=1e-6)


def test_matmul_shape_mismatch(backend):
    with pytest.raises(ValueError):
        kernels.matmul(np.ones((2, 3), np.float32), np.ones((2, 3), np.float32))


def test_matmul_nan_propagates(backend):
    a = np.array([[0.0, np.nan]], dtype=np.float32)
    b = np.array([[1.0], [0.0]], dtype=np.float32)
    assert np.isnan(kernels.matmul(a, b)[0, 0])


def test_matmul_deterministic(backend, rng):
    a = rng.standard_normal((40, 70)).astype(np.float32)
    b = rng.standard_normal((70, 30)).astype(np.float32)
    assert np.array_equal(kernels.matmul(a, b), kernels.matmul(a, b))


def test_matmul_float64_routes_to_numpy(backend, rng):
    a = rng.standard_normal((5, 3))
    b = rng.standard_normal((3, 4))
    out = kernels.matmul(a, b)
    assert out.dtype == np.float64
    np.testing.assert_allclose(out, a @ b, rtol=1e-14)


def im2col_oracle(x, k, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    rows = []
    for i in range(n):
        for r in range(oh):
            for q in range(ow):
                rows.append(xp[i, :, r * stride:r * stride + k, q * stride:q * stride + k].reshape(-1))
    return np.array(rows)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_im2col_matches_loop_oracle(backend, rng, stride, pad):
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    cols = kernels.im2col(x, 3, stride, pad)
    np.testing.assert_array_equal(cols, im2col_oracle(x, 3, stride, pad).astype(np.float32))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
def test_col2im_is_adjoint(backend, rng, stride, pad):
    shape = (2, 3, 6, 6)
    x = rng.standard_normal(shape).astype(np.float32)
    cols = kernels.im2col(x, 3, stride, pad)
    y = rng.standard_normal(cols.shape).astype(np.float32)
    back = kernels.col2im(y, shape, 3, stride, pad)
    # <im2col(x), y> == <x, col2im(y)>
    lhs = float(np.sum(cols.astype(np.float64) * y))
    rhs = float(np.sum(x.astype(np.float64) * back))
    assert lhs == pytest.approx(rhs, rel=1e-5)


def test_backends_agree(rng):
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled backend not built")
    c = kernels.get_backend("cython")
    x = rng.standard_normal((2, 4, 7, 7)).astype(np.float32)
    a = rng.standard_normal((9, 13)).astype(np.float32)
    b = rng.standard_normal((13, 5)).astype(np.float32)
    np.testing.assert_allclose(c.matmul(a, b), _pykernels.matmul(a, b), rtol=1e-5, atol=1e-6)
    np.testing.assert_array_equal(c.im2col(x, 3, 2, 1), _pykernels.im2col(x, 3, 2, 1))
    cols = _pykernels.im2col(x, 3, 1, 1)
    np.testing.assert_allclose(c.col2im(cols, x.shape, 3, 1, 1), _pykernels.col2im(cols, x.shape, 3, 1, 1),
                               rtol=1e-6)
    big = (rng.standard_normal(5000) * 1e4).astype(np.float32)
    np.testing.assert_array_equal(c.round_half(big), _pykernels.round_half(big))


def test_fixed_order_matmul_matches_loop_oracle(rng):
    if "cython" not in kernels.available_backends():
        pytest.skip("compiled backend not built")
    fixed = kernels.get_backend("cython").matmul_fixed_order
    a = rng.standard_normal((5, 7)).astype(np.float32)
    b = rng.standard_normal((7, 3)).astype(np.float32)
    np.testing.assert_allclose(fixed(a, b), naive_matmul(a, b), rtol=1e-6, atol=1e-6)
    assert np.array_equal(fixed(a, b), fixed(a.copy(), b.copy()))
    with pytest.raises(ValueError):
        fixed(a, a)


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("TRAINACCEL_SLOW"), reason="set TRAINACCEL_SLOW=1 for the 2^32 sweep")
def test_every_float32_pattern_against_numpy_cast():
    step = 1 << 24
    for start in range(0, 1 << 32, step):
        x = np.arange(start, start + step, dtype=np.uint64).astype(np.uint32).view(np.float32)
        with np.errstate(over="ignore", invalid="ignore"):
            want = x.astype(np.float16).view(np.uint16)
        for be in kernels.available_backends():
            got = kernels.get_backend(be).to_half_bits(x)
            nan = np.isnan(x)
            assert np.array_equal(got[~nan], want[~nan]), (be, start)
            assert np.all((got[nan] & 0x7C00) == 0x7C00) and np.all(got[nan] & 0x3FF), (be, start)
