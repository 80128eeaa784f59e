"""Hot numeric kernels with a compiled core and a numpy fallback.

The compiled extension (``_ckernels``) is used when it imports; otherwise,
or when ``TRAINACCEL_PURE_PYTHON=1`` is set, the numpy implementations in
``_pykernels`` take over. Both expose the same functions:

``round_half``      snap float32 values onto the binary16 grid
``to_half_bits``    float32 -> raw binary16 bit patterns
``from_half_bits``  raw binary16 bit patterns -> float32
``matmul``          2-D product accumulated in float32
``im2col``/``col2im`` patch extraction and its adjoint

float64 arrays (gradient checking) always route to numpy.
"""

import contextlib
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if os.environ.get("TRAINACCEL_PURE_PYTHON", "") not in ("", "0") or _ckernels is None:
    _active = _pykernels
else:
    _active = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return _active.BACKEND


def get_backend(name):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {available_backends()}") from None


def set_backend(name):
    global _active
    _active = get_backend(name)


@contextlib.contextmanager
def use_backend(name):
    global _active
    prev = _active
    _active = get_backend(name)
    try:
        yield _active
    finally:
        _active = prev


def _is_f64(*arrays):
    return any(np.asarray(a).dtype == np.float64 for a in arrays)


def round_half(x):
    return _active.round_half(x)


def to_half_bits(x):
    return _active.to_half_bits(x)


def from_half_bits(bits):
    return _active.from_half_bits(bits)


def matmul(a, b):
    if _is_f64(a, b):
        return _pykernels.matmul(a, b)
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _active.matmul(a, b)


def im2col(x, k, stride=1, pad=0):
    if _is_f64(x):
        return _pykernels.im2col(x, k, stride, pad)
    return _active.im2col(x, k, stride, pad)


def col2im(cols, shape, k, stride=1, pad=0):
    if _is_f64(cols):
        return _pykernels.col2im(cols, tuple(shape), k, stride, pad)
    return _active.col2im(cols, tuple(shape), k, stride, pad)
