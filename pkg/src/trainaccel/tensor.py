"""Immutable tensors with a precision tag, binary16 emulation and a seeded RNG.

Half precision is emulated: values live in float32 storage but are snapped
onto the binary16 grid by every kernel whose result is elected to half.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractViolation


class Precision(enum.Enum):
    SINGLE = "single"
    HALF = "half"


@dataclass(frozen=True)
class Tensor:
    data: np.ndarray
    precision: Precision = Precision.SINGLE

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d <= 0 for d in arr.shape):
            raise ContractViolation(f"tensor dimensions must be positive, got {arr.shape}")
        if self.precision is Precision.HALF:
            snapped = kernels.round_half(arr)
            same = (snapped == arr) | (np.isnan(snapped) & np.isnan(arr))
            if not np.all(same):
                raise ContractViolation("half tensor holds values off the binary16 grid")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def has_overflow(self) -> bool:
        return not bool(np.all(np.isfinite(self.data)))


def cast_to_half(x: Tensor) -> Tensor:
    """Round every element to the nearest binary16 value, ties to even.

    Magnitudes from 65520 upward become signed infinity; binary16
    subnormals are kept.
    """
    return Tensor(kernels.round_half(x.data), Precision.HALF)


def quantization_error(x: Tensor, q: Tensor) -> float:
    """Mean absolute difference between a tensor and its quantized form."""
    if x.shape != q.shape:
        raise ContractViolation(f"shape mismatch: {x.shape} vs {q.shape}")
    diff = np.abs(x.data.astype(np.float64) - q.data.astype(np.float64))
    return float(diff.sum() / diff.size)


KERNEL_KINDS = ("add", "mul", "matmul", "relu", "exp", "log")


def apply_kernel(kind: str, a: Tensor, b: Tensor | None = None,
                 precision: Precision = Precision.SINGLE) -> Tensor:
    """Run one primitive and tag the result with the elected precision.

    Inputs elected to half are snapped before the kernel runs; matmul
    always accumulates in float32 and only its result is snapped.
    """
    if kind not in KERNEL_KINDS:
        raise ContractViolation(f"unknown kernel kind {kind!r}")
    binary = kind in ("add", "mul", "matmul")
    if binary and b is None:
        raise ContractViolation(f"{kind} needs two operands")
    half = precision is Precision.HALF
    x = kernels.round_half(a.data) if half else a.data
    y = None
    if binary:
        y = kernels.round_half(b.data) if half else b.data

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if kind == "add" or kind == "mul":
            if x.shape != y.shape:
                raise ContractViolation(f"{kind} shape mismatch: {x.shape} vs {y.shape}")
            out = x + y if kind == "add" else x * y
        elif kind == "matmul":
            if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
                raise ContractViolation(f"matmul shape mismatch: {x.shape} @ {y.shape}")
            out = kernels.matmul(x, y)
        elif kind == "relu":
            out = np.maximum(x, np.float32(0))
        elif kind == "exp":
            out = np.exp(x)
        else:
            out = np.log(x)
    out = np.asarray(out, dtype=np.float32)
    if half:
        out = kernels.round_half(out)
    return Tensor(out, precision)


_MASK64 = (1 << 64) - 1


@dataclass
class Rng:
    """Counter-based generator (Philox) keyed by ``(seed, stream)``.

    ``counter`` advances the Philox block counter, so the same
    ``(seed, stream, counter)`` triple always yields the same bits.
    """

    seed: int
    counter: int = 0
    stream: int = 0
    _gen: np.random.Generator | None = field(default=None, init=False, repr=False, compare=False)

    def generator(self) -> np.random.Generator:
        if self._gen is None:
            key = ((self.stream & _MASK64) << 64) | (self.seed & _MASK64)
            bitgen = np.random.Philox(key=key, counter=self.counter)
            self._gen = np.random.Generator(bitgen)
        return self._gen

    def child(self, stream: int) -> "Rng":
        """Independent stream derived from the same seed."""
        return Rng(self.seed, 0, (self.stream * 1_000_003 + stream + 1) & _MASK64)

    def uniform(self, low, high, size) -> np.ndarray:
        return self.generator().uniform(low, high, size)

    def normal(self, size, loc=0.0, scale=1.0) -> np.ndarray:
        return self.generator().normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

    def integers(self, low, high, size=None) -> np.ndarray:
        return self.generator().integers(low, high, size)

    def bits(self, n: int) -> np.ndarray:
        """Raw 64-bit words, the platform-stable part of the stream."""
        return self.generator().bit_generator.random_raw(n)
