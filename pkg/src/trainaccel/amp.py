"""Mixed-precision orchestration: op election, loss scaling, speed metrics."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .tensor import Precision

DEFAULT_HALF_OPS = frozenset({"matmul", "conv"})
DEFAULT_SINGLE_OPS = frozenset({"softmax", "loss", "reduction", "normalization", "update"})


class PrecisionMode(enum.Enum):
    FULL_SINGLE = "full_single"
    MIXED = "mixed"


@dataclass(frozen=True)
class PrecisionPolicy:
    mode: PrecisionMode = PrecisionMode.FULL_SINGLE
    half_ops: frozenset = DEFAULT_HALF_OPS
    single_ops: frozenset = DEFAULT_SINGLE_OPS

    def __post_init__(self):
        object.__setattr__(self, "half_ops", frozenset(self.half_ops))
        object.__setattr__(self, "single_ops", frozenset(self.single_ops))
        overlap = self.half_ops & self.single_ops
        if overlap:
            raise ContractViolation(f"ops elected to both precisions: {sorted(overlap)}")

    @classmethod
    def mixed(cls, half_ops=DEFAULT_HALF_OPS) -> "PrecisionPolicy":
        return cls(PrecisionMode.MIXED, frozenset(half_ops))

    def elects_half(self, kind: str) -> bool:
        return self.mode is PrecisionMode.MIXED and kind in self.half_ops


FULL_SINGLE = PrecisionPolicy()


def autocast_dtype(policy: PrecisionPolicy, kind: str) -> Precision:
    return Precision.HALF if policy.elects_half(kind) else Precision.SINGLE


@dataclass
class LossScaler:
    """Dynamic loss scale.

    Two mechanisms move the scale. On overflow it is halved (and snapped
    down to a power of two). Every ``growth_interval`` consecutive clean
    steps it is reset from the loss-ratio rule
    ``base_scale * (old_loss / new_loss) ** beta``, with the ratio clamped
    to ``ratio_bounds``; when ``use_formula`` is off the scale doubles
    instead.
    """

    base_scale: float = 2.0 ** 16
    beta: float = 1.0
    growth_interval: int = 200
    min_scale: float = 1.0
    max_scale: float = 2.0 ** 24
    use_formula: bool = True
    ratio_bounds: tuple[float, float] = (0.5, 2.0)
    scale: float | None = None
    steps_since_overflow: int = 0
    overflow_count: int = 0
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not (0 < self.min_scale <= self.max_scale):
            raise ContractViolation("need 0 < min_scale <= max_scale")
        if self.base_scale <= 0 or self.beta <= 0 or self.growth_interval < 1:
            raise ContractViolation("base_scale, beta must be positive and growth_interval >= 1")
        if self.scale is None:
            self.scale = self.base_scale
        self.scale = float(min(max(self.scale, self.min_scale), self.max_scale))

    def growth_due(self) -> bool:
        """True when the next clean update will apply the growth rule."""
        return (self.steps_since_overflow + 1) % self.growth_interval == 0


def scale_loss(loss: float, scaler: LossScaler) -> float:
    return loss * scaler.scale


def grads_finite(grads: dict) -> bool:
    return all(bool(np.all(np.isfinite(g))) for g in grads.values())


def unscale_and_check(grads: dict, scaler: LossScaler) -> tuple[dict, bool]:
    """Divide gradients by the current scale unless any element is inf/NaN.

    On overflow the gradients come back untouched and the caller must skip
    the optimizer step.
    """
    if not grads_finite(grads):
        return grads, True
    s = scaler.scale
    out = {k: (g.astype(np.float64) / s).astype(np.float32) for k, g in grads.items()}
    return out, False


def _pow2_floor(x: float) -> float:
    m, e = math.frexp(x)
    return math.ldexp(1.0, e - 1)


def update_loss_scale(scaler: LossScaler, old_loss: float, new_loss: float,
                      overflow: bool) -> LossScaler:
    if overflow:
        scaler.scale = max(_pow2_floor(scaler.scale / 2.0), scaler.min_scale)
        scaler.scale = min(scaler.scale, scaler.max_scale)
        scaler.steps_since_overflow = 0
        scaler.overflow_count += 1
        scaler.history.append(("backoff", scaler.scale))
        return scaler
    if not (old_loss > 0 and new_loss > 0) or not (math.isfinite(old_loss) and math.isfinite(new_loss)):
        raise ContractViolation(f"losses must be positive and finite, got old={old_loss}, new={new_loss}")
    scaler.steps_since_overflow += 1
    if scaler.steps_since_overflow % scaler.growth_interval == 0:
        if scaler.use_formula:
            lo, hi = scaler.ratio_bounds
            ratio = min(max(old_loss / new_loss, lo), hi)
            proposed = scaler.base_scale * ratio ** scaler.beta
        else:
            proposed = scaler.scale * 2.0
        scaler.scale = float(min(max(proposed, scaler.min_scale), scaler.max_scale))
        scaler.history.append(("growth", scaler.scale))
    return scaler


@dataclass(frozen=True)
class TimingRecord:
    label: str
    wall_time: float
    op_count: int = 0

    def __post_init__(self):
        if self.op_count < 0:
            raise ContractViolation("op_count must be non-negative")
        if self.op_count > 0 and not self.wall_time > 0:
            raise ContractViolation("wall_time must be positive when ops were counted")


def compute_speedup(t_single: TimingRecord, t_mixed: TimingRecord) -> float:
    """Ratio of baseline wall time to accelerated wall time."""
    if not (t_single.wall_time > 0 and t_mixed.wall_time > 0):
        raise ContractViolation("speedup needs positive wall times")
    return t_single.wall_time / t_mixed.wall_time


def compute_throughput(n_ops: int, t: float) -> float:
    if not t > 0:
        raise ContractViolation(f"execution time must be positive, got {t}")
    return n_ops / t
