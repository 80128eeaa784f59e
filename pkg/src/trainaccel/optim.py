"""SGD / Adam / AdamW, global-norm clipping and gradient accumulation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


class OptimizerKind(enum.Enum):
    SGD = "sgd"
    ADAM = "adam"
    ADAMW = "adamw"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: OptimizerKind = OptimizerKind.SGD
    learning_rate: float = 0.1
    weight_decay: float = 0.0
    clip_norm: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    momentum: float = 0.0

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", OptimizerKind(self.kind.lower()))
        if not self.learning_rate > 0:
            raise ContractViolation("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ContractViolation("weight_decay must be non-negative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ContractViolation("clip_norm must be positive or None")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps_adam > 0):
            raise ContractViolation("need 0 < beta1, beta2 < 1 and eps_adam > 0")
        if not 0 <= self.momentum < 1:
            raise ContractViolation("momentum must lie in [0, 1)")


class Accumulator:
    """Running gradient sum over ``accum_steps`` micro-batches.

    The buffer is float64 so the order in which micro-batches arrive only
    matters at the final rounding back to float32.
    """

    def __init__(self, accum_steps: int, shapes: dict | None = None):
        if accum_steps < 1:
            raise ContractViolation("accum_steps must be >= 1")
        self.accum_steps = accum_steps
        self.filled = 0
        self.buffer = {k: np.zeros(s) for k, s in (shapes or {}).items()}

    def reset(self):
        for b in self.buffer.values():
            b.fill(0.0)
        self.filled = 0

    @property
    def ready(self) -> bool:
        return self.filled == self.accum_steps


def accumulate(acc: Accumulator, micro_grads: dict) -> Accumulator:
    if acc.filled >= acc.accum_steps:
        raise ContractViolation(f"accumulator already holds {acc.accum_steps} micro-batches")
    if acc.buffer and set(micro_grads) != set(acc.buffer):
        raise ContractViolation("gradient keys do not match the accumulator buffer")
    for k, g in micro_grads.items():
        buf = acc.buffer.get(k)
        if buf is None:
            acc.buffer[k] = np.asarray(g, dtype=np.float64).copy()
        elif buf.shape != np.shape(g):
            raise ContractViolation(f"{k}: gradient shape {np.shape(g)} != buffer {buf.shape}")
        else:
            buf += g
    acc.filled += 1
    return acc


def finalize_accumulation(acc: Accumulator) -> dict:
    """Mean of the stored gradients; clears the accumulator."""
    if acc.filled != acc.accum_steps:
        raise ContractViolation(f"finalize after {acc.filled} of {acc.accum_steps} micro-batches")
    out = {k: (b / acc.accum_steps).astype(np.float32) for k, b in acc.buffer.items()}
    acc.reset()
    return out


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Rescale so the global L2 norm is at most ``max_norm``.

    Returns the clipped gradients and the pre-clip norm. The factor is
    nudged down until the float32 result really is within the bound, which
    makes clipping idempotent.
    """
    total = global_norm(grads)
    if not total > max_norm:
        return grads, total
    factor = max_norm / total
    for _ in range(64):
        out = {k: (np.asarray(g, dtype=np.float64) * factor).astype(np.float32) for k, g in grads.items()}
        if global_norm(out) <= max_norm:
            break
        factor = np.nextafter(factor, 0.0) * (1 - 1e-9)
    return out, total


def init_state(params, cfg: OptimizerConfig) -> dict:
    state = {}
    for p in params:
        if cfg.kind is OptimizerKind.SGD:
            if cfg.momentum > 0:
                state[p.id] = {"momentum": np.zeros(p.master.shape)}
        else:
            state[p.id] = {"m": np.zeros(p.master.shape), "v": np.zeros(p.master.shape)}
    return state


def step(params, grads: dict, cfg: OptimizerConfig, state: dict, t: int):
    """Apply one update in place on each Parameter's master copy.

    SGD:   theta -= lr * (g + wd * theta)
    Adam:  coupled decay, g <- g + wd * theta, then the bias-corrected update
    AdamW: decoupled decay, theta -= lr * wd * theta, then the Adam update on g
    """
    adam_family = cfg.kind is not OptimizerKind.SGD
    if adam_family and t < 1:
        raise ContractViolation("Adam-family steps are 1-based (bias correction)")
    lr, wd = cfg.learning_rate, cfg.weight_decay
    for p in params:
        if p.id not in grads:
            continue
        theta = p.master.astype(np.float64)
        g = np.asarray(grads[p.id], dtype=np.float64)
        if g.shape != theta.shape:
            raise ContractViolation(f"{p.id}: gradient shape {g.shape} != {theta.shape}")
        if cfg.kind is OptimizerKind.SGD:
            if wd:
                g = g + wd * theta
            if cfg.momentum > 0:
                s = state.get(p.id)
                if s is None:
                    raise ContractViolation(f"missing momentum state for {p.id}")
                s["momentum"] = cfg.momentum * s["momentum"] + g
                g = s["momentum"]
            theta = theta - lr * g
        else:
            s = state.get(p.id)
            if s is None:
                raise ContractViolation(f"missing moment state for {p.id}")
            if cfg.kind is OptimizerKind.ADAM and wd:
                g = g + wd * theta
            elif cfg.kind is OptimizerKind.ADAMW and wd:
                theta = theta - lr * wd * theta
            s["m"] = cfg.beta1 * s["m"] + (1 - cfg.beta1) * g
            s["v"] = cfg.beta2 * s["v"] + (1 - cfg.beta2) * g * g
            m_hat = s["m"] / (1 - cfg.beta1 ** t)
            v_hat = s["v"] / (1 - cfg.beta2 ** t)
            theta = theta - lr * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)
        p.assign(theta)
        p.grad = np.asarray(grads[p.id], dtype=np.float32)
    return params, state


class Optimizer:
    """Holds config, moment state and the step counter for a parameter list."""

    def __init__(self, params, cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = init_state(self.params, cfg)
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        step(self.params, grads, self.cfg, self.state, self.t)
