"""Property checks behind ``trainaccel verify``.

Each check returns a :class:`CheckResult`; none of them touch the
filesystem and all finish in a few seconds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .amp import LossScaler, unscale_and_check, update_loss_scale
from .autograd import Batch, backward, finite_diff_check, forward, tiny_cnn, tiny_mlp
from .datapipe import make_synthetic
from .optim import Accumulator, OptimizerConfig, Optimizer, accumulate, finalize_accumulation
from .tensor import Rng


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3g} (limit {self.threshold:g}, {self.seconds:.2f}s)"


def max_relative_error(a: dict, b: dict) -> float:
    """Max over parameters of ||a - b||_inf / ||b||_inf."""
    worst = 0.0
    for k in b:
        denom = max(float(np.max(np.abs(b[k]))), 1e-12)
        worst = max(worst, float(np.max(np.abs(a[k].astype(np.float64) - b[k]))) / denom)
    return worst


def train_sgd_steps(batches, ga_steps, lr=0.05, seed=0, hidden=(16,), num_classes=3):
    """Plain SGD over ``batches`` (micro-batches), one update per ``ga_steps``."""
    dims = batches[0].inputs.shape[1:]
    graph = tiny_mlp(dims, hidden, num_classes, Rng(seed))
    opt = Optimizer(graph.parameters, OptimizerConfig(learning_rate=lr))
    acc = Accumulator(ga_steps)
    for b in batches:
        _, cache = forward(graph, b)
        accumulate(acc, backward(graph, cache))
        if acc.ready:
            opt.step(finalize_accumulation(acc))
    return graph.state()


def ga_equivalence(micro=8, ga_steps=4, steps=10, seed=0) -> float:
    data = make_synthetic(3, 12, micro * ga_steps * steps, seed)
    big = [Batch(data.inputs[i:i + micro * ga_steps], data.labels[i:i + micro * ga_steps])
           for i in range(0, len(data), micro * ga_steps)]
    small = [Batch(data.inputs[i:i + micro], data.labels[i:i + micro])
             for i in range(0, len(data), micro)]
    return max_relative_error(train_sgd_steps(small, ga_steps, seed=seed),
                              train_sgd_steps(big, 1, seed=seed))


def gradient_checks(eps=1e-4, seed=0) -> dict[str, float]:
    rng = Rng(seed, stream=99)
    out = {}
    mlp = tiny_mlp(4, (8,), 3, rng.child(0))
    x = rng.normal((6, 4)).astype(np.float32)
    out["linear+relu"] = finite_diff_check(mlp, Batch(x, np.arange(6) % 3), eps)
    cnn = tiny_cnn((2, 6, 6), (3,), 3, rng.child(1))
    xi = rng.normal((4, 2, 6, 6)).astype(np.float32)
    out["conv2d+flatten"] = finite_diff_check(cnn, Batch(xi, np.arange(4) % 3), eps)
    return out


def overflow_skip() -> bool:
    """An inf gradient must skip the step, halve the scale and leave params alone."""
    graph = tiny_mlp(3, (4,), 2, Rng(1))
    opt = Optimizer(graph.parameters, OptimizerConfig(learning_rate=0.1))
    scaler = LossScaler(base_scale=65536.0)
    x = Rng(2).normal((4, 3)).astype(np.float32)
    _, cache = forward(graph, Batch(x, [0, 1, 0, 1]))
    grads = backward(graph, cache, scale=scaler.scale)
    first = next(iter(grads))
    grads[first] = grads[first].copy()
    grads[first].flat[0] = np.inf
    before = graph.state()
    grads, overflow = unscale_and_check(grads, scaler)
    if not overflow:
        opt.step(grads)
    update_loss_scale(scaler, 1.0, 1.0, overflow)
    after = graph.state()
    same = all(np.array_equal(before[k], after[k]) for k in before)
    return overflow and same and scaler.scale == 32768.0 and opt.t == 0


def run_all() -> list[CheckResult]:
    results = []
    t0 = time.perf_counter()
    for m in (1, 2, 4, 8):
        err = ga_equivalence(micro=8 if m > 1 else 32, ga_steps=m)
        results.append(CheckResult(f"ga-equivalence M={m}", err <= 1e-5, err, 1e-5, time.perf_counter() - t0))
        t0 = time.perf_counter()
    for name, err in gradient_checks().items():
        results.append(CheckResult(f"finite-difference {name}", err < 1e-3, err, 1e-3, time.perf_counter() - t0))
        t0 = time.perf_counter()
    scaler = LossScaler(base_scale=1024.0, beta=1.0, growth_interval=1)
    update_loss_scale(scaler, 2.0, 1.0, overflow=False)
    results.append(CheckResult("loss-scale formula (expect 2048)", scaler.scale == 2048.0,
                               scaler.scale, 2048.0, time.perf_counter() - t0))
    t0 = time.perf_counter()
    ok = overflow_skip()
    results.append(CheckResult("overflow skips step and halves scale", ok, float(ok), 1.0,
                               time.perf_counter() - t0))
    return results
