"""The nine acceptance criteria, each at its stated tolerance and time budget.

Run with pytest (a PASS/FAIL line per criterion is printed in the summary)
or directly: ``python tests/test_acceptance.py``.
"""

import json
import math
import os
import struct
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from trainaccel.amp import LossScaler, unscale_and_check, update_loss_scale
from trainaccel.autograd import (Batch, ComputeGraph, Conv2d, Flatten, Linear, ReLU, SoftmaxCrossEntropy,
                                 backward, finite_diff_check, forward, tiny_cnn, tiny_mlp)
from trainaccel.config import load_config
from trainaccel.datapipe import (TransferModel, make_synthetic, predicted_total, read_cifar_file,
                                 run_pipeline)
from trainaccel.harness import emit_report, fixture_path, parse_grid, resolve_dataset, run_ablation, train
from trainaccel.optim import Accumulator, Optimizer, OptimizerConfig, accumulate, finalize_accumulation
from trainaccel.pinpolicy import PolicyParams, allocate, pin_score, repin, update_memory
from trainaccel.schemas import validate_csv, validate_report
from trainaccel.tensor import Rng, Tensor, cast_to_half, quantization_error

RESULTS = []  # (number, line) collected for the terminal summary


def check(number, title, budget_s, fn):
    t0 = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - t0
    in_time = elapsed < budget_s
    passed = bool(ok) and in_time
    line = (f"[{'PASS' if passed else 'FAIL'}] AC{number} {title}: {detail} "
            f"({elapsed:.2f}s, budget {budget_s:g}s{'' if in_time else ' EXCEEDED'})")
    RESULTS.append((number, line))
    print(line)
    return passed, line


def max_rel(a, b):
    return max(float(np.max(np.abs(a[k].astype(np.float64) - b[k]))) / float(np.max(np.abs(b[k])))
               for k in b)


# -- 1. gradient accumulation equivalence ----------------------------------------

def ac1():
    data = make_synthetic(3, 16, 320, seed=11)

    def run(b, m):
        g = tiny_mlp(16, (32,), 3, Rng(5))
        opt = Optimizer(g.parameters, OptimizerConfig(kind="sgd", learning_rate=0.1))
        acc = Accumulator(m)
        for i in range(10 * m):
            sl = slice(i * b, (i + 1) * b)
            _, cache = forward(g, Batch(data.inputs[sl], data.labels[sl]))
            accumulate(acc, backward(g, cache))
            if acc.ready:
                opt.step(finalize_accumulation(acc))
        assert opt.t == 10
        return g.state()

    err = max_rel(run(8, 4), run(32, 1))
    return err <= 1e-5, f"max parameter relative error {err:.3g} (limit 1e-5)"


# -- 2. finite differences for every layer type ------------------------------------

def ac2():
    rng = Rng(2, stream=3)
    cases = {
        "Linear+ReLU": (tiny_mlp(4, (8,), 3, rng.child(0)), (4,), 6, 3),
        "Linear (no hidden)": (tiny_mlp(6, (), 4, rng.child(1)), (6,), 8, 4),
        "Conv2d stride 2+ReLU+Flatten": (tiny_cnn((2, 6, 6), (3,), 3, rng.child(2)), (2, 6, 6), 4, 3),
        "Conv2d stride 1": (ComputeGraph([Conv2d(1, 2, 3, 1, 1, rng.child(3)), ReLU(), Flatten(),
                                          Linear(2 * 16, 2, rng.child(4)), SoftmaxCrossEntropy()],
                                         (1, 4, 4), 2), (1, 4, 4), 3, 2),
    }
    worst, parts = 0.0, []
    for name, (graph, shape, n, k) in cases.items():
        x = rng.child(9).normal((n,) + shape).astype(np.float32)
        err = finite_diff_check(graph, Batch(x, np.arange(n) % k), eps=1e-4)
        worst = max(worst, err)
        parts.append(f"{name} {err:.1e}")
    return worst < 1e-3, f"worst relative error {worst:.2e} (limit 1e-3); " + ", ".join(parts)


# -- 3. loss-scale dynamics ----------------------------------------------------

def ac3():
    s = LossScaler(base_scale=1024.0, beta=1.0, growth_interval=1)
    formula = update_loss_scale(s, 2.0, 1.0, overflow=False).scale

    g = tiny_mlp(5, (6,), 3, Rng(1))
    opt = Optimizer(g.parameters, OptimizerConfig(learning_rate=0.1))
    scaler = LossScaler(base_scale=65536.0)
    x = Rng(4).normal((6, 5)).astype(np.float32)
    _, cache = forward(g, Batch(x, np.arange(6) % 3))
    grads = backward(g, cache, scale=scaler.scale)
    grads["0.weight"] = grads["0.weight"].copy()
    grads["0.weight"][2, 1] = np.inf
    before = g.state()
    grads, overflow = unscale_and_check(grads, scaler)
    if not overflow:
        opt.step(grads)
    update_loss_scale(scaler, 1.0, 1.0, overflow)
    after = g.state()
    unchanged = all(np.array_equal(before[k], after[k]) for k in before)
    ok = formula == 2048.0 and overflow and opt.t == 0 and unchanged and scaler.scale == 32768.0
    return ok, (f"formula scale {formula:g} (want 2048); overflow detected={overflow}, "
                f"steps taken={opt.t}, params unchanged={unchanged}, scale 65536->{scaler.scale:g}")


# -- 4. AMP accuracy preservation ------------------------------------------------

def ac4():
    cfg = load_config("synthetic-fast")
    off = train(cfg.with_overrides({"amp_enabled": False}))
    on = train(cfg.with_overrides({"amp_enabled": True}))
    diff = abs(on.accuracy - off.accuracy)
    return diff <= 1.0, (f"accuracy off {off.accuracy:.2f}% vs on {on.accuracy:.2f}%, "
                         f"difference {diff:.2f} points (limit 1.0); skipped steps {on.skipped_steps}")


# -- 5. quantization error -----------------------------------------------------

def ac5():
    x = np.random.default_rng(2024).uniform(-1, 1, 100_000).astype(np.float32)
    got = quantization_error(Tensor(x), cast_to_half(Tensor(x)))
    total = 0.0
    for v in x.tolist():
        q = struct.unpack("<e", struct.pack("<e", v))[0]
        total += abs(v - q)
    oracle = total / len(x)
    gap = abs(got - oracle)
    ok = gap <= 1e-12 and got <= 2.0 ** -11
    return ok, f"error {got:.6e}, oracle gap {gap:.1e} (limit 1e-12), bound 2^-11={2.0 ** -11:.3e}"


# -- 6. pipeline overlap -------------------------------------------------------

def _stream(n, rows=32, feat=256):
    r = np.random.default_rng(6)
    return [Batch(r.standard_normal((rows, feat)).astype(np.float32), r.integers(0, 3, rows)) for _ in range(n)]


def _sleep_compute(c):
    def compute(_):
        end = time.perf_counter() + c
        while (left := end - time.perf_counter()) > 0:
            time.sleep(min(left, 1e-3))
    return compute


def ac6():
    batches = _stream(50)
    nbytes = batches[0].inputs.nbytes + batches[0].labels.nbytes
    L = C = 0.01
    tm = TransferModel(fixed_latency=0.0, per_byte_pageable=L / nbytes, per_byte_pinned=L / nbytes / 2)
    t1 = run_pipeline(batches, 1, tm, compute=_sleep_compute(C)).total
    t2 = run_pipeline(batches, 2, tm, compute=_sleep_compute(C)).total
    overlap = t1 / t2

    # transfer-bound: pageable L=20ms, pinned 10ms, compute 2ms
    Lp, Cb = 0.02, 0.002
    tb = TransferModel(fixed_latency=0.0, per_byte_pageable=Lp / nbytes, per_byte_pinned=Lp / nbytes / 2)
    few = batches[:30]
    page = run_pipeline(few, 2, tb, compute=_sleep_compute(Cb), pinned=False).total
    pin = run_pipeline(few, 2, tb, compute=_sleep_compute(Cb), pinned=True).total
    pin_speedup = page / pin
    oracle = predicted_total(30, Lp, Cb, 2) / predicted_total(30, Lp / 2, Cb, 2)
    rel = abs(pin_speedup - oracle) / oracle
    ok = overlap >= 1.6 and pin_speedup >= 1.5 and rel <= 0.2
    return ok, (f"k=2 vs k=1 speedup {overlap:.2f} (need >=1.6, closed form "
                f"{predicted_total(50, L, C, 1) / predicted_total(50, L, C, 2):.2f}); pinned vs pageable "
                f"{pin_speedup:.2f} (need >=1.5, oracle {oracle:.2f}, off by {100 * rel:.1f}% <= 20%)")


# -- 7. pin-policy math --------------------------------------------------------

class _Buf:
    def __init__(self, sig, pinned, hist):
        self.signature, self.pinned, self.pin_history = sig, pinned, hist


def _cos(a, b):
    na = math.sqrt(sum(v * v for v in a))
    nb = math.sqrt(sum(v * v for v in b))
    return 0.0 if na == 0 or nb == 0 else sum(x * y for x, y in zip(a, b)) / (na * nb)


def _score(h, gamma, delta):
    return sum(gamma * h[t] - delta * abs(h[t] - h[t - 1]) for t in range(1, len(h))) / (len(h) - 1)


def ac7():
    r = np.random.default_rng(77)
    bad = 0
    for _ in range(200):
        n, d = int(r.integers(1, 7)), int(r.integers(1, 9))
        p = PolicyParams(alpha=tuple(r.uniform(0, 2, n)), beta_pin=r.uniform(0, 1), gamma=r.uniform(0, 2),
                         delta=r.uniform(0, 2), rho=r.uniform(0, 1), eta=r.uniform(0, 1), xi=r.uniform(0, 1),
                         window=int(r.integers(1, 10)))
        # allocate
        sigs = [r.standard_normal(d).tolist() for _ in range(n)]
        pins = [bool(v) for v in r.integers(0, 2, n)]
        h = r.standard_normal(d).tolist()
        scores = [p.alpha[i] * _cos(h, sigs[i]) - p.beta_pin * pins[i] for i in range(n)]
        want = max(range(n), key=lambda i: (scores[i], -i))
        bad += allocate(h, [_Buf(s, f, []) for s, f in zip(sigs, pins)], p) != want
        # pin_score
        hist = r.integers(0, 2, int(r.integers(2, 20))).tolist()
        bad += abs(pin_score(hist, p) - _score(hist, p.gamma, p.delta)) > 1e-9
        # update_memory
        m, hh, g = (r.standard_normal(d).tolist() for _ in range(3))
        P = int(r.integers(0, 2))
        want_m = [p.rho * m[i] + (1 - p.rho) * (p.eta * hh[i] + p.xi * P * g[i]) for i in range(d)]
        bad += float(np.max(np.abs(update_memory(m, hh, P, g, p) - want_m))) > 1e-9
        # repin over 4 buffers
        hists = [r.integers(0, 2, int(r.integers(2, 12))).tolist() for _ in range(4)]
        flags = [bool(x[-1]) for x in hists]
        sc = [_score(x[-(p.window + 1):], p.gamma, p.delta) for x in hists]
        if max(sc) - min(sc) <= 1e-12 * max(1.0, abs(max(sc))):
            want_f = list(flags)
        else:
            mean = sum(sc) / 4
            want_f = [s > mean for s in sc]
        if not any(want_f):
            want_f[sc.index(max(sc))] = True
        bad += repin([_Buf([0.0], f, list(x)) for f, x in zip(flags, hists)], p) != want_f
    # bounds fuzz
    out_of_bounds = 0
    for _ in range(2000):
        gamma, delta = r.uniform(0, 5), r.uniform(0, 5)
        hist = r.integers(0, 2, int(r.integers(2, 40))).tolist()
        s = pin_score(hist, PolicyParams(gamma=gamma, delta=delta))
        out_of_bounds += not (-delta - 1e-12 <= s <= gamma + 1e-12)
    ok = bad == 0 and out_of_bounds == 0
    return ok, f"{bad} oracle mismatches over 4x200 instances; {out_of_bounds}/2000 pin scores outside [-delta, gamma]"


# -- 8. end-to-end ablation grid ------------------------------------------------

def ac8():
    cfg = load_config("synthetic-fast")
    grid = parse_grid("ga,amp,prefetch")
    data = resolve_dataset(cfg)
    first = run_ablation(cfg, grid, data)
    second = run_ablation(cfg, grid, data)
    reports = [r.report for r in first.rows]
    complete = len(grid) == 8 and all(r is not None for r in reports)
    base_acc = first.baseline.accuracy
    spread = max(abs(r.accuracy - base_acc) for r in reports) if complete else float("inf")
    with tempfile.TemporaryDirectory() as tmp:
        emit_report(first, "json", Path(tmp) / "a.json")
        emit_report(first, "csv", Path(tmp) / "a.csv")
        validate_report(json.loads((Path(tmp) / "a.json").read_text()))
        for rep in first.runs():
            validate_report(rep.to_dict())
        rows = validate_csv(Path(tmp) / "a.csv")
    a = {r.run_id: (r.train_loss, r.val_loss, r.param_digest) for r in first.runs()}
    b = {r.run_id: (r.train_loss, r.val_loss, r.param_digest) for r in second.runs()}
    identical = a == b
    ok = complete and spread <= 1.5 and identical and len(rows) == len(first.runs()) * cfg.epochs
    accs = ", ".join(f"{r.run_id}={r.accuracy:.1f}" for r in first.runs())
    return ok, (f"{sum(r is not None for r in reports)}/8 runs complete, max |acc - baseline| "
                f"{spread:.2f} (limit 1.5); reports valid; loss traces identical across invocations: "
                f"{identical} [{accs}]")


# -- 9. CIFAR-10 subset smoke test ----------------------------------------------

def ac9():
    cfg = load_config("cifar10-subset")
    data = resolve_dataset(cfg)
    src = os.environ.get("TRAINACCEL_CIFAR10") or str(fixture_path(cfg.dataset.source))
    if os.path.isfile(src):
        labels, images = read_cifar_file(src, limit=2000)
        parsed = len(labels)
    else:
        parsed = len(data)
    rep = train(cfg, data)
    acc = rep.train_accuracy
    increasing = all(b > a for a, b in zip(acc, acc[1:]))
    ok = parsed == 2000 and len(acc) == 3 and increasing and acc[-1] > 25.0
    kind = "real CIFAR-10" if os.environ.get("TRAINACCEL_CIFAR10") else "generated CIFAR-10-format fixture"
    return ok, (f"parsed {parsed} records ({kind}); train accuracy per epoch "
                f"{', '.join(f'{a:.1f}%' for a in acc)} (strictly increasing: {increasing}, final > 25%)")


CRITERIA = [
    (1, "GA equivalence", 10, ac1),
    (2, "gradient correctness", 30, ac2),
    (3, "loss-scale dynamics", 5, ac3),
    (4, "AMP accuracy preservation", 60, ac4),
    (5, "quantization error", 5, ac5),
    (6, "pipeline overlap", 60, ac6),
    (7, "pin-policy math", 10, ac7),
    (8, "ablation grid", 300, ac8),
    (9, "CIFAR-10 subset smoke test", 600, ac9),
]


@pytest.mark.parametrize("number,title,budget,fn", CRITERIA, ids=[f"AC{c[0]}" for c in CRITERIA])
def test_acceptance(number, title, budget, fn):
    passed, line = check(number, title, budget, fn)
    assert passed, line


if __name__ == "__main__":
    import sys
    failures = sum(not check(*c)[0] for c in CRITERIA)
    sys.exit(1 if failures else 0)
