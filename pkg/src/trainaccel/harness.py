"""Training loop, metrics, with/without ablation grid and report output."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .amp import (FULL_SINGLE, LossScaler, PrecisionPolicy, TimingRecord, compute_speedup,
                  compute_throughput, unscale_and_check, update_loss_scale)
from .autograd import Batch, ComputeGraph, backward, forward, tiny_cnn, tiny_mlp
from .config import ExperimentConfig
from .datapipe import (Dataset, SourceKind, load_dataset, make_batches, make_cifar_fixture,
                       run_pipeline, split_train_val)
from .errors import ContractViolation, ConfigError, DivergenceError
from .optim import Accumulator, Optimizer, accumulate, clip_grad_norm, finalize_accumulation
from .pinpolicy import PinPolicy
from .schemas import CSV_COLUMNS
from .tensor import Rng, Tensor, cast_to_half, quantization_error

log = logging.getLogger(__name__)

TECHNIQUES = ("ga", "amp", "prefetch")
OPTIONAL_TECHNIQUES = ("pin_policy",)


def compute_macro_f1(predictions, truth, num_classes: int) -> float:
    """Unweighted mean of per-class F1, as a percentage.

    A class with no true and no predicted members scores 0.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.size == 0 or pred.shape != true.shape:
        raise ContractViolation("predictions and truth must be non-empty and equally long")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean() * 100.0)


def accuracy_pct(predictions, truth) -> float:
    pred = np.asarray(predictions)
    true = np.asarray(truth)
    if pred.size == 0:
        raise ContractViolation("no predictions")
    return float(np.count_nonzero(pred == true) * 100.0 / pred.size)


@dataclass
class MetricsReport:
    run_id: str = "run"
    accuracy: float = 0.0
    macro_f1: float = 0.0
    exec_time: float = 0.0
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)
    epoch_times: list = field(default_factory=list)
    throughput: float = 0.0
    op_count: int = 0
    speedup_vs_baseline: float | None = None
    quantization_error_trace: list = field(default_factory=list)
    loss_scale_trace: list = field(default_factory=list)
    pin_histories: list = field(default_factory=list)
    optimizer_steps: int = 0
    skipped_steps: int = 0
    predictions: list = field(default_factory=list)
    truth: list = field(default_factory=list)
    num_classes: int = 0
    param_digest: str = ""
    techniques: list = field(default_factory=list)
    backend: str = ""
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_digest(graph: ComputeGraph) -> str:
    h = hashlib.sha256()
    for p in graph.parameters:
        h.update(p.id.encode())
        h.update(np.ascontiguousarray(p.master, dtype=np.float32).tobytes())
    return h.hexdigest()


def build_model(cfg: ExperimentConfig, input_shape, num_classes) -> ComputeGraph:
    rng = Rng(cfg.seed, stream=0x1417)
    if cfg.model.kind == "cnn":
        if len(input_shape) != 3:
            raise ConfigError(f"cnn model needs (C, H, W) inputs, dataset gives {input_shape}")
        return tiny_cnn(input_shape, cfg.model.channels, num_classes, rng)
    return tiny_mlp(input_shape, cfg.model.hidden, num_classes, rng)


def fixture_path(kind: SourceKind) -> Path:
    root = Path(os.environ.get("TRAINACCEL_CACHE", Path.home() / ".cache" / "trainaccel"))
    return root / f"{kind.value}_fixture.bin"


def resolve_dataset(cfg: ExperimentConfig) -> Dataset:
    """Load the configured dataset.

    A CIFAR source without a path reads ``TRAINACCEL_CIFAR10`` if set and
    otherwise falls back to a generated CIFAR-10-format fixture file.
    """
    spec = cfg.dataset
    if spec.source is SourceKind.CIFAR10 and not spec.path:
        env = os.environ.get("TRAINACCEL_CIFAR10")
        if env:
            spec = dataclasses.replace(spec, path=env)
        else:
            path = fixture_path(spec.source)
            if not path.exists():
                path.parent.mkdir(parents=True, exist_ok=True)
                log.warning("no CIFAR-10 path configured; writing fixture %s", path)
                make_cifar_fixture(path, n=max(spec.limit or 2000, 2000), seed=0)
            spec = dataclasses.replace(spec, path=str(path))
    return load_dataset(spec)


class Trainer:
    """One training run: owns graph, optimizer, accumulator and loss scaler."""

    def __init__(self, cfg: ExperimentConfig, data: Dataset | None = None, run_id: str = "run"):
        self.cfg = cfg
        self.run_id = run_id
        data = data if data is not None else resolve_dataset(cfg)
        self.train_set, self.val_set = split_train_val(data, cfg.val_fraction, cfg.seed)
        if cfg.effective_batch > len(self.train_set):
            raise ConfigError(
                f"batch_size*ga_steps = {cfg.effective_batch} exceeds {len(self.train_set)} training examples")
        self.num_classes = data.num_classes
        self.graph = build_model(cfg, data.input_shape, data.num_classes)
        self.optimizer = Optimizer(self.graph.parameters, cfg.optimizer)
        self.accumulator = Accumulator(cfg.ga_steps, {p.id: p.master.shape for p in self.graph.parameters})
        if cfg.amp_enabled:
            a = cfg.amp
            self.policy = PrecisionPolicy.mixed(a.half_ops)
            self.scaler = LossScaler(base_scale=a.base_scale, beta=a.beta, growth_interval=a.growth_interval,
                                     min_scale=a.min_scale, max_scale=a.max_scale, use_formula=a.use_formula)
        else:
            self.policy = FULL_SINGLE
            self.scaler = None
        self.pin_policy = PinPolicy(cfg.prefetch.policy) if cfg.prefetch.pin_policy else None
        self.skipped_steps = 0
        self.op_count = 0
        self._scale_pair = None
        self._reset_epoch_stats()

    def _reset_epoch_stats(self):
        self._losses = []
        self._correct = 0
        self._seen = 0
        self._nonfinite = 0

    def _micro_batches(self, epoch):
        """Windows of ``batch_size * ga_steps`` split into ``ga_steps`` micro-batches."""
        b, m = self.cfg.batch_size, self.cfg.ga_steps
        out = []
        for big in make_batches(self.train_set, b * m, self.cfg.seed, epoch):
            for j in range(m):
                sl = slice(j * b, (j + 1) * b)
                out.append(Batch(big.inputs[sl], big.labels[sl]))
        return out

    def _overflow(self):
        self.accumulator.reset()
        self.skipped_steps += 1
        update_loss_scale(self.scaler, 0.0, 0.0, overflow=True)

    def micro_step(self, batch: Batch):
        loss, cache = forward(self.graph, batch, self.policy)
        self.op_count += 3 * self.graph.flops_per_example() * len(batch)
        self._seen += len(batch)
        if cache.nonfinite:
            self._nonfinite += 1
            if self.scaler is not None:
                self._overflow()
            return
        self._losses.append(loss)
        self._correct += int(np.count_nonzero(cache.predictions == batch.labels))

        if self.scaler is not None:
            scaled = backward(self.graph, cache, scale=self.scaler.scale)
            grads, overflow = unscale_and_check(scaled, self.scaler)
            if overflow:
                self._overflow()
                return
        else:
            grads = backward(self.graph, cache)
        accumulate(self.accumulator, grads)
        if not self.accumulator.ready:
            return

        pair = (loss, loss)
        if self.scaler is not None and self.scaler.growth_due():
            # reference single-precision loss on the same batch, before the update
            ref, _ = forward(self.graph, batch, FULL_SINGLE)
            tiny = np.finfo(np.float32).tiny
            pair = (max(ref, tiny), max(loss, tiny))
        g = finalize_accumulation(self.accumulator)
        if self.cfg.optimizer.clip_norm is not None:
            g, _ = clip_grad_norm(g, self.cfg.optimizer.clip_norm)
        self.optimizer.step(g)
        if self.scaler is not None:
            tiny = np.finfo(np.float32).tiny
            update_loss_scale(self.scaler, max(pair[0], tiny), max(pair[1], tiny), overflow=False)

    def evaluate(self, data: Dataset):
        preds, total, n = [], 0.0, 0
        bs = self.cfg.eval_batch_size
        for start in range(0, len(data), bs):
            batch = Batch(data.inputs[start:start + bs], data.labels[start:start + bs])
            loss, cache = forward(self.graph, batch, self.policy)
            total += loss * len(batch)
            n += len(batch)
            preds.append(cache.predictions)
        return total / n, np.concatenate(preds)

    def run(self) -> MetricsReport:
        cfg = self.cfg
        pf = cfg.prefetch
        rep = MetricsReport(run_id=self.run_id, num_classes=self.num_classes,
                            backend=kernels.backend_name(), config=cfg.to_flat())
        pin_hist = None
        for epoch in range(cfg.epochs):
            self._reset_epoch_stats()
            micro = self._micro_batches(epoch)
            timings = run_pipeline(micro, pf.k_buffers, pf.transfer, self.pin_policy, self.micro_step,
                                   pinned=pf.pinned)
            if timings.error is not None:
                raise timings.error
            if self.scaler is None and self._nonfinite == len(micro):
                raise DivergenceError(
                    f"loss was non-finite for every micro-batch of epoch {epoch}",
                    {"epoch": epoch, "micro_batches": len(micro), "optimizer_steps": self.optimizer.t,
                     "run_id": self.run_id})
            if pin_hist is None:
                pin_hist = [list(h) for h in timings.pin_histories]
            else:
                for acc, h in zip(pin_hist, timings.pin_histories):
                    acc.extend(h[1:])
            rep.epoch_times.append(timings.total)
            rep.train_loss.append(float(np.mean(self._losses)) if self._losses else float("nan"))
            rep.train_accuracy.append(self._correct * 100.0 / max(self._seen, 1))
            val_loss, preds = self.evaluate(self.val_set)
            rep.val_loss.append(float(val_loss))
            rep.val_accuracy.append(accuracy_pct(preds, self.val_set.labels))
            rep.val_f1.append(compute_macro_f1(preds, self.val_set.labels, self.num_classes))
            if cfg.amp_enabled:
                flat = np.concatenate([p.master.reshape(-1) for p in self.graph.parameters])
                t = Tensor(flat)
                rep.quantization_error_trace.append(quantization_error(t, cast_to_half(t)))
                rep.loss_scale_trace.append(self.scaler.scale)
            log.info("%s epoch %d: train_loss=%.4f val_acc=%.2f time=%.3fs", self.run_id, epoch,
                     rep.train_loss[-1], rep.val_accuracy[-1], timings.total)

        rep.exec_time = float(sum(rep.epoch_times))
        rep.accuracy = rep.val_accuracy[-1]
        rep.macro_f1 = rep.val_f1[-1]
        rep.predictions = preds.tolist()
        rep.truth = self.val_set.labels.tolist()
        rep.op_count = int(self.op_count)
        rep.throughput = compute_throughput(rep.op_count, rep.exec_time)
        rep.pin_histories = pin_hist or []
        rep.optimizer_steps = self.optimizer.t
        rep.skipped_steps = self.skipped_steps
        rep.param_digest = param_digest(self.graph)
        rep.techniques = active_techniques(cfg)
        return rep


def train(cfg: ExperimentConfig, data: Dataset | None = None, run_id: str = "run") -> MetricsReport:
    return Trainer(cfg, data, run_id).run()


# -- ablation -----------------------------------------------------------------

def active_techniques(cfg: ExperimentConfig) -> list[str]:
    on = []
    if cfg.ga_steps > 1:
        on.append("ga")
    if cfg.amp_enabled:
        on.append("amp")
    if cfg.prefetch.k_buffers > 1 or cfg.prefetch.pinned:
        on.append("prefetch")
    if cfg.prefetch.pin_policy:
        on.append("pin_policy")
    return on


def apply_toggles(base: ExperimentConfig, toggles) -> ExperimentConfig:
    """Config with exactly the named techniques switched on.

    ``ga`` keeps the base ``ga_steps`` (or 2 if the base has none);
    ``prefetch`` means at least double buffering with pinned buffers;
    ``pin_policy`` implies ``prefetch``.
    """
    toggles = set(toggles)
    bad = toggles - set(TECHNIQUES + OPTIONAL_TECHNIQUES)
    if bad:
        raise ConfigError(f"unknown techniques: {sorted(bad)}")
    ga = (base.ga_steps if base.ga_steps > 1 else 2) if "ga" in toggles else 1
    prefetch_on = "prefetch" in toggles or "pin_policy" in toggles
    pf = dataclasses.replace(
        base.prefetch,
        k_buffers=max(2, base.prefetch.k_buffers) if prefetch_on else 1,
        pinned=prefetch_on,
        pin_policy="pin_policy" in toggles,
    )
    return dataclasses.replace(base, ga_steps=ga, amp_enabled="amp" in toggles, prefetch=pf)


def parse_grid(text: str) -> list[frozenset]:
    """``"ga,amp,prefetch"`` -> full factorial; ``"none;ga+amp"`` -> explicit list."""
    text = text.strip()
    if text in ("all", "full"):
        text = ",".join(TECHNIQUES)
    if ";" in text or "+" in text:
        combos = []
        for part in text.split(";"):
            part = part.strip()
            names = [] if part in ("", "none", "baseline") else [n.strip() for n in part.split("+")]
            combos.append(frozenset(names))
    else:
        names = [n.strip() for n in text.split(",") if n.strip() and n.strip() != "none"]
        combos = [frozenset(c) for r in range(len(names) + 1) for c in itertools.combinations(names, r)]
    valid = set(TECHNIQUES + OPTIONAL_TECHNIQUES)
    for c in combos:
        if c - valid:
            raise ConfigError(f"unknown techniques in grid: {sorted(c - valid)}")
    if not combos:
        raise ConfigError("empty ablation grid")
    return combos


def _label(toggles) -> str:
    return "+".join(t for t in TECHNIQUES + OPTIONAL_TECHNIQUES if t in toggles) or "baseline"


@dataclass
class AblationRow:
    toggles: list
    run_id: str
    report: MetricsReport | None
    speedup: float | None = None
    error: str | None = None


@dataclass
class AblationTable:
    baseline: MetricsReport | None = None
    rows: list = field(default_factory=list)

    def runs(self) -> list[MetricsReport]:
        """Distinct executed runs, baseline first."""
        out = [self.baseline] if self.baseline is not None else []
        out += [r.report for r in self.rows if r.report is not None and r.report is not self.baseline]
        return out

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline.run_id if self.baseline else None,
            "runs": [r.to_dict() for r in self.runs()],
            "rows": [{"toggles": list(r.toggles), "run_id": r.run_id, "speedup": r.speedup,
                      "error": r.error} for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AblationTable":
        reports = {r["run_id"]: MetricsReport.from_dict(r) for r in d["runs"]}
        table = cls(baseline=reports.get(d["baseline"]))
        for r in d["rows"]:
            table.rows.append(AblationRow(r["toggles"], r["run_id"], reports.get(r["run_id"]),
                                          r["speedup"], r["error"]))
        return table


def run_ablation(base_cfg: ExperimentConfig, grid, data: Dataset | None = None) -> AblationTable:
    """Baseline (everything off) plus one run per toggle combination.

    All runs share the seed and the loaded dataset. An all-off entry in the
    grid reuses the baseline run. Failed runs are recorded and skipped.
    """
    grid = [frozenset(g) for g in grid]
    if not grid:
        raise ContractViolation("ablation grid is empty")
    if data is None:
        data = resolve_dataset(base_cfg)
    table = AblationTable()
    table.baseline = train(apply_toggles(base_cfg, ()), data, run_id="baseline")
    table.baseline.speedup_vs_baseline = 1.0
    base_t = TimingRecord("baseline", table.baseline.exec_time, table.baseline.op_count)
    for toggles in grid:
        label = _label(toggles)
        if not toggles:
            table.rows.append(AblationRow([], "baseline", table.baseline, 1.0))
            continue
        try:
            rep = train(apply_toggles(base_cfg, toggles), data, run_id=label)
        except Exception as exc:  # keep going: one failure must not sink the grid
            log.error("ablation run %s failed: %s", label, exc)
            table.rows.append(AblationRow(sorted(toggles), label, None, None, f"{type(exc).__name__}: {exc}"))
            continue
        rep.speedup_vs_baseline = compute_speedup(base_t, TimingRecord(label, rep.exec_time, rep.op_count))
        table.rows.append(AblationRow([t for t in TECHNIQUES + OPTIONAL_TECHNIQUES if t in toggles],
                                      label, rep, rep.speedup_vs_baseline))
    return table


# -- reports ------------------------------------------------------------------

class ReportIOError(OSError):
    pass


def csv_rows(obj) -> list[dict]:
    reports = obj.runs() if isinstance(obj, AblationTable) else [obj]
    rows = []
    for rep in reports:
        for e in range(len(rep.train_loss)):
            rows.append({
                "run_id": rep.run_id,
                "epoch": e + 1,
                "train_loss": rep.train_loss[e],
                "val_loss": rep.val_loss[e],
                "acc": rep.val_accuracy[e],
                "f1": rep.val_f1[e],
                "exec_time_s": rep.epoch_times[e],
                "throughput": rep.throughput,
            })
    return rows


def emit_report(obj, fmt: str, path) -> None:
    """Write a MetricsReport or AblationTable as json (full) or csv (per epoch)."""
    path = Path(path)
    try:
        if fmt == "json":
            with open(path, "w") as fh:
                json.dump(obj.to_dict(), fh, indent=2)
                fh.write("\n")
        elif fmt == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
                w.writeheader()
                w.writerows(csv_rows(obj))
        else:
            raise ContractViolation(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise ReportIOError(f"cannot write report to {path}: {exc.strerror or exc}") from exc


def load_report(path):
    with open(path) as fh:
        d = json.load(fh)
    if "rows" in d and "runs" in d:
        return AblationTable.from_dict(d)
    return MetricsReport.from_dict(d)
