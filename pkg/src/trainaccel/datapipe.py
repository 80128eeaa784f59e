"""Datasets, seeded batching and the prefetching staging pipeline.

CIFAR binary layout: CIFAR-10 records are 1 label byte followed by 3072
pixel bytes (R plane, G plane, B plane, each 32x32 row-major); CIFAR-100
records carry a coarse and a fine label byte before the same pixels.

The host->device copy is simulated: a producer thread copies each batch
into one of ``k_buffers`` staging buffers and then waits out the transfer
time given by a :class:`TransferModel`, which is faster for pinned buffers.
The consumer runs in the calling thread.
"""

from __future__ import annotations

import enum
import math
import threading
import time
import queue
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Batch
from .errors import ContractViolation, FormatError
from .tensor import Rng

CIFAR_PIXELS = 3 * 32 * 32
CIFAR10_RECORD = 1 + CIFAR_PIXELS
CIFAR100_RECORD = 2 + CIFAR_PIXELS
SIGNATURE_DIM = 64


# -- binary records -----------------------------------------------------------

def _pixels(block: bytes, start: int) -> np.ndarray:
    raw = np.frombuffer(block, dtype=np.uint8, count=CIFAR_PIXELS, offset=start)
    return (raw.astype(np.float32) / np.float32(255.0)).reshape(3, 32, 32)


def parse_cifar10_record(block: bytes) -> tuple[int, np.ndarray]:
    if len(block) != CIFAR10_RECORD:
        raise FormatError(f"CIFAR-10 record must be {CIFAR10_RECORD} bytes, got {len(block)}",
                          offset=min(len(block), CIFAR10_RECORD))
    label = block[0]
    if label > 9:
        raise FormatError(f"CIFAR-10 label {label} out of range", offset=0)
    return int(label), _pixels(block, 1)


def parse_cifar100_record(block: bytes) -> tuple[int, int, np.ndarray]:
    if len(block) != CIFAR100_RECORD:
        raise FormatError(f"CIFAR-100 record must be {CIFAR100_RECORD} bytes, got {len(block)}",
                          offset=min(len(block), CIFAR100_RECORD))
    coarse, fine = block[0], block[1]
    if coarse > 19:
        raise FormatError(f"CIFAR-100 coarse label {coarse} out of range", offset=0)
    if fine > 99:
        raise FormatError(f"CIFAR-100 fine label {fine} out of range", offset=1)
    return int(coarse), int(fine), _pixels(block, 2)


def encode_cifar10_record(label: int, pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1)
    if pixels.size != CIFAR_PIXELS or not 0 <= label <= 9:
        raise ContractViolation("need a label in 0..9 and 3072 uint8 pixels")
    return bytes([label]) + pixels.tobytes()


def encode_cifar100_record(coarse: int, fine: int, pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(-1)
    if pixels.size != CIFAR_PIXELS or not (0 <= coarse <= 19 and 0 <= fine <= 99):
        raise ContractViolation("need coarse in 0..19, fine in 0..99 and 3072 uint8 pixels")
    return bytes([coarse, fine]) + pixels.tobytes()


def read_cifar_file(path, cifar100: bool = False, coarse: bool = False,
                    limit: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read a whole CIFAR binary file into ``(labels, images)``.

    Images come back as float32 in [0, 1] with shape (n, 3, 32, 32).
    CIFAR-100 files yield fine labels unless ``coarse`` is set.
    """
    rec = CIFAR100_RECORD if cifar100 else CIFAR10_RECORD
    path = Path(path)
    size = path.stat().st_size
    if size % rec:
        raise FormatError(f"{path}: {size} bytes is not a whole number of {rec}-byte records",
                          offset=size - size % rec)
    n = size // rec
    if limit is not None:
        n = min(n, limit)
    with open(path, "rb") as fh:
        raw = np.frombuffer(fh.read(n * rec), dtype=np.uint8).reshape(n, rec)
    lab_bytes = raw[:, :rec - CIFAR_PIXELS]
    fine = cifar100 and not coarse
    labels = lab_bytes[:, 1] if fine else lab_bytes[:, 0]
    top = 100 if fine else (20 if cifar100 else 10)
    bad = np.nonzero(labels >= top)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{path}: label {labels[i]} out of range in record {i}", offset=i * rec)
    images = (raw[:, rec - CIFAR_PIXELS:].astype(np.float32) / np.float32(255.0)).reshape(n, 3, 32, 32)
    return labels.astype(np.int64), images


def write_cifar10_file(path, labels, images_u8):
    with open(path, "wb") as fh:
        for lab, img in zip(labels, images_u8):
            fh.write(encode_cifar10_record(int(lab), img))


def write_cifar100_file(path, coarse, fine, images_u8):
    with open(path, "wb") as fh:
        for c, f, img in zip(coarse, fine, images_u8):
            fh.write(encode_cifar100_record(int(c), int(f), img))


def make_cifar_fixture(path, n: int = 2000, seed: int = 0, num_classes: int = 10,
                       noise: float = 64.0, amplitude: float = 8.0):
    """Write a CIFAR-10-format file whose classes are learnable.

    Each class has a smooth colour template (a random 3x4x4 pattern blown
    up to 32x32); records are template plus per-pixel noise, clipped to
    bytes. Labels cycle so every class is equally represented.
    """
    rng = Rng(seed, stream=0xC1FA)
    coarse = rng.normal((num_classes, 3, 4, 4))
    templates = np.kron(coarse, np.ones((1, 1, 8, 8)))
    labels = np.arange(n) % num_classes
    labels = labels[rng.permutation(n)]
    pix = 128.0 + amplitude * templates[labels] + noise * rng.normal((n, 3, 32, 32))
    images = np.clip(np.rint(pix), 0, 255).astype(np.uint8)
    write_cifar10_file(path, labels, images)
    return labels, images


# -- datasets -----------------------------------------------------------------

class SourceKind(enum.Enum):
    CIFAR10 = "cifar10"
    CIFAR100 = "cifar100"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class DatasetSpec:
    source: SourceKind = SourceKind.SYNTHETIC
    path: str | None = None
    num_classes: int = 3
    dims: tuple[int, ...] = (16,)
    size: int = 600
    seed: int = 0
    margin: float = 0.5
    limit: int | None = None
    normalization: str = "none"  # none | auto | "m1,m2,..:s1,s2,.."

    def __post_init__(self):
        if isinstance(self.source, str):
            object.__setattr__(self, "source", SourceKind(self.source.lower()))
        object.__setattr__(self, "dims", tuple(int(d) for d in np.atleast_1d(self.dims)))


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ContractViolation("inputs and labels differ in length")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def input_shape(self):
        return tuple(self.inputs.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


def make_synthetic(num_classes: int, dims, size: int, seed: int, margin: float = 0.5) -> Dataset:
    """Linearly separable, class-balanced data.

    Points are Gaussian; labels are the argmax of a fixed random linear map,
    and only points whose top-two logit gap exceeds ``margin`` are kept.
    """
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    d = int(np.prod(dims))
    if num_classes < 2 or size < num_classes:
        raise ContractViolation("need >= 2 classes and size >= num_classes")
    rng = Rng(seed, stream=0x5EED)
    w = rng.normal((num_classes, d)) / math.sqrt(d)
    quota = [size // num_classes + (1 if c < size % num_classes else 0) for c in range(num_classes)]
    xs, ys = [], []
    counts = [0] * num_classes
    for _ in range(10_000):
        cand = rng.normal((4 * size, d)).astype(np.float32)
        logits = cand.astype(np.float64) @ w.T
        top2 = np.sort(logits, axis=1)[:, -2:]
        lab = np.argmax(logits, axis=1)
        for x, y, gap in zip(cand, lab, top2[:, 1] - top2[:, 0]):
            if gap > margin and counts[y] < quota[y]:
                xs.append(x)
                ys.append(y)
                counts[y] += 1
        if counts == quota:
            break
    else:  # pragma: no cover - needs an absurd margin
        raise ContractViolation(f"could not draw {size} points with margin {margin}")
    order = rng.permutation(size)
    inputs = np.stack(xs)[order].reshape((size,) + dims)
    return Dataset(inputs, np.asarray(ys)[order], num_classes)


def _normalize(data: Dataset, how: str) -> Dataset:
    how = (how or "none").strip().lower()
    if how == "none":
        return data
    x = data.inputs
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    if how == "auto":
        mean = x.mean(axis=axes, dtype=np.float64)
        std = x.std(axis=axes, dtype=np.float64)
    else:
        try:
            m_s, s_s = how.split(":")
            mean = np.array([float(v) for v in m_s.split(",")])
            std = np.array([float(v) for v in s_s.split(",")])
        except ValueError:
            raise ContractViolation(f"bad normalization {how!r}; use none, auto or 'm1,..:s1,..'") from None
    std = np.where(std > 0, std, 1.0)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    out = (x - mean.reshape(shape)) / std.reshape(shape)
    return Dataset(out.astype(np.float32), data.labels, data.num_classes)


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.source is SourceKind.SYNTHETIC:
        data = make_synthetic(spec.num_classes, spec.dims, spec.size, spec.seed, spec.margin)
    else:
        if not spec.path:
            raise ContractViolation(f"{spec.source.value} dataset needs a path")
        path = Path(spec.path)
        if path.is_dir():
            files = sorted(path.glob("data_batch_*.bin")) or sorted(path.glob("train.bin")) or sorted(path.glob("*.bin"))
        else:
            files = [path]
        if not files:
            raise FileNotFoundError(f"no CIFAR .bin files under {path}")
        cifar100 = spec.source is SourceKind.CIFAR100
        labels, images, remaining = [], [], spec.limit
        for f in files:
            lab, img = read_cifar_file(f, cifar100=cifar100, limit=remaining)
            labels.append(lab)
            images.append(img)
            if remaining is not None:
                remaining -= len(lab)
                if remaining <= 0:
                    break
        data = Dataset(np.concatenate(images), np.concatenate(labels), 100 if cifar100 else 10)
    return _normalize(data, spec.normalization)


def split_train_val(data: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out the last ``val_fraction`` of one fixed shuffle."""
    if not 0 < val_fraction < 1:
        raise ContractViolation("val_fraction must lie in (0, 1)")
    n = len(data)
    perm = Rng(seed, stream=0x5B17).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ContractViolation("validation split leaves no training data")
    return data.subset(perm[:n - n_val]), data.subset(perm[n - n_val:])


def make_batches(data: Dataset, batch_size: int, seed: int, epoch: int) -> list[Batch]:
    """Shuffle keyed by ``(seed, epoch)``; the trailing partial batch is dropped."""
    n = len(data)
    if n == 0:
        raise ContractViolation("empty dataset")
    if not 1 <= batch_size <= n:
        raise ContractViolation(f"batch_size {batch_size} must lie in [1, {n}]")
    perm = Rng(seed, stream=0xBA7C).child(epoch).permutation(n)
    out = []
    for start in range(0, n - batch_size + 1, batch_size):
        idx = perm[start:start + batch_size]
        out.append(Batch(data.inputs[idx], data.labels[idx]))
    return out


def batch_signature(inputs: np.ndarray, dim_cap: int = SIGNATURE_DIM) -> np.ndarray:
    """Per-feature mean over the batch, subsampled at a fixed stride to <= dim_cap."""
    flat = np.asarray(inputs).reshape(len(inputs), -1)
    d = flat.shape[1]
    stride = max(1, math.ceil(d / dim_cap))
    return flat[:, ::stride][:, :dim_cap].mean(axis=0, dtype=np.float64)


# -- staging pipeline ---------------------------------------------------------

@dataclass(frozen=True)
class TransferModel:
    """Simulated host->device copy time: ``fixed_latency + nbytes * per_byte``."""

    fixed_latency: float = 50e-6
    per_byte_pageable: float = 1e-9
    per_byte_pinned: float | None = None  # None -> half of pageable

    def __post_init__(self):
        if self.per_byte_pinned is None:
            object.__setattr__(self, "per_byte_pinned", self.per_byte_pageable / 2)
        if self.fixed_latency < 0:
            raise ContractViolation("fixed_latency must be >= 0")
        if not 0 < self.per_byte_pinned <= self.per_byte_pageable:
            raise ContractViolation("need 0 < per_byte_pinned <= per_byte_pageable")

    def transfer_time(self, nbytes: int, pinned: bool) -> float:
        per = self.per_byte_pinned if pinned else self.per_byte_pageable
        return self.fixed_latency + nbytes * per


def predicted_total(n: int, transfer: float, compute: float, k_buffers: int) -> float:
    """Closed-form wall time of an n-batch two-stage pipeline."""
    if n == 0:
        return 0.0
    if k_buffers == 1:
        return n * (transfer + compute)
    return transfer + (n - 1) * max(transfer, compute) + compute


@dataclass
class StagingBuffer:
    index: int
    capacity_bytes: int
    pinned: bool = False
    signature: np.ndarray = field(default_factory=lambda: np.zeros(SIGNATURE_DIM))
    pin_history: list = field(default_factory=list)
    inputs: np.ndarray | None = field(default=None, repr=False)
    labels: np.ndarray | None = field(default=None, repr=False)


@dataclass
class PipelineTimings:
    total: float = 0.0
    transfer_times: list = field(default_factory=list)
    compute_times: list = field(default_factory=list)
    buffer_order: list = field(default_factory=list)
    pin_histories: list = field(default_factory=list)
    delivered: int = 0
    error: BaseException | None = None

    @property
    def transfer_total(self):
        return float(sum(self.transfer_times))

    @property
    def compute_total(self):
        return float(sum(self.compute_times))


def _sleep_until(deadline):
    while True:
        left = deadline - time.perf_counter()
        if left <= 0:
            return
        time.sleep(left if left > 2e-3 else left / 2 if left > 2e-4 else 0)


def run_pipeline(batches, k_buffers: int, tm: TransferModel, pin_policy=None, compute=None,
                 *, pinned: bool = False, signature_dim: int = SIGNATURE_DIM) -> PipelineTimings:
    """Stream ``batches`` through ``k_buffers`` staging buffers into ``compute``.

    ``pin_policy`` is ``None`` for static pinning (every buffer pinned iff
    ``pinned``) or a :class:`~trainaccel.pinpolicy.PinPolicy`. ``compute``
    receives each batch as views into its staging buffer, valid only for
    the duration of the call; copy anything kept longer. If ``compute``
    raises, the pipeline stops, drains, and returns partial timings with
    ``error`` set.
    """
    if k_buffers < 1:
        raise ContractViolation("k_buffers must be >= 1")
    batches = list(batches)
    timings = PipelineTimings()
    if not batches:
        return timings
    max_n = max(len(b) for b in batches)
    feat = batches[0].inputs.shape[1:]
    buffers = []
    for i in range(k_buffers):
        inp = np.empty((max_n,) + feat, dtype=np.float32)
        lab = np.empty(max_n, dtype=np.int64)
        buffers.append(StagingBuffer(i, inp.nbytes + lab.nbytes, pinned=pinned,
                                     signature=np.zeros(min(signature_dim, int(np.prod(feat)))),
                                     pin_history=[pinned], inputs=inp, labels=lab))

    free = set(range(k_buffers))
    cond = threading.Condition()
    ready: queue.Queue = queue.Queue()
    stop = threading.Event()
    producer_error = []

    def produce():
        try:
            for i, batch in enumerate(batches):
                h_t = batch_signature(batch.inputs, signature_dim) if pin_policy is not None else None
                with cond:
                    while not free and not stop.is_set():
                        cond.wait()
                    if stop.is_set():
                        return
                    fl = sorted(free)
                    idx = pin_policy.choose(h_t, buffers, fl) if pin_policy is not None else fl[0]
                    free.discard(idx)
                buf = buffers[idx]
                t0 = time.perf_counter()
                n = len(batch)
                np.copyto(buf.inputs[:n], batch.inputs)
                np.copyto(buf.labels[:n], batch.labels)
                nbytes = batch.inputs.nbytes + batch.labels.nbytes
                _sleep_until(t0 + tm.transfer_time(nbytes, buf.pinned))
                timings.transfer_times.append(time.perf_counter() - t0)
                if pin_policy is not None:
                    pin_policy.on_fill(buf, h_t)
                    pin_policy.tick(buffers)
                else:
                    for b in buffers:
                        b.pin_history.append(b.pinned)
                ready.put((idx, n))
        except BaseException as exc:  # surfaced to the caller via timings.error
            producer_error.append(exc)
        finally:
            ready.put(None)

    start = time.perf_counter()
    worker = threading.Thread(target=produce, name="staging-producer", daemon=True)
    worker.start()
    try:
        while True:
            item = ready.get()
            if item is None:
                break
            idx, n = item
            buf = buffers[idx]
            timings.buffer_order.append(idx)
            t0 = time.perf_counter()
            try:
                if compute is not None:
                    compute(Batch(buf.inputs[:n], buf.labels[:n]))
            except BaseException as exc:
                timings.error = exc
                stop.set()
            finally:
                timings.compute_times.append(time.perf_counter() - t0)
                with cond:
                    free.add(idx)
                    cond.notify()
            if timings.error is not None:
                break
            timings.delivered += 1
    finally:
        stop.set()
        with cond:
            cond.notify_all()
        worker.join()
    timings.total = time.perf_counter() - start
    if producer_error and timings.error is None:
        timings.error = producer_error[0]
    timings.pin_histories = [list(b.pin_history) for b in buffers]
    return timings
