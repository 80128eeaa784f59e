"""Pin policy for the staging pipeline.

Three pieces of math drive it:

* allocation: the next batch goes to the buffer maximising
  ``alpha_i * cos(h_t, m_i) - beta_pin * P_i``
* pin score: over a window of T ticks,
  ``mean_t(gamma * P_i^t - delta * |P_i^t - P_i^{t-1}|)``
* memory update for the receiving buffer:
  ``m <- rho * m + (1 - rho) * (eta * h + xi * P * grad_m)`` with
  ``grad_m = m - h`` (gradient of ``0.5 * ||m - h||^2``)

Buffers are duck-typed: anything with ``signature``, ``pinned`` and
``pin_history`` attributes works (see ``datapipe.StagingBuffer``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class PolicyParams:
    alpha: tuple[float, ...] | None = None  # None -> uniform 1/N
    beta_pin: float = 0.1
    gamma: float = 1.0
    delta: float = 0.5
    rho: float = 0.9
    eta: float = 0.1
    xi: float = 0.1
    window: int = 8

    def __post_init__(self):
        if self.alpha is not None:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
            if any(a < 0 for a in self.alpha):
                raise ContractViolation("alpha weights must be non-negative")
        for name in ("beta_pin", "gamma", "delta", "rho", "eta", "xi"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")
        if self.rho > 1:
            raise ContractViolation("rho must be <= 1")
        if self.window < 1:
            raise ContractViolation("window must be >= 1")

    def alpha_for(self, n: int) -> np.ndarray:
        if self.alpha is None:
            return np.full(n, 1.0 / n)
        if len(self.alpha) != n:
            raise ContractViolation(f"alpha has {len(self.alpha)} weights for {n} buffers")
        return np.asarray(self.alpha)


def cosine(a, b) -> float:
    """Cosine similarity; 0 when either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def allocation_scores(h_t, buffers, p: PolicyParams, alpha=None) -> np.ndarray:
    if not buffers:
        raise ContractViolation("no buffers to allocate from")
    h_t = np.asarray(h_t)
    for b in buffers:
        if np.shape(b.signature) != h_t.shape:
            raise ContractViolation(f"signature dim {np.shape(b.signature)} != h_t dim {h_t.shape}")
    if alpha is None:
        alpha = p.alpha_for(len(buffers))
    return np.array([a * cosine(h_t, b.signature) - p.beta_pin * float(b.pinned)
                     for a, b in zip(alpha, buffers)])


def allocate(h_t, buffers, p: PolicyParams, alpha=None) -> int:
    """Index of the best-scoring buffer; ties go to the lowest index."""
    return int(np.argmax(allocation_scores(h_t, buffers, p, alpha)))


def pin_score(history, p: PolicyParams) -> float:
    """Windowed pin reward minus churn penalty for one buffer's history."""
    h = np.asarray(history, dtype=np.float64)
    if h.ndim != 1 or h.size < 2:
        raise ContractViolation("pin history needs at least two entries")
    cur, prev = h[1:], h[:-1]
    return float(np.sum(p.gamma * cur - p.delta * np.abs(cur - prev)) / cur.size)


def memory_gradient(m, h) -> np.ndarray:
    return np.asarray(m, dtype=np.float64) - np.asarray(h, dtype=np.float64)


def update_memory(m, h, pinned, grad_m, p: PolicyParams) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    grad_m = np.asarray(grad_m, dtype=np.float64)
    if not (m.shape == h.shape == grad_m.shape):
        raise ContractViolation(f"dimension mismatch: m{m.shape} h{h.shape} grad{grad_m.shape}")
    return p.rho * m + (1 - p.rho) * (p.eta * h + p.xi * float(pinned) * grad_m)


def _window(history, window):
    return list(history)[-(window + 1):]


def repin(buffers, p: PolicyParams) -> list[bool]:
    """Pin buffers whose windowed score is above the mean, keep at least one.

    If every score is equal there is nothing to distinguish the buffers and
    the current flags are kept. The decision is appended to each history.
    """
    if not buffers:
        raise ContractViolation("no buffers to repin")
    for b in buffers:
        if len(b.pin_history) < 2:
            raise ContractViolation("repin needs at least two history entries per buffer")
    scores = np.array([pin_score(_window(b.pin_history, p.window), p) for b in buffers])
    spread = scores.max() - scores.min()
    if spread <= 1e-12 * max(1.0, abs(scores.max())):
        flags = [bool(b.pinned) for b in buffers]
    else:
        mean = scores.mean()
        flags = [bool(s > mean) for s in scores]
    if not any(flags):
        flags[int(np.argmax(scores))] = True
    for b, f in zip(buffers, flags):
        b.pinned = f
        b.pin_history.append(f)
    return flags


class PinPolicy:
    """Stateful driver used by the pipeline's producer thread."""

    def __init__(self, params: PolicyParams | None = None):
        self.params = params or PolicyParams()
        self.ticks = 0

    def choose(self, h_t, buffers, free) -> int:
        """Allocate among the free buffers only; returns a global index."""
        alpha = self.params.alpha_for(len(buffers))
        cands = [buffers[i] for i in free]
        local = allocate(h_t, cands, self.params, alpha=[alpha[i] for i in free])
        return free[local]

    def on_fill(self, buf, h_t):
        grad = memory_gradient(buf.signature, h_t)
        buf.signature = update_memory(buf.signature, h_t, buf.pinned, grad, self.params)

    def tick(self, buffers):
        """Advance one pipeline tick: exactly one history entry per buffer."""
        self.ticks += 1
        if self.ticks % self.params.window == 0:
            repin(buffers, self.params)
        else:
            for b in buffers:
                b.pin_history.append(bool(b.pinned))
