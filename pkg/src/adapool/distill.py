"""Consolidate two adapters into one student by matching multi-task logits
on the unlabeled buffer.

The training objective is the mean over buffer rows and over the affected
tasks' logit entries of the squared difference to the teachers' logits.
Restricting to affected tasks loses nothing: tasks served by untouched
slots keep bit-identical logits, so their terms are exactly zero in the
all-task sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model, nn
from .errors import DistillError, NumericError, UsageError


@dataclass
class DistillConfig:
    max_epochs: int = 200
    tolerance: float = 1e-2
    batch_size: int = 64
    lr: float = 0.001

    def __post_init__(self):
        if self.max_epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise UsageError("bad distillation config")
        if self.tolerance < 0:
            raise UsageError("tolerance must be >= 0")


@dataclass
class DistillResult:
    final_mse: float
    epochs_used: int
    warned: bool


def soft_targets(backbone: model.Backbone, pairs, X) -> np.ndarray:
    """Raw logits of the affected tasks on the buffer, task-id order.

    pairs: ordered (adapter, head) per affected task. Tasks sharing an
    adapter object share one feature pass.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise DistillError("empty buffer: consolidation impossible")
    feats: dict[int, np.ndarray] = {}
    cols = []
    for adapter, head in pairs:
        key = id(adapter)
        if key not in feats:
            feats[key] = model.forward_features(backbone, adapter, X)
        cols.append(nn.linear(None, feats[key], head.params, "W", "b"))
    return np.concatenate(cols, axis=1)


def student_logits(backbone: model.Backbone, student: model.Adapter,
                   heads, X) -> np.ndarray:
    F = model.forward_features(backbone, student, X)
    return np.concatenate(
        [nn.linear(None, F, h.params, "W", "b") for h in heads], axis=1)


def logit_mse(backbone, student, heads, X, targets) -> float:
    Z = student_logits(backbone, student, heads, X)
    return nn.mse(Z, targets)


def distill(backbone: model.Backbone, student: model.Adapter, heads, X,
            targets, cfg: DistillConfig, rng: np.random.Generator) -> DistillResult:
    """Fit the student to the teacher logits; only the student moves.

    heads are the affected tasks' (frozen) heads in the same column order
    as `targets`. Stops early once the full-buffer MSE reaches tolerance;
    past max_epochs the result is still returned with warned=True.
    """
    X = np.asarray(X, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    m = len(X)
    if m == 0:
        raise DistillError("empty buffer: consolidation impossible")
    widths = [h.out_dim for h in heads]
    total_c = sum(widths)
    if targets.shape != (m, total_c):
        raise UsageError(f"targets shape {targets.shape} vs ({m}, {total_c})")

    mse = logit_mse(backbone, student, heads, X, targets)
    if not np.isfinite(mse):
        raise NumericError(f"non-finite distillation loss {mse}")
    if mse <= cfg.tolerance:
        return DistillResult(final_mse=mse, epochs_used=0, warned=False)

    state = nn.AdamState(student.params, cfg.lr)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(m)
        for lo in range(0, m, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            Xb, Tb = X[idx], targets[idx]
            trace = nn.Trace()
            F = model.forward_features(backbone, student, Xb, trace)
            dF = np.zeros_like(F)
            off = 0
            for h, c in zip(heads, widths):
                W = h.params["W"]
                Zk = F @ W.T + h.params["b"]
                dZk = 2.0 * (Zk - Tb[:, off:off + c]) / (len(idx) * total_c)
                dF += dZk @ W
                off += c
            grads, _ = nn.backward(trace, dF)
            nn.adam_step(student.params, grads.for_set(student.params), state)
        mse = logit_mse(backbone, student, heads, X, targets)
        if not np.isfinite(mse):
            raise NumericError(f"non-finite distillation loss {mse}")
        if mse <= cfg.tolerance:
            return DistillResult(final_mse=mse, epochs_used=epoch, warned=False)
    return DistillResult(final_mse=mse, epochs_used=cfg.max_epochs, warned=True)


def swap_in(slots: list, routing: dict, slot: int, student: model.Adapter,
            affected_tasks) -> None:
    """Install the student and point every affected task at its slot."""
    if not 0 <= slot < len(slots):
        raise UsageError(f"slot {slot} out of range [0, {len(slots)})")
    slots[slot] = student
    for tid in affected_tasks:
        routing[tid] = slot
