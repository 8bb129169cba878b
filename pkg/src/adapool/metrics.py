"""Continual-learning evaluation: N x N accuracy matrix and the three
summary transfer metrics.

Row i of R holds every task's test accuracy after processing task i.
Entries for tasks not yet seen (j > i) are measured with a freshly
zero-initialized head for task j over the method's current features;
they exist so the forward-transfer diagonal R[i-1, i] is defined, and
are flagged as random-head entries in run output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError


def _check_matrix(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] == 0:
        raise UsageError(f"result matrix must be square and non-empty, got {R.shape}")
    if np.any(R < 0.0) or np.any(R > 1.0):
        raise UsageError("accuracies must lie in [0, 1]")
    return R


def avg_accuracy(R) -> float:
    """Mean of the final row: accuracy over all tasks at stream end."""
    R = _check_matrix(R)
    return float(np.mean(R[-1]))


def bwt(R) -> float:
    """Mean change of each task's accuracy between its own time and the
    end; negative values are forgetting."""
    R = _check_matrix(R)
    n = R.shape[0]
    if n < 2:
        raise UsageError("bwt needs at least 2 tasks")
    return float(np.mean(R[-1, :-1] - np.diag(R)[:-1]))


def fwt(R, b_bar) -> float:
    """Mean advantage over the random-init baseline on each task just
    before that task is trained."""
    R = _check_matrix(R)
    b = np.asarray(b_bar, dtype=np.float64).reshape(-1)
    n = R.shape[0]
    if n < 2:
        raise UsageError("fwt needs at least 2 tasks")
    if b.shape[0] != n:
        raise UsageError(f"b_bar length {b.shape[0]} vs {n} tasks")
    vals = [R[i - 1, i] - b[i] for i in range(1, n)]
    return float(np.mean(vals))


@dataclass
class RunResult:
    R: np.ndarray
    b_bar: np.ndarray
    reports: list = field(default_factory=list)
    future_entries_random_heads: bool = True
    extras: dict = field(default_factory=dict)

    def summary(self) -> dict:
        n = self.R.shape[0]
        out = {"avg_acc": avg_accuracy(self.R)}
        if n >= 2:
            out["bwt"] = bwt(self.R)
            out["fwt"] = fwt(self.R, self.b_bar)
        else:
            out["bwt"] = None
            out["fwt"] = None
        return out


def run_stream(method, stream, on_task=None) -> RunResult:
    """Process the task sequence, filling one matrix row after each task.

    The random-init baseline b_bar is measured before any training with
    the same zero-head convention used for future entries. on_task(i,
    method), if given, runs after row i is filled (checkpoint hooks).
    """
    tasks = list(stream)
    if not tasks:
        raise UsageError("empty stream")
    n = len(tasks)
    b_bar = np.array([method.future_accuracy(t) for t in tasks])
    R = np.zeros((n, n))
    reports = []
    for i, task in enumerate(tasks, start=1):
        reports.append(method.process_task(task))
        for j, other in enumerate(tasks, start=1):
            if j <= i:
                R[i - 1, j - 1] = method.task_accuracy(other)
            else:
                R[i - 1, j - 1] = method.future_accuracy(other)
        if on_task is not None:
            on_task(i, method)
    return RunResult(R=R, b_bar=b_bar, reports=reports)
