"""Supervised training of adapters and heads over the frozen backbone.

fit() is the shared minibatch Adam loop; train_task() is the standard
per-task entry point (fresh adapter + head, frozen backbone). Baselines
reuse fit() with their own forward functions and parameter sets.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import model, nn
from .errors import NumericError, UsageError

LR_GRID = (0.00005, 0.0001, 0.0005, 0.001)


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 8
    max_epochs: int = 100
    early_stop_delta: float = 1e-5
    early_stop_patience: int = 5
    lr_grid: tuple = LR_GRID

    def __post_init__(self):
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.lr <= 0:
            raise UsageError("lr must be > 0")
        if self.max_epochs < 0:
            raise UsageError("max_epochs must be >= 0")


def _loss_and_grad(logits, y, arity):
    if arity == 2:
        flat = logits.reshape(-1)
        return (nn.binary_cross_entropy(flat, y),
                nn.binary_cross_entropy_grad(flat, y).reshape(logits.shape))
    return (nn.softmax_cross_entropy(logits, y),
            nn.softmax_cross_entropy_grad(logits, y))


def evaluate(forward_fn, x, y, arity) -> tuple[float, float]:
    """(mean loss, accuracy) without recording a trace."""
    logits = forward_fn(x, None)
    loss, _ = _loss_and_grad(logits, y, arity)
    acc = float(np.mean(model.predict_labels(logits, arity) == y))
    return loss, acc


def fit(x, y, arity: int, forward_fn, param_sets, cfg: TrainConfig,
        rng: np.random.Generator, regularizer=None) -> list[dict]:
    """Minibatch Adam on cross-entropy; returns per-epoch loss/accuracy.

    forward_fn(X, trace) must route through every ParamSet in param_sets.
    regularizer(param_sets) may add (loss, per-set gradient dicts); the
    penalty is applied on every batch.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(y)
    if n == 0:
        raise UsageError("empty train set")
    states = [nn.AdamState(ps, cfg.lr) for ps in param_sets]
    history = []
    best = np.inf
    stall = 0
    for _ in range(cfg.max_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            trace = nn.Trace()
            logits = forward_fn(x[idx], trace)
            loss, dZ = _loss_and_grad(logits, y[idx], arity)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss {loss}")
            grads, _ = nn.backward(trace, dZ)
            per_set = [dict(grads.for_set(ps)) for ps in param_sets]
            if regularizer is not None:
                _, reg_grads = regularizer(param_sets)
                for gs, extra in zip(per_set, reg_grads):
                    for name, g in extra.items():
                        gs[name] = gs.get(name, 0.0) + g
            for ps, gs, st in zip(param_sets, per_set, states):
                if gs:
                    nn.adam_step(ps, gs, st)
        loss, acc = evaluate(forward_fn, x, y, arity)
        if regularizer is not None:
            loss += regularizer(param_sets)[0]
        if not np.isfinite(loss):
            raise NumericError(f"non-finite epoch loss {loss}")
        history.append({"loss": loss, "accuracy": acc})
        if best - loss < cfg.early_stop_delta:
            stall += 1
            if stall >= cfg.early_stop_patience:
                break
        else:
            stall = 0
        best = min(best, loss)
    return history


def train_task(task, backbone: model.Backbone, adapter: model.Adapter,
               head: model.Head, cfg: TrainConfig,
               rng: np.random.Generator) -> tuple[model.Adapter, model.Head, list]:
    """Train a fresh adapter + head on one task; backbone stays frozen and
    the head is frozen afterwards."""

    def forward(X, trace):
        return model.forward_task(backbone, adapter, head, X, trace)

    history = fit(task.x_train, task.y_train, task.arity, forward,
                  [adapter.params, head.params], cfg, rng)
    head.freeze()
    return adapter, head, history


def select_lr(tasks, cfg: TrainConfig, probe_factory,
              rng: np.random.Generator, holdout: float = 0.2) -> float:
    """Pick the grid lr with the best mean held-out accuracy on the probe
    tasks (the first few of the stream); ties resolve to the smaller lr.

    probe_factory(task) must return (forward_fn, param_sets) with freshly
    initialized trainable parameters. A probe that blows up numerically
    scores zero for that grid value.
    """
    if not cfg.lr_grid:
        raise UsageError("empty lr grid")
    grid = sorted(cfg.lr_grid)
    best_lr, best_acc = grid[0], -1.0
    for lr in grid:
        accs = []
        for task in tasks:
            n = len(task.y_train)
            n_val = max(1, int(round(holdout * n)))
            order = rng.permutation(n)
            val, tr = order[:n_val], order[n_val:]
            if len(tr) == 0:
                raise UsageError("probe split left no training data")
            forward_fn, param_sets = probe_factory(task)
            probe_cfg = replace(cfg, lr=lr)
            try:
                fit(task.x_train[tr], task.y_train[tr], task.arity,
                    forward_fn, param_sets, probe_cfg, rng)
                _, acc = evaluate(forward_fn, task.x_train[val],
                                  task.y_train[val], task.arity)
            except NumericError:
                acc = 0.0
            accs.append(acc)
        mean_acc = float(np.mean(accs))
        if mean_acc > best_acc:
            best_acc, best_lr = mean_acc, lr
    return best_lr
