"""Transferability scores for routing new tasks onto pool adapters.

transrate: coding-rate gap H(Z) - H(Z|Y) of candidate-adapter features,
estimated with log-det of scatter matrices. leep: log expected empirical
prediction through the source head's dummy label distributions. Both feed
the argmax slot selector; a seeded random scorer serves as ablation.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import model, nn
from .errors import NumericError, UsageError


class TransrateResult(NamedTuple):
    value: float
    degenerate: bool


class LeepResult(NamedTuple):
    value: float
    dropped: tuple


def coding_rate(Z: np.ndarray, eps: float) -> float:
    """0.5 * log2 det(I_d + (d / (n eps^2)) Z^T Z) via symmetric eigenvalues."""
    n, d = Z.shape
    if eps <= 0:
        raise UsageError("eps must be > 0")
    if n == 0:
        return 0.0
    scale = d / (n * eps * eps)
    G = Z.T @ Z if d <= n else Z @ Z.T
    lam = np.linalg.eigvalsh(G)
    lam = np.clip(lam, 0.0, None)
    return float(0.5 * np.sum(np.log2(1.0 + scale * lam)))


def transrate(Z, Y, eps: float | None = None) -> TransrateResult:
    """Coding rate of all features minus the class-weighted rates.

    The total term sees Z centered on its global mean; each conditional
    term sees the class block centered on its own class mean, so it
    measures within-class scatter only. (Leaving the class blocks on the
    global center would cancel the between-class variance out of the
    score entirely for balanced symmetric clusters.) Nonnegativity still
    follows from log-det concavity plus monotonicity. Default eps makes
    the global scale d/(n eps^2) = 1.
    """
    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(Y).reshape(-1)
    if Z.ndim != 2 or Z.shape[0] != Y.shape[0]:
        raise UsageError(f"transrate shapes {Z.shape} vs {Y.shape}")
    n, d = Z.shape
    if n < 2:
        raise UsageError("transrate needs at least 2 samples")
    if not np.all(np.isfinite(Z)):
        raise NumericError("non-finite features in transrate")
    classes = np.unique(Y)
    if classes.size < 2:
        return TransrateResult(0.0, True)
    if eps is None:
        eps = float(np.sqrt(d / n))
    Zc = Z - Z.mean(axis=0, keepdims=True)
    total = coding_rate(Zc, eps)
    cond = 0.0
    for c in classes:
        block = Zc[Y == c]
        block = block - block.mean(axis=0, keepdims=True)
        cond += (len(block) / n) * coding_rate(block, eps)
    value = total - cond
    if not np.isfinite(value):
        raise NumericError(f"non-finite transrate value {value}")
    return TransrateResult(float(value), False)


def dummy_distributions(backbone: model.Backbone, adapter: model.Adapter,
                        head: model.Head, X) -> np.ndarray:
    """Source-label distributions of the candidate model on target inputs.

    Binary heads map a logit l to (sigmoid(l), 1 - sigmoid(l)); wider
    heads use the softmax of their logits.
    """
    logits = model.forward_task(backbone, adapter, head, X)
    if head.out_dim == 1:
        p1 = nn.sigmoid(logits.reshape(-1))
        return np.column_stack([p1, 1.0 - p1])
    return nn.softmax(logits)


def leep_from_dummies(theta, Y) -> LeepResult:
    """Empirical-conditional prediction score from precomputed dummies.

    Source labels whose marginal mass is exactly zero are dropped from the
    conditional (their dummy column is identically zero, so no sample's
    expected prediction changes); dropped indices are reported.
    """
    theta = np.asarray(theta, dtype=np.float64)
    Y = np.asarray(Y).reshape(-1)
    if theta.ndim != 2 or theta.shape[0] != Y.shape[0]:
        raise UsageError(f"leep shapes {theta.shape} vs {Y.shape}")
    m = theta.shape[0]
    if m == 0:
        raise UsageError("leep needs at least 1 sample")
    if np.any(theta < 0) or np.any(theta > 1):
        raise UsageError("dummy distribution entries must lie in [0, 1]")
    if np.max(np.abs(theta.sum(axis=1) - 1.0)) > 1e-9:
        raise UsageError("dummy distribution rows must sum to 1")
    targets = np.unique(Y)
    # joint[y, z] = (1/m) sum_i 1[y_i = y] theta_i[z]
    joint = np.stack([theta[Y == y].sum(axis=0) for y in targets]) / m
    pz = joint.sum(axis=0)
    keep = pz > 0.0
    dropped = tuple(int(z) for z in np.nonzero(~keep)[0])
    cond = joint[:, keep] / pz[keep]
    y_index = np.searchsorted(targets, Y)
    per_sample = np.einsum("iz,iz->i", cond[y_index], theta[:, keep])
    with np.errstate(divide="ignore"):
        value = float(np.mean(np.log(per_sample)))
    return LeepResult(value, dropped)


def leep(backbone, adapter, head, X, Y) -> LeepResult:
    return leep_from_dummies(dummy_distributions(backbone, adapter, head, X), Y)


SCORERS = ("transrate", "leep", "random")


def select_adapter(backbone, slots, rep_heads, task, scorer: str,
                   eps: float | None = None,
                   rng: np.random.Generator | None = None) -> tuple[int, list]:
    """Score every pool slot on the new task's train set, return argmax.

    rep_heads[j] is the head representing slot j (its most recently
    consolidated task) and is only consulted by the leep scorer. Ties
    resolve to the lowest slot index.
    """
    if not slots:
        raise UsageError("cannot select from an empty pool")
    if scorer not in SCORERS:
        raise UsageError(f"unknown scorer {scorer!r}")
    if scorer == "random":
        if rng is None:
            raise UsageError("random scorer needs an rng")
        scores = rng.random(len(slots)).tolist()
    elif scorer == "transrate":
        scores = []
        for ad in slots:
            Z = model.forward_features(backbone, ad, task.x_train)
            scores.append(transrate(Z, task.y_train, eps).value)
    else:
        scores = []
        for ad, head in zip(slots, rep_heads):
            scores.append(leep(backbone, ad, head, task.x_train,
                               task.y_train).value)
    return int(np.argmax(scores)), scores
