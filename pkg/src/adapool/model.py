"""Frozen backbone, residual bottleneck adapters, per-task heads.

The backbone is a stack of L frozen residual dense layers of width d.
Adapters are the only trainable feature parameters: small bottleneck
blocks inserted after backbone layers, `insertions` of them in total,
spread evenly over the layers. Heads are per-task linear maps trained
once and then frozen.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .errors import DimensionError, RoutingError, UsageError


def adapter_param_count(d: int, m: int, insertions: int) -> int:
    """insertions x (2md + d + m), counting both projections and biases."""
    if d <= 0 or m <= 0 or insertions <= 0:
        raise UsageError("adapter_param_count needs positive d, m, insertions")
    return insertions * (2 * m * d + d + m)


class Backbone:
    """Frozen residual tanh stack; byte-identical for a whole run."""

    def __init__(self, num_layers: int, width: int, params: nn.ParamSet):
        self.num_layers = num_layers
        self.width = width
        self.params = params

    @classmethod
    def build(cls, rng: np.random.Generator, num_layers: int = 4,
              width: int = 64) -> "Backbone":
        if num_layers < 1 or width < 1:
            raise UsageError("backbone needs num_layers >= 1 and width >= 1")
        ps = nn.ParamSet()
        scale = 1.0 / np.sqrt(width)
        for i in range(num_layers):
            ps.add(f"layer{i}.W", rng.normal(0.0, scale, size=(width, width)),
                   frozen=True)
            ps.add(f"layer{i}.b", np.zeros(width), frozen=True)
        return cls(num_layers, width, ps)

    def byte_hash(self) -> str:
        return self.params.byte_hash()

    def num_params(self) -> int:
        return self.params.num_params()


class Adapter:
    """Bottleneck blocks x + relu(x Wd^T + bd) Wu^T + bu, near-identity init."""

    def __init__(self, width: int, bottleneck: int, insertions: int,
                 params: nn.ParamSet):
        self.width = width
        self.bottleneck = bottleneck
        self.insertions = insertions
        self.params = params

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, bottleneck: int,
             insertions: int, init_std: float = 0.02) -> "Adapter":
        if width < 1 or bottleneck < 1 or insertions < 1:
            raise UsageError("adapter needs positive width, bottleneck, insertions")
        ps = nn.ParamSet()
        for j in range(insertions):
            ps.add(f"ins{j}.W_down", rng.normal(0.0, init_std, size=(bottleneck, width)))
            ps.add(f"ins{j}.b_down", np.zeros(bottleneck))
            ps.add(f"ins{j}.W_up", rng.normal(0.0, init_std, size=(width, bottleneck)))
            ps.add(f"ins{j}.b_up", np.zeros(width))
        return cls(width, bottleneck, insertions, ps)

    def copy(self) -> "Adapter":
        return Adapter(self.width, self.bottleneck, self.insertions,
                       self.params.copy())

    def num_params(self) -> int:
        return self.params.num_params()


class Head:
    """Per-task linear classifier; one logit for binary, c for multi-class."""

    def __init__(self, task_id: int, arity: int, params: nn.ParamSet):
        self.task_id = task_id
        self.arity = arity
        self.params = params

    @classmethod
    def init(cls, task_id: int, arity: int, width: int) -> "Head":
        if arity < 2:
            raise UsageError(f"head arity must be >= 2, got {arity}")
        c_out = 1 if arity == 2 else arity
        ps = nn.ParamSet()
        ps.add("W", np.zeros((c_out, width)))
        ps.add("b", np.zeros(c_out))
        return cls(task_id, arity, ps)

    @property
    def out_dim(self) -> int:
        return self.params["W"].shape[0]

    def copy(self) -> "Head":
        return Head(self.task_id, self.arity, self.params.copy())

    def num_params(self) -> int:
        return self.params.num_params()

    def freeze(self) -> None:
        self.params.freeze_all()


def backbone_features(backbone: Backbone, x,
                      trace: nn.Trace | None = None) -> np.ndarray:
    """The frozen stack alone, no adapter blocks (head-only baselines)."""
    X, was_vec = nn.as_batch(x)
    if X.shape[1] != backbone.width:
        raise DimensionError(
            f"input width {X.shape[1]} vs backbone width {backbone.width}")
    for i in range(backbone.num_layers):
        X = nn.residual_dense(trace, X, backbone.params,
                              f"layer{i}.W", f"layer{i}.b", "tanh")
    return X[0] if was_vec else X


def forward_features(backbone: Backbone, adapter: Adapter, x,
                     trace: nn.Trace | None = None) -> np.ndarray:
    """Backbone layer i, then this layer's share of adapter insertions."""
    X, was_vec = nn.as_batch(x)
    if X.shape[1] != backbone.width:
        raise DimensionError(
            f"input width {X.shape[1]} vs backbone width {backbone.width}")
    if adapter.width != backbone.width:
        raise DimensionError(
            f"adapter width {adapter.width} vs backbone width {backbone.width}")
    if adapter.insertions % backbone.num_layers != 0:
        raise UsageError(
            f"{adapter.insertions} insertions do not spread evenly over "
            f"{backbone.num_layers} layers")
    per_layer = adapter.insertions // backbone.num_layers
    j = 0
    for i in range(backbone.num_layers):
        X = nn.residual_dense(trace, X, backbone.params,
                              f"layer{i}.W", f"layer{i}.b", "tanh")
        for _ in range(per_layer):
            X = nn.bottleneck(trace, X, adapter.params, f"ins{j}.", "relu")
            j += 1
    return X[0] if was_vec else X


def forward_task(backbone: Backbone, adapter: Adapter, head: Head, x,
                 trace: nn.Trace | None = None) -> np.ndarray:
    """Raw logits of one task: head applied to adapted features."""
    X, was_vec = nn.as_batch(x)
    H = forward_features(backbone, adapter, X, trace)
    Z = nn.linear(trace, H, head.params, "W", "b")
    return Z[0] if was_vec else Z


def forward_all(backbone: Backbone, slots: list[Adapter],
                heads: dict[int, Head], routing: dict[int, int], x) -> np.ndarray:
    """Concatenated logits over all routed tasks, in task-id order.

    Tasks sharing a slot reuse one feature pass. Routing must cover task
    ids 1..n without gaps.
    """
    if not routing:
        raise RoutingError("empty routing")
    ids = sorted(routing)
    if ids != list(range(1, len(ids) + 1)):
        raise RoutingError(f"routing does not cover tasks 1..n: {ids}")
    X, was_vec = nn.as_batch(x)
    feats: dict[int, np.ndarray] = {}
    cols = []
    for tid in ids:
        slot = routing[tid]
        if not 0 <= slot < len(slots):
            raise RoutingError(f"task {tid} routed to missing slot {slot}")
        if tid not in heads:
            raise RoutingError(f"no head for task {tid}")
        if slot not in feats:
            feats[slot] = forward_features(backbone, slots[slot], X)
        cols.append(nn.linear(None, feats[slot], heads[tid].params, "W", "b"))
    Z = np.concatenate(cols, axis=1)
    return Z[0] if was_vec else Z


def predict_labels(logits, arity: int) -> np.ndarray:
    """Logit > 0 picks class 1 for binary heads; argmax otherwise."""
    Z, was_vec = nn.as_batch(np.atleast_1d(np.asarray(logits, dtype=np.float64)))
    if arity == 2:
        y = (Z.reshape(-1) > 0.0).astype(np.int64)
    else:
        if Z.shape[1] != arity:
            raise DimensionError(f"logit width {Z.shape[1]} vs arity {arity}")
        y = Z.argmax(axis=1)
    return y
