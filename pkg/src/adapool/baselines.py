"""Comparison methods sharing one evaluation protocol.

Every method exposes process_task / task_accuracy / future_accuracy so
the same stream loop evaluates all of them. Randomness is drawn from the
same named substreams per task, so methods differ only where their
algorithms differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import distill, model, nn, trainer
from .errors import UsageError
from .pool import AdapterPool
from .rng import rng_for

METHOD_TAGS = ("B1", "B2", "ADAPTERS", "ER", "EWC", "ADA_K1", "ADA_RANDOM",
               "ADA_LEEP", "ADA_TRANSRATE")


def _zero_head_accuracy(features_fn, task) -> float:
    """Accuracy of a freshly zero-initialized head: the random-init
    convention behind b_bar and future matrix entries."""
    head = model.Head.init(task.id, task.arity, task.x_test.shape[1])
    logits = nn.linear(None, features_fn(task.x_test), head.params, "W", "b")
    labels = model.predict_labels(logits, task.arity)
    return float(np.mean(labels == task.y_test))


def _head_accuracy(features, head, y) -> float:
    logits = nn.linear(None, features, head.params, "W", "b")
    return float(np.mean(model.predict_labels(logits, head.arity) == y))


class _OrderedTasks:
    """In-order task-id bookkeeping shared by all sequential methods."""

    def __init__(self):
        self.n_tasks = 0
        self.heads: dict[int, model.Head] = {}

    def _expect(self, task) -> None:
        if task.id != self.n_tasks + 1:
            raise UsageError(
                f"task {task.id} out of order, expected {self.n_tasks + 1}")


class HeadOnly(_OrderedTasks):
    """B1: frozen features, one linear head per task."""

    def __init__(self, backbone: model.Backbone, train_cfg, seed: int):
        super().__init__()
        self.backbone = backbone
        self.train_cfg = train_cfg
        self.seed = seed

    def _features(self, X):
        return model.backbone_features(self.backbone, X)

    def process_task(self, task) -> dict:
        self._expect(task)
        head = model.Head.init(task.id, task.arity, self.backbone.width)

        def forward(X, trace):
            H = model.backbone_features(self.backbone, X, trace)
            return nn.linear(trace, H, head.params, "W", "b")

        history = trainer.fit(task.x_train, task.y_train, task.arity, forward,
                              [head.params], self.train_cfg,
                              rng_for(self.seed, "shuffle", f"task{task.id}"))
        head.freeze()
        self.heads[task.id] = head
        self.n_tasks += 1
        return {"task": task.id, "train_epochs": len(history),
                "train_accuracy": history[-1]["accuracy"]}

    def task_accuracy(self, task) -> float:
        return _head_accuracy(self._features(task.x_test),
                              self.heads[task.id], task.y_test)

    def future_accuracy(self, task) -> float:
        return _zero_head_accuracy(self._features, task)

    def param_record(self) -> dict:
        heads = sum(h.num_params() for h in self.heads.values())
        return {"base": self.backbone.num_params(), "adapters": 0,
                "heads": heads,
                "total": self.backbone.num_params() + heads}


class FullFineTune(_OrderedTasks):
    """B2: the shared trunk itself is updated by every task."""

    def __init__(self, backbone: model.Backbone, train_cfg, seed: int):
        super().__init__()
        params = backbone.params.copy()
        params.unfreeze_all()
        self.trunk = model.Backbone(backbone.num_layers, backbone.width, params)
        self.train_cfg = train_cfg
        self.seed = seed

    def _features(self, X):
        return model.backbone_features(self.trunk, X)

    def process_task(self, task) -> dict:
        self._expect(task)
        head = model.Head.init(task.id, task.arity, self.trunk.width)

        def forward(X, trace):
            H = model.backbone_features(self.trunk, X, trace)
            return nn.linear(trace, H, head.params, "W", "b")

        history = trainer.fit(task.x_train, task.y_train, task.arity, forward,
                              [self.trunk.params, head.params], self.train_cfg,
                              rng_for(self.seed, "shuffle", f"task{task.id}"))
        head.freeze()
        self.heads[task.id] = head
        self.n_tasks += 1
        return {"task": task.id, "train_epochs": len(history),
                "train_accuracy": history[-1]["accuracy"],
                "trunk_hash": self.trunk.byte_hash()}

    def task_accuracy(self, task) -> float:
        return _head_accuracy(self._features(task.x_test),
                              self.heads[task.id], task.y_test)

    def future_accuracy(self, task) -> float:
        return _zero_head_accuracy(self._features, task)

    def param_record(self) -> dict:
        heads = sum(h.num_params() for h in self.heads.values())
        return {"base": self.trunk.num_params(), "adapters": 0, "heads": heads,
                "total": self.trunk.num_params() + heads}


class IndependentAdapters(_OrderedTasks):
    """One adapter + head per task, never revisited."""

    def __init__(self, backbone: model.Backbone, bottleneck: int,
                 insertions: int, train_cfg, seed: int):
        super().__init__()
        self.backbone = backbone
        self.bottleneck = bottleneck
        self.insertions = insertions
        self.train_cfg = train_cfg
        self.seed = seed
        self.adapters: dict[int, model.Adapter] = {}

    def process_task(self, task) -> dict:
        self._expect(task)
        adapter = model.Adapter.init(
            rng_for(self.seed, "init", f"task{task.id}"), self.backbone.width,
            self.bottleneck, self.insertions)
        head = model.Head.init(task.id, task.arity, self.backbone.width)
        _, _, history = trainer.train_task(
            task, self.backbone, adapter, head, self.train_cfg,
            rng_for(self.seed, "shuffle", f"task{task.id}"))
        self.adapters[task.id] = adapter
        self.heads[task.id] = head
        self.n_tasks += 1
        return {"task": task.id, "train_epochs": len(history),
                "train_accuracy": history[-1]["accuracy"]}

    def task_accuracy(self, task) -> float:
        feats = model.forward_features(self.backbone, self.adapters[task.id],
                                       task.x_test)
        return _head_accuracy(feats, self.heads[task.id], task.y_test)

    def future_accuracy(self, task) -> float:
        if self.n_tasks:
            latest = self.adapters[self.n_tasks]
            fn = lambda X: model.forward_features(self.backbone, latest, X)
        else:
            fn = lambda X: model.backbone_features(self.backbone, X)
        return _zero_head_accuracy(fn, task)

    def param_record(self) -> dict:
        heads = sum(h.num_params() for h in self.heads.values())
        adapters = sum(a.num_params() for a in self.adapters.values())
        return {"base": self.backbone.num_params(), "adapters": adapters,
                "heads": heads,
                "total": self.backbone.num_params() + adapters + heads}


class _LabeledReservoir:
    """Reservoir of (covariate, label, task id) triples, same law as the
    unlabeled distillation buffer."""

    def __init__(self, capacity: int, d_in: int, rng: np.random.Generator):
        if capacity < 1:
            raise UsageError("memory capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self.x = np.zeros((capacity, d_in))
        self.y = np.zeros(capacity, dtype=np.int64)
        self.tid = np.zeros(capacity, dtype=np.int64)
        self.n_seen = 0

    @property
    def size(self) -> int:
        return min(self.n_seen, self.capacity)

    def extend(self, X, Y, task_id: int) -> None:
        k = len(Y)
        fill = min(k, max(self.capacity - self.n_seen, 0))
        if fill:
            sl = slice(self.n_seen, self.n_seen + fill)
            self.x[sl] = X[:fill]
            self.y[sl] = Y[:fill]
            self.tid[sl] = task_id
        if fill < k:
            start = self.n_seen + fill
            js = self.rng.integers(0, np.arange(start + 1, start + (k - fill) + 1))
            accept = js < self.capacity
            slots = js[accept]
            self.x[slots] = X[fill:][accept]
            self.y[slots] = Y[fill:][accept]
            self.tid[slots] = task_id
        self.n_seen += k


class ExperienceReplay(_OrderedTasks):
    """Shared adapter trained with half-new, half-replayed batches.

    Replay rows go through their own task's frozen head; gradients from
    them reach the shared adapter only.
    """

    def __init__(self, backbone: model.Backbone, bottleneck: int,
                 insertions: int, memory_capacity: int, train_cfg, seed: int):
        super().__init__()
        self.backbone = backbone
        self.train_cfg = train_cfg
        self.seed = seed
        self.adapter = model.Adapter.init(
            rng_for(seed, "init", "shared-adapter"), backbone.width,
            bottleneck, insertions)
        self.memory = _LabeledReservoir(memory_capacity, backbone.width,
                                        rng_for(seed, "reservoir"))

    def _features(self, X, trace=None):
        return model.forward_features(self.backbone, self.adapter, X, trace)

    def _mixed_step(self, xb, yb, head, replay_groups, states):
        """One Adam step from a new-data half batch plus replay rows.

        Each group's mean gradient is scaled by group_size / batch_total,
        so the sum is the mean over the combined batch.
        """
        total = len(yb) + sum(len(yr) for _, (_, yr) in replay_groups)
        agg: dict[str, np.ndarray] = {}

        def accumulate(src):
            for name, g in src.items():
                agg[name] = agg.get(name, 0.0) + g

        trace = nn.Trace()
        logits = nn.linear(trace, self._features(xb, trace), head.params, "W", "b")
        loss, dZ = trainer._loss_and_grad(logits, yb, head.arity)
        grads, _ = nn.backward(trace, dZ * (len(yb) / total))
        accumulate(grads.for_set(self.adapter.params))
        head_grads = dict(grads.for_set(head.params))

        for old_head, (xr, yr) in replay_groups:
            trace = nn.Trace()
            logits = nn.linear(trace, self._features(xr, trace),
                               old_head.params, "W", "b")
            _, dZ = trainer._loss_and_grad(logits, yr, old_head.arity)
            grads, _ = nn.backward(trace, dZ * (len(yr) / total))
            accumulate(grads.for_set(self.adapter.params))

        nn.adam_step(self.adapter.params, agg, states[0])
        if head_grads:
            nn.adam_step(head.params, head_grads, states[1])
        return loss

    def process_task(self, task) -> dict:
        self._expect(task)
        head = model.Head.init(task.id, task.arity, self.backbone.width)
        rng = rng_for(self.seed, "shuffle", f"task{task.id}")
        cfg = self.train_cfg
        x, y = task.x_train, task.y_train
        n = len(y)
        states = (nn.AdamState(self.adapter.params, cfg.lr),
                  nn.AdamState(head.params, cfg.lr))
        new_per_batch = max(1, cfg.batch_size // 2) if self.memory.size \
            else cfg.batch_size
        history = []
        best, stall = np.inf, 0
        for _ in range(cfg.max_epochs):
            order = rng.permutation(n)
            for lo in range(0, n, new_per_batch):
                idx = order[lo:lo + new_per_batch]
                replay_groups = []
                if self.memory.size:
                    k = cfg.batch_size - len(idx)
                    pick = rng.integers(0, self.memory.size, size=k)
                    by_task: dict[int, list[int]] = {}
                    for p in pick:
                        by_task.setdefault(int(self.memory.tid[p]), []).append(p)
                    for tid in sorted(by_task):
                        rows = by_task[tid]
                        replay_groups.append(
                            (self.heads[tid],
                             (self.memory.x[rows], self.memory.y[rows])))
                self._mixed_step(x[idx], y[idx], head, replay_groups, states)

            def forward(X, trace):
                return nn.linear(trace, self._features(X, trace),
                                 head.params, "W", "b")

            loss, acc = trainer.evaluate(forward, x, y, task.arity)
            history.append({"loss": loss, "accuracy": acc})
            if best - loss < cfg.early_stop_delta:
                stall += 1
                if stall >= cfg.early_stop_patience:
                    break
            else:
                stall = 0
            best = min(best, loss)
        head.freeze()
        self.heads[task.id] = head
        self.memory.extend(x, y, task.id)
        self.n_tasks += 1
        return {"task": task.id, "train_epochs": len(history),
                "train_accuracy": history[-1]["accuracy"] if history else None,
                "memory_size": self.memory.size}

    def task_accuracy(self, task) -> float:
        return _head_accuracy(self._features(task.x_test),
                              self.heads[task.id], task.y_test)

    def future_accuracy(self, task) -> float:
        return _zero_head_accuracy(self._features, task)

    def param_record(self) -> dict:
        heads = sum(h.num_params() for h in self.heads.values())
        return {"base": self.backbone.num_params(),
                "adapters": self.adapter.num_params(), "heads": heads,
                "total": self.backbone.num_params()
                + self.adapter.num_params() + heads}


class EWC(_OrderedTasks):
    """Shared adapter with quadratic penalties anchored at each past
    task's optimum, weighted by that task's diagonal Fisher estimate."""

    def __init__(self, backbone: model.Backbone, bottleneck: int,
                 insertions: int, lam: float, train_cfg, seed: int):
        super().__init__()
        if lam < 0:
            raise UsageError("ewc lambda must be >= 0")
        self.backbone = backbone
        self.lam = lam
        self.train_cfg = train_cfg
        self.seed = seed
        self.adapter = model.Adapter.init(
            rng_for(seed, "init", "shared-adapter"), backbone.width,
            bottleneck, insertions)
        self.anchors: list[tuple[dict, dict]] = []  # (fisher, theta_star)

    def _features(self, X, trace=None):
        return model.forward_features(self.backbone, self.adapter, X, trace)

    def _regularizer(self):
        if self.lam == 0.0 or not self.anchors:
            return None
        lam = self.lam

        def reg(param_sets):
            ps = param_sets[0]
            loss = 0.0
            grads: dict[str, np.ndarray] = {}
            for fisher, star in self.anchors:
                for name, F in fisher.items():
                    delta = ps[name] - star[name]
                    loss += 0.5 * lam * float(np.sum(F * delta * delta))
                    g = lam * F * delta
                    grads[name] = grads.get(name, 0.0) + g
            return loss, [grads, {}]

        return reg

    def _fisher(self, task, head) -> dict:
        """Mean squared per-sample gradient of the loss at the optimum."""
        F = {n: np.zeros_like(self.adapter.params[n])
             for n in self.adapter.params.names()}
        for i in range(len(task.y_train)):
            trace = nn.Trace()
            logits = nn.linear(trace, self._features(task.x_train[i:i + 1], trace),
                               head.params, "W", "b")
            _, dZ = trainer._loss_and_grad(logits, task.y_train[i:i + 1],
                                           task.arity)
            grads, _ = nn.backward(trace, dZ)
            for name, g in grads.for_set(self.adapter.params).items():
                F[name] += g * g
        for name in F:
            F[name] /= len(task.y_train)
        return F

    def process_task(self, task) -> dict:
        self._expect(task)
        head = model.Head.init(task.id, task.arity, self.backbone.width)

        def forward(X, trace):
            return nn.linear(trace, self._features(X, trace),
                             head.params, "W", "b")

        history = trainer.fit(task.x_train, task.y_train, task.arity, forward,
                              [self.adapter.params, head.params],
                              self.train_cfg,
                              rng_for(self.seed, "shuffle", f"task{task.id}"),
                              regularizer=self._regularizer())
        head.freeze()
        self.heads[task.id] = head
        fisher = self._fisher(task, head)
        star = {n: self.adapter.params[n].copy()
                for n in self.adapter.params.names()}
        self.anchors.append((fisher, star))
        self.n_tasks += 1
        return {"task": task.id, "train_epochs": len(history),
                "train_accuracy": history[-1]["accuracy"] if history else None,
                "anchors": len(self.anchors)}

    def task_accuracy(self, task) -> float:
        return _head_accuracy(self._features(task.x_test),
                              self.heads[task.id], task.y_test)

    def future_accuracy(self, task) -> float:
        return _zero_head_accuracy(self._features, task)

    def param_record(self) -> dict:
        heads = sum(h.num_params() for h in self.heads.values())
        return {"base": self.backbone.num_params(),
                "adapters": self.adapter.num_params(), "heads": heads,
                "total": self.backbone.num_params()
                + self.adapter.num_params() + heads}


class AdaMethod:
    """Pool-based method behind the shared evaluation protocol."""

    def __init__(self, pool: AdapterPool):
        self.pool = pool

    def process_task(self, task) -> dict:
        return self.pool.process_task(task)

    def task_accuracy(self, task) -> float:
        return self.pool.accuracy(task)

    def future_accuracy(self, task) -> float:
        if self.pool.n_tasks:
            latest = self.pool.slots[self.pool.routing[self.pool.n_tasks]]
            fn = lambda X: model.forward_features(self.pool.backbone, latest, X)
        else:
            fn = lambda X: model.backbone_features(self.pool.backbone, X)
        return _zero_head_accuracy(fn, task)

    def param_record(self) -> dict:
        heads = sum(h.num_params() for h in self.pool.heads.values())
        adapter = model.adapter_param_count(
            self.pool.backbone.width, self.pool.bottleneck,
            self.pool.insertions)
        acc = self.pool.accounting()
        return {"base": self.pool.backbone.num_params(),
                "adapters": len(self.pool.slots) * adapter, "heads": heads,
                "total": acc["total"] + heads,
                "trainable_peak": acc["trainable"],
                "inference": acc["inference"]}


@dataclass
class MethodKnobs:
    """Per-method settings shared by a comparison run."""
    backbone_layers: int = 4
    width: int = 64
    bottleneck: int = 8
    insertions: int = 4
    pool_size: int = 4
    buffer_capacity: int = 500
    er_memory: int = 500
    ewc_lambda: float = 100.0
    ewc_lambda_grid: tuple | None = None
    eps: float | None = None
    adapter_width_multiplier: int = 1
    train_cfg: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    distill_cfg: distill.DistillConfig = field(default_factory=distill.DistillConfig)


_ADA_SCORERS = {"ADA_K1": "transrate", "ADA_RANDOM": "random",
                "ADA_LEEP": "leep", "ADA_TRANSRATE": "transrate"}


def make_method(tag: str, seed: int, knobs: MethodKnobs | None = None):
    """Build a method instance with its backbone derived from the seed."""
    if tag not in METHOD_TAGS:
        raise UsageError(f"unknown method tag {tag!r}")
    k = knobs or MethodKnobs()
    backbone = model.Backbone.build(rng_for(seed, "init", "backbone"),
                                    k.backbone_layers, k.width)
    if tag == "B1":
        return HeadOnly(backbone, k.train_cfg, seed)
    if tag == "B2":
        return FullFineTune(backbone, k.train_cfg, seed)
    if tag == "ADAPTERS":
        return IndependentAdapters(backbone, k.bottleneck, k.insertions,
                                   k.train_cfg, seed)
    if tag == "ER":
        return ExperienceReplay(backbone, k.bottleneck, k.insertions,
                                k.er_memory, k.train_cfg, seed)
    if tag == "EWC":
        return EWC(backbone, k.bottleneck, k.insertions, k.ewc_lambda,
                   k.train_cfg, seed)
    bottleneck = k.bottleneck
    pool_size = k.pool_size
    if tag == "ADA_K1":
        pool_size = 1
        bottleneck = k.bottleneck * k.adapter_width_multiplier
    pool = AdapterPool(backbone, pool_size, bottleneck, k.insertions,
                       k.buffer_capacity, _ADA_SCORERS[tag], k.train_cfg,
                       k.distill_cfg, seed, k.eps)
    return AdaMethod(pool)


def run_b1(stream, seed: int, knobs=None):
    from .metrics import run_stream
    return run_stream(make_method("B1", seed, knobs), stream)


def run_b2(stream, seed: int, knobs=None):
    from .metrics import run_stream
    return run_stream(make_method("B2", seed, knobs), stream)


def run_independent_adapters(stream, seed: int, knobs=None):
    from .metrics import run_stream
    return run_stream(make_method("ADAPTERS", seed, knobs), stream)


def run_er(stream, seed: int, knobs=None):
    from .metrics import run_stream
    return run_stream(make_method("ER", seed, knobs), stream)


def run_ewc(stream, seed: int, knobs=None, lambdas=None):
    """Grid-search the penalty weight; keeps the run with the best
    average accuracy (ties resolve to the smaller weight)."""
    from .metrics import run_stream
    k = knobs or MethodKnobs()
    grid = lambdas if lambdas is not None else \
        (k.ewc_lambda_grid or (k.ewc_lambda,))
    best = None
    for lam in sorted(grid):
        res = run_stream(make_method("EWC", seed,
                                     replace(k, ewc_lambda=lam)), stream)
        res.extras["ewc_lambda"] = lam
        if best is None or res.summary()["avg_acc"] > best.summary()["avg_acc"]:
            best = res
    return best


def run_ada(stream, seed: int, scorer_tag: str = "ADA_TRANSRATE", knobs=None):
    from .metrics import run_stream
    return run_stream(make_method(scorer_tag, seed, knobs), stream)
