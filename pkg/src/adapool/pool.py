"""Budgeted adapter pool: train, buffer, store-or-consolidate, serve.

Tasks arrive in id order. The first K tasks fill the pool one slot each;
every later task trains a staged adapter, then a transferability scorer
picks the slot to consolidate with, a fresh student distills both models'
logits from the buffer, and the student replaces the slot. At most K+1
adapters ever exist at once, and only during consolidation.
"""

from __future__ import annotations

import pickle

import numpy as np

from . import distill, model, trainer, transfer
from .buffer import DistillBuffer
from .errors import RoutingError, UsageError
from .rng import rng_for

CHECKPOINT_FORMAT = "adapool-checkpoint"
CHECKPOINT_VERSION = 1


def total_params(pool_size: int, base_count: int, adapter_count: int,
                 head_count: int = 0) -> dict:
    """Parameter accounting of the pooled design.

    trainable: what consolidation optimizes at once (staged + student);
    inference: one forward pass (base + serving adapter + one head);
    total: resident during consolidation (base + K slots + staged).
    """
    if pool_size < 1:
        raise UsageError("pool size must be >= 1")
    if base_count < 0 or adapter_count < 0 or head_count < 0:
        raise UsageError("parameter counts must be >= 0")
    return {
        "trainable": 2 * adapter_count,
        "inference": base_count + adapter_count + head_count,
        "total": base_count + (pool_size + 1) * adapter_count,
    }


class AdapterPool:
    def __init__(self, backbone: model.Backbone, pool_size: int,
                 bottleneck: int, insertions: int, buffer_capacity: int,
                 scorer: str, train_cfg: trainer.TrainConfig,
                 distill_cfg: distill.DistillConfig, seed: int,
                 eps: float | None = None):
        if pool_size < 1:
            raise UsageError("pool size must be >= 1")
        if scorer not in transfer.SCORERS:
            raise UsageError(f"unknown scorer {scorer!r}")
        self.backbone = backbone
        self.pool_size = pool_size
        self.bottleneck = bottleneck
        self.insertions = insertions
        self.scorer = scorer
        self.train_cfg = train_cfg
        self.distill_cfg = distill_cfg
        self.seed = seed
        self.eps = eps
        self.slots: list[model.Adapter] = []
        self.routing: dict[int, int] = {}
        self.heads: dict[int, model.Head] = {}
        self.buffer = DistillBuffer(buffer_capacity, backbone.width,
                                    rng_for(seed, "reservoir"))
        self.scorer_rng = rng_for(seed, "scorer-random")
        self.n_tasks = 0
        self.reports: list[dict] = []

    def _fresh_adapter(self, tag: str) -> model.Adapter:
        return model.Adapter.init(rng_for(self.seed, "init", tag),
                                  self.backbone.width, self.bottleneck,
                                  self.insertions)

    def rep_heads(self) -> list[model.Head]:
        """One head per slot: the slot's most recently routed task."""
        reps = []
        for j in range(len(self.slots)):
            tids = [t for t, s in self.routing.items() if s == j]
            reps.append(self.heads[max(tids)])
        return reps

    def process_task(self, task) -> dict:
        if task.id != self.n_tasks + 1:
            raise UsageError(
                f"task {task.id} out of order, expected {self.n_tasks + 1}")
        staged = self._fresh_adapter(f"task{task.id}")
        head = model.Head.init(task.id, task.arity, self.backbone.width)
        _, _, history = trainer.train_task(
            task, self.backbone, staged, head, self.train_cfg,
            rng_for(self.seed, "shuffle", f"task{task.id}"))
        self.heads[task.id] = head
        self.buffer.extend(task.x_train)
        report = {
            "task": task.id,
            "train_epochs": len(history),
            "train_accuracy": history[-1]["accuracy"] if history else None,
        }
        if len(self.slots) < self.pool_size:
            self.slots.append(staged)
            self.routing[task.id] = len(self.slots) - 1
            report.update({"action": "stored", "slot": len(self.slots) - 1,
                           "scores": None})
        else:
            j, scores = transfer.select_adapter(
                self.backbone, self.slots, self.rep_heads(), task,
                self.scorer, self.eps, self.scorer_rng)
            affected = sorted(
                [t for t, s in self.routing.items() if s == j] + [task.id])
            pairs = [(staged if t == task.id else self.slots[j], self.heads[t])
                     for t in affected]
            X = self.buffer.snapshot()
            targets = distill.soft_targets(self.backbone, pairs, X)
            student = self._fresh_adapter(f"student{task.id}")
            res = distill.distill(
                self.backbone, student, [self.heads[t] for t in affected],
                X, targets, self.distill_cfg,
                rng_for(self.seed, "shuffle", f"distill{task.id}"))
            distill.swap_in(self.slots, self.routing, j, student, affected)
            report.update({
                "action": "consolidated", "slot": j, "scores": scores,
                "affected": affected, "distill_mse": res.final_mse,
                "distill_epochs": res.epochs_used,
                "distill_warned": res.warned,
            })
        self.n_tasks += 1
        self.reports.append(report)
        return report

    def predict(self, task_id: int, x) -> tuple[np.ndarray, np.ndarray]:
        """(labels, logits) for one processed task."""
        if task_id not in self.routing:
            raise RoutingError(f"unknown task {task_id}")
        head = self.heads[task_id]
        logits = model.forward_task(self.backbone,
                                    self.slots[self.routing[task_id]],
                                    head, x)
        return model.predict_labels(logits, head.arity), logits

    def accuracy(self, task) -> float:
        labels, _ = self.predict(task.id, task.x_test)
        return float(np.mean(labels == task.y_test))

    def accounting(self, head_count: int = 0) -> dict:
        return total_params(
            self.pool_size, self.backbone.num_params(),
            model.adapter_param_count(self.backbone.width, self.bottleneck,
                                      self.insertions), head_count)

    # -- checkpointing -----------------------------------------------------

    def checkpoint(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "scorer": self.scorer,
            "eps": self.eps,
            "pool_size": self.pool_size,
            "bottleneck": self.bottleneck,
            "insertions": self.insertions,
            "train_cfg": self.train_cfg,
            "distill_cfg": self.distill_cfg,
            "backbone": {"num_layers": self.backbone.num_layers,
                         "width": self.backbone.width,
                         "params": self.backbone.params.state_dict()},
            "slots": [a.params.state_dict() for a in self.slots],
            "routing": dict(self.routing),
            "heads": {tid: {"arity": h.arity,
                            "params": h.params.state_dict()}
                      for tid, h in self.heads.items()},
            "buffer": self.buffer.state(),
            "scorer_rng": self.scorer_rng.bit_generator.state,
            "n_tasks": self.n_tasks,
            "reports": list(self.reports),
        }

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            pickle.dump(self.checkpoint(), fh)

    @classmethod
    def from_checkpoint(cls, state: dict) -> "AdapterPool":
        if state.get("format") != CHECKPOINT_FORMAT:
            raise UsageError("not an adapter-pool checkpoint")
        if state.get("version") != CHECKPOINT_VERSION:
            raise UsageError(f"unsupported checkpoint version {state.get('version')}")
        from .nn import ParamSet
        bb = model.Backbone(state["backbone"]["num_layers"],
                            state["backbone"]["width"],
                            ParamSet.from_state_dict(state["backbone"]["params"]))
        pool = cls(bb, state["pool_size"], state["bottleneck"],
                   state["insertions"], state["buffer"]["capacity"],
                   state["scorer"], state["train_cfg"], state["distill_cfg"],
                   state["seed"], state["eps"])
        pool.slots = [
            model.Adapter(bb.width, state["bottleneck"], state["insertions"],
                          ParamSet.from_state_dict(ps))
            for ps in state["slots"]]
        pool.routing = dict(state["routing"])
        pool.heads = {
            tid: model.Head(tid, h["arity"],
                            ParamSet.from_state_dict(h["params"]))
            for tid, h in state["heads"].items()}
        pool.buffer = DistillBuffer.restore(state["buffer"])
        pool.scorer_rng.bit_generator.state = state["scorer_rng"]
        pool.n_tasks = state["n_tasks"]
        pool.reports = list(state["reports"])
        return pool

    @classmethod
    def load(cls, path) -> "AdapterPool":
        with open(path, "rb") as fh:
            state = pickle.load(fh)
        return cls.from_checkpoint(state)
