"""Experiment configuration: a versioned JSON tree, validated fail-closed.

Unknown keys are errors with their dotted path; every semantic field has
a default so config files stay terse. Two hashes are derived: the full
experiment hash, and a per-cell hash over only the fields that can
change a single (method, seed) result. Output location and checkpoint
cadence never enter either hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import replace

from . import distill, trainer, taskstream
from .baselines import METHOD_TAGS, MethodKnobs
from .errors import ConfigError

CONFIG_VERSION = 1

_STREAM_DEFAULTS = {
    "kind": "synthetic",
    "num_tasks": 20,
    "d_in": 64,
    "separation": 4.0,
    "t_per_class": 50,
    "test_per_class": 50,
    "stream_seed": 7,
    "num_labels": None,
    "samples_per_label": None,
    "paths": [],
    "protocol": "binary",
    "classes_per_task": 5,
    "per_class": 50,
}

_MODEL_DEFAULTS = {
    "backbone_layers": 4,
    "width": 64,
    "bottleneck": 8,
    "insertions": 4,
}

_POOL_DEFAULTS = {
    "pool_size": 4,
    "buffer_capacity": 500,
    "eps": None,
}

_TRAIN_DEFAULTS = {
    "lr": 0.001,
    "batch_size": 8,
    "max_epochs": 100,
    "early_stop_delta": 1e-5,
    "early_stop_patience": 5,
}

_DISTILL_DEFAULTS = {
    "max_epochs": 200,
    "tolerance": 0.01,
    "batch_size": 64,
    "lr": 0.001,
}

_METHOD_KEYS = {"tag", "label", "pool_size", "bottleneck", "insertions",
                "adapter_width_multiplier", "lambda", "lambda_grid"}

_TOP_KEYS = {"version", "stream", "methods", "model", "pool", "train",
             "distill", "er_memory", "seeds", "output_dir",
             "checkpoint_cadence"}


def _require_mapping(node, path):
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected an object")


def _merge_section(raw, defaults, path):
    _require_mapping(raw, path)
    for key in raw:
        if key not in defaults:
            raise ConfigError(f"{path}.{key}: unknown key")
    out = dict(defaults)
    out.update(raw)
    return out


def _check_number(value, path, *, integer=False, minimum=None,
                  allow_none=False):
    if value is None:
        if allow_none:
            return
        raise ConfigError(f"{path}: must not be null")
    if isinstance(value, bool) or not isinstance(
            value, int if integer else (int, float)):
        kind = "an integer" if integer else "a number"
        raise ConfigError(f"{path}: expected {kind}, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {value}")


class ExperimentConfig:
    """Validated config plus factories for streams and method knobs."""

    def __init__(self, raw: dict):
        _require_mapping(raw, "config")
        for key in raw:
            if key not in _TOP_KEYS:
                raise ConfigError(f"{key}: unknown key")
        if raw.get("version") != CONFIG_VERSION:
            raise ConfigError(
                f"version: expected {CONFIG_VERSION}, got {raw.get('version')!r}")
        self.stream = _merge_section(raw.get("stream", {}), _STREAM_DEFAULTS,
                                     "stream")
        self.model = _merge_section(raw.get("model", {}), _MODEL_DEFAULTS,
                                    "model")
        self.pool = _merge_section(raw.get("pool", {}), _POOL_DEFAULTS, "pool")
        self.train = _merge_section(raw.get("train", {}), _TRAIN_DEFAULTS,
                                    "train")
        self.distill = _merge_section(raw.get("distill", {}),
                                      _DISTILL_DEFAULTS, "distill")
        self._check_stream()
        self._check_scalars()

        methods = raw.get("methods")
        if not isinstance(methods, list) or not methods:
            raise ConfigError("methods: must be a non-empty list")
        self.methods = [self._check_method(m, f"methods[{i}]")
                        for i, m in enumerate(methods)]
        labels = [m["label"] for m in self.methods]
        dups = {l for l in labels if labels.count(l) > 1}
        if dups:
            raise ConfigError(f"methods: duplicate labels {sorted(dups)}")

        seeds = raw.get("seeds", [0, 1, 2, 3, 4])
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError("seeds: must be a non-empty list")
        for i, s in enumerate(seeds):
            _check_number(s, f"seeds[{i}]", integer=True, minimum=0)
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds: duplicates not allowed")
        self.seeds = list(seeds)

        self.er_memory = raw.get("er_memory")
        if self.er_memory is None:
            self.er_memory = self.pool["buffer_capacity"]
        else:
            _check_number(self.er_memory, "er_memory", integer=True, minimum=1)
            if self.er_memory != self.pool["buffer_capacity"]:
                raise ConfigError(
                    f"er_memory: must equal pool.buffer_capacity "
                    f"({self.pool['buffer_capacity']}), got {self.er_memory}")

        self.output_dir = raw.get("output_dir", "runs")
        if not isinstance(self.output_dir, str) or not self.output_dir:
            raise ConfigError("output_dir: expected a non-empty string")
        self.checkpoint_cadence = raw.get("checkpoint_cadence", 0)
        _check_number(self.checkpoint_cadence, "checkpoint_cadence",
                      integer=True, minimum=0)

    # -- validation helpers ------------------------------------------------

    def _check_stream(self):
        s = self.stream
        if s["kind"] not in ("synthetic", "adae"):
            raise ConfigError(f"stream.kind: expected synthetic or adae, "
                              f"got {s['kind']!r}")
        _check_number(s["num_tasks"], "stream.num_tasks", integer=True,
                      minimum=1)
        _check_number(s["d_in"], "stream.d_in", integer=True, minimum=1)
        _check_number(s["separation"], "stream.separation", minimum=0)
        _check_number(s["t_per_class"], "stream.t_per_class", integer=True,
                      minimum=1)
        _check_number(s["test_per_class"], "stream.test_per_class",
                      integer=True, minimum=1)
        _check_number(s["stream_seed"], "stream.stream_seed", integer=True,
                      minimum=0)
        _check_number(s["num_labels"], "stream.num_labels", integer=True,
                      minimum=2, allow_none=True)
        _check_number(s["samples_per_label"], "stream.samples_per_label",
                      integer=True, minimum=1, allow_none=True)
        if s["protocol"] not in ("binary", "multiclass"):
            raise ConfigError(f"stream.protocol: expected binary or "
                              f"multiclass, got {s['protocol']!r}")
        if not isinstance(s["paths"], list):
            raise ConfigError("stream.paths: expected a list")
        if s["kind"] == "adae" and not s["paths"]:
            raise ConfigError("stream.paths: required when kind is adae")
        _check_number(s["classes_per_task"], "stream.classes_per_task",
                      integer=True, minimum=2)
        _check_number(s["per_class"], "stream.per_class", integer=True,
                      minimum=1)

    def _check_scalars(self):
        m, p, t, d = self.model, self.pool, self.train, self.distill
        _check_number(m["backbone_layers"], "model.backbone_layers",
                      integer=True, minimum=1)
        _check_number(m["width"], "model.width", integer=True, minimum=1)
        _check_number(m["bottleneck"], "model.bottleneck", integer=True,
                      minimum=1)
        _check_number(m["insertions"], "model.insertions", integer=True,
                      minimum=1)
        if m["insertions"] % m["backbone_layers"] != 0:
            raise ConfigError("model.insertions: must divide evenly over "
                              "model.backbone_layers")
        _check_number(p["pool_size"], "pool.pool_size", integer=True,
                      minimum=1)
        _check_number(p["buffer_capacity"], "pool.buffer_capacity",
                      integer=True, minimum=1)
        _check_number(p["eps"], "pool.eps", allow_none=True)
        if p["eps"] is not None and p["eps"] <= 0:
            raise ConfigError("pool.eps: must be > 0")
        _check_number(t["lr"], "train.lr")
        if t["lr"] <= 0:
            raise ConfigError(f"train.lr: must be > 0, got {t['lr']}")
        _check_number(t["batch_size"], "train.batch_size", integer=True,
                      minimum=1)
        _check_number(t["max_epochs"], "train.max_epochs", integer=True,
                      minimum=0)
        _check_number(t["early_stop_delta"], "train.early_stop_delta",
                      minimum=0)
        _check_number(t["early_stop_patience"], "train.early_stop_patience",
                      integer=True, minimum=1)
        _check_number(d["max_epochs"], "distill.max_epochs", integer=True,
                      minimum=0)
        _check_number(d["tolerance"], "distill.tolerance", minimum=0)
        _check_number(d["batch_size"], "distill.batch_size", integer=True,
                      minimum=1)
        _check_number(d["lr"], "distill.lr")
        if d["lr"] <= 0:
            raise ConfigError(f"distill.lr: must be > 0, got {d['lr']}")

    def _check_method(self, entry, path) -> dict:
        _require_mapping(entry, path)
        for key in entry:
            if key not in _METHOD_KEYS:
                raise ConfigError(f"{path}.{key}: unknown key")
        tag = entry.get("tag")
        if tag not in METHOD_TAGS:
            raise ConfigError(f"{path}.tag: expected one of "
                              f"{sorted(METHOD_TAGS)}, got {tag!r}")
        out = dict(entry)
        out.setdefault("label", tag)
        if not isinstance(out["label"], str) or not out["label"]:
            raise ConfigError(f"{path}.label: expected a non-empty string")
        for key in ("pool_size", "bottleneck", "insertions",
                    "adapter_width_multiplier"):
            if key in out:
                _check_number(out[key], f"{path}.{key}", integer=True,
                              minimum=1)
        if "lambda" in out:
            _check_number(out["lambda"], f"{path}.lambda", minimum=0)
        if "lambda_grid" in out:
            grid = out["lambda_grid"]
            if not isinstance(grid, list) or not grid:
                raise ConfigError(f"{path}.lambda_grid: expected a non-empty "
                                  f"list")
            for i, lam in enumerate(grid):
                _check_number(lam, f"{path}.lambda_grid[{i}]", minimum=0)
        return out

    # -- hashing -----------------------------------------------------------

    def _semantic_tree(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "stream": self.stream,
            "model": self.model,
            "pool": self.pool,
            "train": self.train,
            "distill": self.distill,
            "er_memory": self.er_memory,
        }

    @staticmethod
    def _digest(tree) -> str:
        blob = json.dumps(tree, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def experiment_hash(self) -> str:
        tree = self._semantic_tree()
        tree["methods"] = self.methods
        tree["seeds"] = self.seeds
        return self._digest(tree)

    def cell_hash(self, label: str, seed: int) -> str:
        tree = self._semantic_tree()
        tree["method"] = self._entry(label)
        tree["seed"] = seed
        return self._digest(tree)

    # -- factories ---------------------------------------------------------

    def _entry(self, label: str) -> dict:
        for m in self.methods:
            if m["label"] == label:
                return m
        raise ConfigError(f"methods: no entry labeled {label!r}")

    def build_stream(self):
        s = self.stream
        common = dict(num_tasks=s["num_tasks"], t_per_class=s["t_per_class"],
                      test_per_class=s["test_per_class"])
        if s["kind"] == "synthetic":
            return taskstream.reference_stream(
                d_in=s["d_in"], separation=s["separation"],
                stream_seed=s["stream_seed"], num_labels=s["num_labels"],
                samples_per_label=s["samples_per_label"], **common)
        streams = []
        for path in s["paths"]:
            pool = taskstream.load_embeddings(path, expected_d_in=s["d_in"])
            if s["protocol"] == "binary":
                seq = list(range(s["num_tasks"]))
                streams.append(taskstream.build_binary_tasks(
                    pool, seq, s["t_per_class"], s["test_per_class"],
                    seed=s["stream_seed"]))
            else:
                streams.append(taskstream.build_multiclass_tasks(
                    pool, s["num_tasks"], s["classes_per_task"],
                    s["per_class"], seed=s["stream_seed"]))
        if len(streams) == 1:
            return streams[0]
        return taskstream.merge_streams(streams, seed=s["stream_seed"])

    def knobs_for(self, label: str) -> MethodKnobs:
        entry = self._entry(label)
        knobs = MethodKnobs(
            backbone_layers=self.model["backbone_layers"],
            width=self.model["width"],
            bottleneck=entry.get("bottleneck", self.model["bottleneck"]),
            insertions=entry.get("insertions", self.model["insertions"]),
            pool_size=entry.get("pool_size", self.pool["pool_size"]),
            buffer_capacity=self.pool["buffer_capacity"],
            er_memory=self.er_memory,
            ewc_lambda=entry.get("lambda", 100.0),
            ewc_lambda_grid=tuple(entry["lambda_grid"])
            if "lambda_grid" in entry else None,
            eps=self.pool["eps"],
            adapter_width_multiplier=entry.get("adapter_width_multiplier", 1),
            train_cfg=trainer.TrainConfig(**self.train),
            distill_cfg=distill.DistillConfig(**self.distill),
        )
        if entry["tag"] != "ADA_K1" and knobs.adapter_width_multiplier != 1:
            knobs = replace(
                knobs,
                bottleneck=knobs.bottleneck * knobs.adapter_width_multiplier,
                adapter_width_multiplier=1)
        return knobs


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    return ExperimentConfig(raw)
