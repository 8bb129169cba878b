"""Sequential task construction: synthetic labeled pools, binary and
multi-class protocols, embedding-file ingestion.

Streams are immutable once built. Every covariate is used at most once
across a whole stream: draws remove rows from the pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adae import read_adae
from .errors import ConfigError, DataError, UsageError
from .rng import rng_for


@dataclass(frozen=True)
class Task:
    id: int
    arity: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    label_names: tuple = ()

    @property
    def d_in(self) -> int:
        return self.x_train.shape[1]


class LabeledPool:
    """Label -> remaining sample rows; draws consume without replacement."""

    def __init__(self, features: np.ndarray, labels: np.ndarray):
        X = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise UsageError(f"pool shapes {X.shape} / {y.shape} do not conform")
        if X.size and not np.all(np.isfinite(X)):
            raise DataError("pool contains non-finite covariates")
        self.features = X
        self._remaining: dict[int, list[int]] = {}
        for i, lab in enumerate(y):
            self._remaining.setdefault(int(lab), []).append(i)

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def labels(self) -> list[int]:
        return sorted(self._remaining)

    def count(self, label: int) -> int:
        return len(self._remaining.get(label, []))

    def draw(self, label: int, k: int, rng: np.random.Generator) -> np.ndarray:
        """Remove and return k rows of one label, uniformly without replacement."""
        avail = self._remaining.get(label, [])
        if len(avail) < k:
            raise DataError(f"label {label} exhausted: {len(avail)} left, need {k}")
        picked = rng.choice(len(avail), size=k, replace=False)
        keep = np.ones(len(avail), dtype=bool)
        keep[picked] = False
        rows = [avail[i] for i in picked]
        self._remaining[label] = [a for a, kp in zip(avail, keep) if kp]
        return self.features[rows].copy()

    def draw_union(self, labels, k: int, rng: np.random.Generator) -> np.ndarray:
        """Remove and return k rows drawn uniformly over the union of labels."""
        pairs = [(lab, i) for lab in labels for i in self._remaining.get(lab, [])]
        if len(pairs) < k:
            raise DataError(
                f"labels {sorted(set(labels))} exhausted: {len(pairs)} left, need {k}")
        picked = rng.choice(len(pairs), size=k, replace=False)
        rows = [pairs[i][1] for i in picked]
        removed: dict[int, set[int]] = {}
        for i in picked:
            lab, row = pairs[i]
            removed.setdefault(lab, set()).add(row)
        for lab, gone in removed.items():
            self._remaining[lab] = [r for r in self._remaining[lab] if r not in gone]
        return self.features[rows].copy()


CLUSTER_STD = 1.0


def gen_synthetic(num_labels: int, d_in: int, cluster_separation: float,
                  samples_per_label: int, seed) -> LabeledPool:
    """Isotropic Gaussian clusters (std CLUSTER_STD) with means on a sphere
    of radius `cluster_separation`."""
    if cluster_separation < 0:
        raise UsageError("cluster_separation must be >= 0")
    if num_labels < 1 or samples_per_label < 1 or d_in < 1:
        raise UsageError("num_labels, d_in, samples_per_label must be positive")
    rng = np.random.default_rng(seed)
    feats = np.empty((num_labels * samples_per_label, d_in))
    labels = np.repeat(np.arange(num_labels), samples_per_label)
    for lab in range(num_labels):
        v = rng.normal(size=d_in)
        mean = cluster_separation * v / np.linalg.norm(v)
        block = slice(lab * samples_per_label, (lab + 1) * samples_per_label)
        feats[block] = mean + CLUSTER_STD * rng.normal(
            size=(samples_per_label, d_in))
    return LabeledPool(feats, labels)


def load_embeddings(path, expected_d_in: int | None = None) -> LabeledPool:
    feats, labels, _ = read_adae(path)
    if expected_d_in is not None and feats.shape[1] != expected_d_in:
        raise ConfigError(
            f"{path}: feature width {feats.shape[1]} != configured {expected_d_in}")
    return LabeledPool(feats, labels)


def _shuffled(x, y, rng):
    order = rng.permutation(len(y))
    return x[order], y[order]


def build_binary_tasks(pool: LabeledPool, label_sequence, t_per_class: int,
                       test_per_class: int, seed) -> list[Task]:
    """One balanced binary task per sequence label.

    Task n's positives come from sequence label n; its negatives are drawn
    uniformly over the remaining samples of labels 1..n-1. Task 1, having
    no predecessor, draws negatives from the pool labels outside the
    sequence, or from the other sequence labels if there are none.
    """
    seq = list(label_sequence)
    if len(seq) < 2:
        raise UsageError("binary protocol needs at least 2 sequence labels")
    if len(set(seq)) != len(seq):
        raise UsageError("label_sequence has duplicates")
    if t_per_class < 1 or test_per_class < 0:
        raise UsageError("t_per_class must be >= 1, test_per_class >= 0")
    rng = np.random.default_rng(seed)
    need = t_per_class + test_per_class
    outside = [lab for lab in pool.labels() if lab not in set(seq)]
    tasks = []
    for n, pos_label in enumerate(seq, start=1):
        pos = pool.draw(pos_label, need, rng)
        if n == 1:
            neg_source = outside if outside else seq[1:]
        else:
            neg_source = seq[:n - 1]
        neg = pool.draw_union(neg_source, need, rng)
        x_train = np.concatenate([pos[:t_per_class], neg[:t_per_class]])
        y_train = np.concatenate([np.ones(t_per_class, dtype=np.int64),
                                  np.zeros(t_per_class, dtype=np.int64)])
        x_train, y_train = _shuffled(x_train, y_train, rng)
        x_test = np.concatenate([pos[t_per_class:], neg[t_per_class:]])
        y_test = np.concatenate([np.ones(test_per_class, dtype=np.int64),
                                 np.zeros(test_per_class, dtype=np.int64)])
        tasks.append(Task(id=n, arity=2, x_train=x_train, y_train=y_train,
                          x_test=x_test, y_test=y_test,
                          label_names=(pos_label,)))
    return tasks


def build_multiclass_tasks(pool: LabeledPool, num_tasks: int,
                           classes_per_task: int = 5, per_class: int = 50,
                           seed=0) -> list[Task]:
    """Balanced c-way tasks over fresh labels, per_class train + per_class test."""
    c = classes_per_task
    if c < 2:
        raise UsageError(f"classes_per_task must be >= 2, got {c}")
    if num_tasks < 1 or per_class < 1:
        raise UsageError("num_tasks and per_class must be positive")
    rng = np.random.default_rng(seed)
    eligible = [lab for lab in pool.labels() if pool.count(lab) >= 2 * per_class]
    if len(eligible) < num_tasks * c:
        raise DataError(
            f"need {num_tasks * c} labels with >= {2 * per_class} samples, "
            f"have {len(eligible)}")
    order = rng.permutation(len(eligible))
    chosen = [eligible[i] for i in order[:num_tasks * c]]
    tasks = []
    for n in range(1, num_tasks + 1):
        labs = chosen[(n - 1) * c:n * c]
        xs_train, ys_train, xs_test, ys_test = [], [], [], []
        for cls, lab in enumerate(labs):
            rows = pool.draw(lab, 2 * per_class, rng)
            xs_train.append(rows[:per_class])
            ys_train.append(np.full(per_class, cls, dtype=np.int64))
            xs_test.append(rows[per_class:])
            ys_test.append(np.full(per_class, cls, dtype=np.int64))
        x_train, y_train = _shuffled(np.concatenate(xs_train),
                                     np.concatenate(ys_train), rng)
        tasks.append(Task(id=n, arity=c, x_train=x_train, y_train=y_train,
                          x_test=np.concatenate(xs_test),
                          y_test=np.concatenate(ys_test),
                          label_names=tuple(labs)))
    return tasks


def merge_streams(streams, seed) -> list[Task]:
    """Interleave several streams in a seeded order, renumbering task ids."""
    all_tasks = [t for s in streams for t in s]
    if not all_tasks:
        raise UsageError("merge_streams needs at least one task")
    widths = {t.d_in for t in all_tasks}
    if len(widths) > 1:
        raise UsageError(f"cannot merge streams of different widths {sorted(widths)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(all_tasks))
    merged = []
    for new_id, i in enumerate(order, start=1):
        t = all_tasks[i]
        merged.append(Task(id=new_id, arity=t.arity, x_train=t.x_train,
                           y_train=t.y_train, x_test=t.x_test, y_test=t.y_test,
                           label_names=t.label_names))
    return merged


def reference_stream(num_tasks: int = 20, d_in: int = 64,
                     separation: float = 4.0, t_per_class: int = 50,
                     test_per_class: int = 50, stream_seed: int = 7,
                     num_labels: int | None = None,
                     samples_per_label: int | None = None) -> list[Task]:
    """The fixed synthetic binary stream used by the evaluation defaults."""
    if num_labels is None:
        num_labels = num_tasks + 2
    if samples_per_label is None:
        samples_per_label = 4 * (t_per_class + test_per_class)
    pool = gen_synthetic(num_labels, d_in, separation, samples_per_label,
                         rng_for(stream_seed, "stream-gen", "pool"))
    return build_binary_tasks(pool, list(range(num_labels - 2)), t_per_class,
                              test_per_class,
                              rng_for(stream_seed, "stream-gen", "tasks"))
