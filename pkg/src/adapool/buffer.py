"""Capacity-bounded unlabeled covariate memory filled by reservoir sampling.

Classic algorithm-R law: item i (0-based over the whole stream) draws
j ~ uniform{0..i}; once the buffer is full it replaces slot j iff j < M.
Batched calls draw all j values in one generator call and apply
replacements in stream order (later items overwrite earlier ones that
landed on the same slot), which is equivalent to the one-by-one loop.
"""

from __future__ import annotations

import numpy as np

from .adae import write_adae
from .errors import UsageError


class DistillBuffer:
    def __init__(self, capacity: int, d_in: int, rng: np.random.Generator):
        if capacity < 1 or d_in < 1:
            raise UsageError("buffer needs capacity >= 1 and d_in >= 1")
        self.capacity = capacity
        self.d_in = d_in
        self.rng = rng
        # zeros, not empty: checkpoints snapshot the whole array, so the
        # unused tail must be deterministic
        self.items = np.zeros((capacity, d_in), dtype=np.float64)
        self.n_seen = 0

    @property
    def size(self) -> int:
        return min(self.n_seen, self.capacity)

    def add(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.d_in,):
            raise UsageError(f"buffer add: shape {x.shape} vs d_in {self.d_in}")
        self.extend(x[None, :])

    def extend(self, X) -> None:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.d_in:
            raise UsageError(f"buffer extend: shape {X.shape} vs d_in {self.d_in}")
        k = X.shape[0]
        if k == 0:
            return
        fill = min(k, max(self.capacity - self.n_seen, 0))
        if fill:
            self.items[self.n_seen:self.n_seen + fill] = X[:fill]
        if fill < k:
            start = self.n_seen + fill
            js = self.rng.integers(0, np.arange(start + 1, start + (k - fill) + 1))
            accept = js < self.capacity
            # duplicate slots: plain fancy assignment keeps the last write,
            # matching the sequential one-item-at-a-time law
            self.items[js[accept]] = X[fill:][accept]
        self.n_seen += k

    def snapshot(self) -> np.ndarray:
        return self.items[:self.size].copy()

    def dump_adae(self, path) -> None:
        rows = self.snapshot()
        write_adae(path, rows, np.zeros(len(rows), dtype=np.int64), label_arity=0)

    def state(self) -> dict:
        return {
            "capacity": self.capacity,
            "d_in": self.d_in,
            "items": self.items.copy(),
            "n_seen": self.n_seen,
            "rng_state": self.rng.bit_generator.state,
        }

    @classmethod
    def restore(cls, st: dict) -> "DistillBuffer":
        rng = np.random.default_rng()
        rng.bit_generator.state = st["rng_state"]
        buf = cls(st["capacity"], st["d_in"], rng)
        buf.items = np.array(st["items"], dtype=np.float64)
        buf.n_seen = st["n_seen"]
        return buf
