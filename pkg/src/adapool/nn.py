"""Dense numerical core: parameter collections, layer forward/backward, losses, Adam.

Everything runs in float64 on numpy arrays. Forward passes optionally record
onto a Trace; backward() walks the trace in reverse and hand-derives the
gradient of each layer kind. The layer family is fixed (linear, residual
dense, residual bottleneck, elementwise activations, softmax), which keeps
the derivatives small enough to verify against finite differences.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError, UsageError

Array = np.ndarray


def as_batch(x) -> tuple[Array, bool]:
    """Return (2-d float64 view, was_vector)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        return a[None, :], True
    if a.ndim == 2:
        return a, False
    raise DimensionError(f"expected 1-d or 2-d array, got shape {a.shape}")


class ParamSet:
    """Named collection of float64 arrays with per-entry frozen flags.

    Frozen entries are never touched by the optimizer and receive no
    gradient entries from backward().
    """

    def __init__(self):
        self._values: dict[str, Array] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, value, frozen: bool = False) -> None:
        if name in self._values:
            raise UsageError(f"duplicate parameter name {name!r}")
        self._values[name] = np.array(value, dtype=np.float64)
        if frozen:
            self._frozen.add(name)

    def __getitem__(self, name: str) -> Array:
        return self._values[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._values:
            raise UsageError(f"unknown parameter {name!r}")
        self._values[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def names(self):
        return list(self._values)

    def items(self):
        return self._values.items()

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable_names(self):
        return [n for n in self._values if n not in self._frozen]

    def freeze_all(self) -> None:
        self._frozen = set(self._values)

    def unfreeze_all(self) -> None:
        self._frozen = set()

    def num_params(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParamSet":
        ps = ParamSet()
        for name, value in self._values.items():
            ps.add(name, value.copy(), frozen=name in self._frozen)
        return ps

    def state_dict(self) -> dict:
        return {"values": {n: v.copy() for n, v in self._values.items()},
                "frozen": sorted(self._frozen)}

    @classmethod
    def from_state_dict(cls, d: dict) -> "ParamSet":
        ps = cls()
        frozen = set(d["frozen"])
        for name, value in d["values"].items():
            ps.add(name, value, frozen=name in frozen)
        return ps

    def byte_hash(self) -> str:
        """sha256 over names, shapes and raw little-endian bytes."""
        h = hashlib.sha256()
        for name in sorted(self._values):
            v = np.ascontiguousarray(self._values[name], dtype="<f8")
            h.update(name.encode())
            h.update(str(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# activations

_ACTIVATIONS = ("relu", "tanh", "gelu", "sigmoid", "identity")


def act_forward(kind: str, z: Array) -> Array:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "gelu":
        return 0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "identity":
        return z
    raise UsageError(f"unknown activation {kind!r}")


def act_backward(kind: str, z: Array, a: Array, da: Array) -> Array:
    """dz given upstream da; `a` is the stored activation output."""
    if kind == "relu":
        return np.where(z > 0.0, da, 0.0)
    if kind == "tanh":
        return da * (1.0 - a * a)
    if kind == "gelu":
        phi = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
        return da * (0.5 * (1.0 + erf(z / np.sqrt(2.0))) + z * phi)
    if kind == "sigmoid":
        return da * a * (1.0 - a)
    if kind == "identity":
        return da
    raise UsageError(f"unknown activation {kind!r}")


def sigmoid(z: Array) -> Array:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: Array) -> Array:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# traced layers

class Trace:
    """Recorded forward pass, consumed once by backward()."""

    def __init__(self):
        self.records: list[tuple] = []
        self.consumed = False


def linear_forward(x, W, b):
    """Wx + b for a single vector, or X W^T + b for a batch."""
    X, was_vec = as_batch(x)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or X.shape[1] != W.shape[1]:
        raise DimensionError(
            f"linear: input dim {X.shape[1]} vs weight {W.shape}"
        )
    if b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias shape {b.shape} vs {W.shape[0]}")
    Y = X @ W.T + b
    return Y[0] if was_vec else Y


def linear(trace, X, ps: ParamSet, wname: str, bname: str) -> Array:
    W, b = ps[wname], ps[bname]
    if X.shape[1] != W.shape[1]:
        raise DimensionError(f"linear {wname}: {X.shape[1]} vs {W.shape}")
    Y = X @ W.T + b
    if trace is not None:
        trace.records.append(("linear", ps, wname, bname, X))
    return Y


def residual_dense(trace, X, ps: ParamSet, wname: str, bname: str,
                   activation: str = "tanh") -> Array:
    """X + act(X W^T + b); the residual keeps deep frozen stacks stable."""
    W, b = ps[wname], ps[bname]
    if X.shape[1] != W.shape[1] or W.shape[0] != W.shape[1]:
        raise DimensionError(f"residual_dense {wname}: {X.shape[1]} vs {W.shape}")
    Z = X @ W.T + b
    A = act_forward(activation, Z)
    Y = X + A
    if trace is not None:
        trace.records.append(("residual_dense", ps, wname, bname, activation, X, Z, A))
    return Y


def bottleneck(trace, X, ps: ParamSet, prefix: str, activation: str = "relu") -> Array:
    """Residual bottleneck: X + act(X Wd^T + bd) Wu^T + bu."""
    Wd, bd = ps[prefix + "W_down"], ps[prefix + "b_down"]
    Wu, bu = ps[prefix + "W_up"], ps[prefix + "b_up"]
    if X.shape[1] != Wd.shape[1] or Wu.shape[0] != X.shape[1]:
        raise DimensionError(f"bottleneck {prefix}: input {X.shape[1]} vs "
                             f"down {Wd.shape} up {Wu.shape}")
    Z = X @ Wd.T + bd
    U = act_forward(activation, Z)
    Y = X + U @ Wu.T + bu
    if trace is not None:
        trace.records.append(("bottleneck", ps, prefix, activation, X, Z, U))
    return Y


def activation_layer(trace, X, kind: str) -> Array:
    A = act_forward(kind, X) if kind != "softmax" else softmax(X)
    if trace is not None:
        trace.records.append(("activation", kind, X, A))
    return A


class Grads:
    """Gradients grouped by owning ParamSet (non-frozen entries only)."""

    def __init__(self):
        self._store: dict[int, tuple[ParamSet, dict[str, Array]]] = {}

    def accumulate(self, ps: ParamSet, name: str, g: Array) -> None:
        key = id(ps)
        if key not in self._store:
            self._store[key] = (ps, {})
        slot = self._store[key][1]
        if name in slot:
            slot[name] = slot[name] + g
        else:
            slot[name] = g

    def by_set(self):
        return [(ps, gs) for ps, gs in self._store.values()]

    def for_set(self, ps: ParamSet) -> dict[str, Array]:
        entry = self._store.get(id(ps))
        return entry[1] if entry is not None else {}


def backward(trace: Trace, d_out: Array) -> tuple[Grads, Array]:
    """Walk the trace in reverse; returns (grads, d_input).

    Frozen parameters get no gradient entry but still propagate d_input.
    """
    if trace is None or trace.consumed:
        raise UsageError("backward() needs a fresh recorded forward trace")
    if not trace.records:
        raise UsageError("backward() on an empty trace")
    trace.consumed = True
    grads = Grads()
    dY = np.asarray(d_out, dtype=np.float64)
    for rec in reversed(trace.records):
        kind = rec[0]
        if kind == "linear":
            _, ps, wname, bname, X = rec
            W = ps[wname]
            if not ps.is_frozen(wname):
                grads.accumulate(ps, wname, dY.T @ X)
            if not ps.is_frozen(bname):
                grads.accumulate(ps, bname, dY.sum(axis=0))
            dY = dY @ W
        elif kind == "residual_dense":
            _, ps, wname, bname, activation, X, Z, A = rec
            W = ps[wname]
            dA = dY
            dZ = act_backward(activation, Z, A, dA)
            if not ps.is_frozen(wname):
                grads.accumulate(ps, wname, dZ.T @ X)
            if not ps.is_frozen(bname):
                grads.accumulate(ps, bname, dZ.sum(axis=0))
            dY = dY + dZ @ W
        elif kind == "bottleneck":
            _, ps, prefix, activation, X, Z, U = rec
            Wd = ps[prefix + "W_down"]
            Wu = ps[prefix + "W_up"]
            dU = dY @ Wu
            dZ = act_backward(activation, Z, U, dU)
            if not ps.is_frozen(prefix + "W_up"):
                grads.accumulate(ps, prefix + "W_up", dY.T @ U)
            if not ps.is_frozen(prefix + "b_up"):
                grads.accumulate(ps, prefix + "b_up", dY.sum(axis=0))
            if not ps.is_frozen(prefix + "W_down"):
                grads.accumulate(ps, prefix + "W_down", dZ.T @ X)
            if not ps.is_frozen(prefix + "b_down"):
                grads.accumulate(ps, prefix + "b_down", dZ.sum(axis=0))
            dY = dY + dZ @ Wd
        elif kind == "activation":
            _, akind, X, A = rec
            if akind == "softmax":
                dY = A * (dY - (dY * A).sum(axis=-1, keepdims=True))
            else:
                dY = act_backward(akind, X, A, dY)
        else:  # pragma: no cover
            raise UsageError(f"unknown trace record {kind!r}")
    return grads, dY


# ---------------------------------------------------------------------------
# losses (scalar value + gradient w.r.t. the prediction)

def mse(pred, target) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"mse: {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


def mse_grad(pred, target) -> Array:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    return 2.0 * (p - t) / p.size


def binary_cross_entropy(logits, labels) -> float:
    """Sigmoid cross-entropy on raw logits, mean over the batch."""
    l = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if l.shape != y.shape:
        raise DimensionError(f"bce: {l.shape} vs {y.shape}")
    if np.any((y != 0.0) & (y != 1.0)):
        raise UsageError("bce labels must be 0 or 1")
    # log(1+e^-|l|) + max(l,0) - l*y is the stable form
    per = np.log1p(np.exp(-np.abs(l))) + np.maximum(l, 0.0) - l * y
    return float(per.mean())


def binary_cross_entropy_grad(logits, labels) -> Array:
    l = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(l.shape)
    return (sigmoid(l) - y) / l.size


def softmax_cross_entropy(logits, labels) -> float:
    Z, _ = as_batch(logits)
    y = np.asarray(labels).reshape(-1)
    n, c = Z.shape
    if y.shape[0] != n:
        raise DimensionError(f"softmax_ce: {n} rows vs {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= c):
        raise UsageError(f"softmax_ce label out of range [0, {c})")
    shifted = Z - Z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    per = logsumexp - shifted[np.arange(n), y]
    return float(per.mean())


def softmax_cross_entropy_grad(logits, labels) -> Array:
    Z, _ = as_batch(logits)
    y = np.asarray(labels).reshape(-1)
    n = Z.shape[0]
    P = softmax(Z)
    P[np.arange(n), y] -= 1.0
    return P / n


# ---------------------------------------------------------------------------
# Adam

class AdamState:
    """Moment accumulators for the trainable entries of one ParamSet."""

    def __init__(self, ps: ParamSet, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise UsageError("adam lr must be > 0")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {n: np.zeros_like(ps[n]) for n in ps.trainable_names()}
        self.v = {n: np.zeros_like(ps[n]) for n in ps.trainable_names()}

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "step": self.step,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    @classmethod
    def from_state_dict(cls, ps: ParamSet, d: dict) -> "AdamState":
        st = cls(ps, d["lr"], d["beta1"], d["beta2"], d["eps"])
        st.step = d["step"]
        st.m = {k: np.array(v) for k, v in d["m"].items()}
        st.v = {k: np.array(v) for k, v in d["v"].items()}
        return st


def adam_step(ps: ParamSet, grads: dict[str, Array], state: AdamState,
              lr: float | None = None) -> None:
    """One bias-corrected Adam update over the given gradient entries.

    Frozen entries are skipped; a non-finite gradient aborts the whole
    step before any parameter is touched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
    step_lr = state.lr if lr is None else lr
    if step_lr <= 0:
        raise UsageError("adam lr must be > 0")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        if ps.is_frozen(name):
            continue
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        ps[name] = ps[name] - step_lr * update
