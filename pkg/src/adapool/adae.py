"""ADAE embedding file format.

Little-endian layout: magic "ADAE", u32 version (=1), u64 row count n,
u32 feature width d_in, u32 label_arity, then n records of
(u32 label, d_in x f32 features). label_arity 0 marks an unlabeled dump
(all labels written as 0). Total length is 24 + n x (4 + 4 d_in) bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError, FormatError, UsageError

MAGIC = b"ADAE"
VERSION = 1
_HEADER = struct.Struct("<4sIQII")
HEADER_SIZE = _HEADER.size  # 24


def _record_dtype(d_in: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("x", "<f4", (d_in,))])


def write_adae(path, features, labels, label_arity: int) -> None:
    X = np.asarray(features)
    y = np.asarray(labels)
    if X.ndim != 2:
        raise UsageError(f"features must be 2-d, got shape {X.shape}")
    n, d_in = X.shape
    if y.shape != (n,):
        raise UsageError(f"labels shape {y.shape} vs {n} rows")
    if label_arity < 0:
        raise UsageError("label_arity must be >= 0")
    if np.any(y < 0):
        raise UsageError("negative label")
    if label_arity > 0 and np.any(y >= label_arity):
        raise UsageError(f"label >= arity {label_arity}")
    if label_arity == 0 and np.any(y != 0):
        raise UsageError("unlabeled file (arity 0) requires all-zero labels")
    rec = np.zeros(n, dtype=_record_dtype(d_in))
    rec["label"] = y
    rec["x"] = X.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d_in, label_arity))
        fh.write(rec.tobytes())


def read_adae(path) -> tuple[np.ndarray, np.ndarray, int]:
    """Returns (features float64 [n,d_in], labels int64 [n], label_arity)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0")
    if len(data) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header at byte offset {len(data)}")
    _, version, n, d_in, arity = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    expected = HEADER_SIZE + n * (4 + 4 * d_in)
    if len(data) != expected:
        raise FormatError(
            f"{path}: length {len(data)} != expected {expected} "
            f"(mismatch from byte offset {min(len(data), expected)})")
    rec = np.frombuffer(data, dtype=_record_dtype(d_in), count=n,
                        offset=HEADER_SIZE)
    labels = rec["label"].astype(np.int64)
    feats = rec["x"].astype(np.float64).reshape(n, d_in)
    if arity > 0:
        bad = np.nonzero(labels >= arity)[0]
        if bad.size:
            i = int(bad[0])
            off = HEADER_SIZE + i * (4 + 4 * d_in)
            raise FormatError(
                f"{path}: record {i} label {labels[i]} >= arity {arity} "
                f"at byte offset {off}")
    if not np.all(np.isfinite(feats)):
        i = int(np.nonzero(~np.isfinite(feats).all(axis=1))[0][0])
        raise DataError(f"{path}: non-finite feature in record {i}")
    return feats, labels, arity
