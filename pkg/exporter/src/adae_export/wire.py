"""ADAE v1 wire format: reader, atomic writer, and a structural checker.

Layout (little-endian): magic "ADAE", u32 version = 1, u64 record count
n, u32 feature width d, u32 label arity, then n records of (u32 label,
d float32 features). File length is exactly 24 + n * (4 + 4 * d).
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"ADAE"
VERSION = 1
_HEADER = struct.Struct("<4sIQII")
HEADER_SIZE = _HEADER.size


class WireError(Exception):
    """Malformed ADAE input."""


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("x", "<f4", (d,))])


def write_adae(path, features: np.ndarray, labels: np.ndarray,
               label_arity: int) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    feats = np.ascontiguousarray(features, dtype="<f4")
    labs = np.ascontiguousarray(labels, dtype="<u4")
    if feats.ndim != 2:
        raise ValueError(f"features must be 2-d, got shape {feats.shape}")
    n, d = feats.shape
    if labs.shape != (n,):
        raise ValueError(f"labels shape {labs.shape} does not match {n} rows")
    if label_arity < 0:
        raise ValueError("label arity must be >= 0")
    if label_arity > 0 and n and labs.max() >= label_arity:
        raise ValueError("label out of range for declared arity")
    if label_arity == 0 and n and labs.max() != 0:
        raise ValueError("unlabeled files must carry all-zero labels")

    records = np.zeros(n, dtype=_record_dtype(d))
    records["label"] = labs
    records["x"] = feats
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d, label_arity))
        fh.write(records.tobytes())
    os.replace(tmp, path)


def read_adae(path) -> tuple[np.ndarray, np.ndarray, int]:
    """(float32 features, int labels, label arity); raises WireError on
    any structural problem, naming the byte offset."""
    with open(path, "rb") as fh:
        blob = fh.read()
    findings = check_structure(blob)
    if findings:
        first = findings[0]
        raise WireError(f"offset {first['offset']}: {first['message']}")
    _, _, n, d, arity = _HEADER.unpack_from(blob)
    records = np.frombuffer(blob, dtype=_record_dtype(d), count=n,
                            offset=HEADER_SIZE)
    return records["x"].reshape(n, d).copy(), \
        records["label"].astype(np.int64), arity


def check_structure(blob: bytes) -> list[dict]:
    """Structural findings only (magic, version, length, label range);
    each finding carries a byte offset."""
    if len(blob) < HEADER_SIZE:
        return [{"offset": len(blob),
                 "message": f"truncated header ({len(blob)} of "
                            f"{HEADER_SIZE} bytes)"}]
    magic, version, n, d, arity = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        return [{"offset": 0, "message": f"bad magic {magic!r}"}]
    if version != VERSION:
        return [{"offset": 4, "message": f"unsupported version {version}"}]
    expected = HEADER_SIZE + n * (4 + 4 * d)
    if len(blob) != expected:
        return [{"offset": min(len(blob), expected),
                 "message": f"length {len(blob)} != expected {expected}"}]
    findings = []
    if arity > 0:
        records = np.frombuffer(blob, dtype=_record_dtype(d), count=n,
                                offset=HEADER_SIZE)
        bad = np.nonzero(records["label"] >= arity)[0]
        for i in bad:
            findings.append({
                "offset": HEADER_SIZE + int(i) * (4 + 4 * d),
                "message": f"record {int(i)}: label "
                           f"{int(records['label'][i])} >= arity {arity}"})
    return findings


def scan_features(path) -> list[dict]:
    """Row indexes with non-finite features (assumes structure is valid)."""
    feats, _, _ = read_adae(path)
    rows = np.nonzero(~np.isfinite(feats).all(axis=1))[0]
    return [{"row": int(i), "message": "non-finite feature"} for i in rows]
