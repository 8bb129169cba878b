"""Corpus reading, pinned model loading, pooled encoding, and export."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import wire

POOLINGS = ("cls", "mean")
SIDECAR_FORMAT = "adae-sidecar"
SIDECAR_VERSION = 1


class ExportError(Exception):
    """Export cannot proceed (bad spec, model, or input)."""


@dataclass
class ExportSpec:
    model: str
    revision: str | None
    input_path: str
    pooling: str
    out_path: str
    batch_size: int = 32

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ExportError(f"pooling must be one of {POOLINGS}, "
                              f"got {self.pooling!r}")
        if self.batch_size < 1:
            raise ExportError("batch size must be >= 1")


def weight_fingerprint(model: torch.nn.Module) -> str:
    """sha256 over sorted parameter names and exact float bytes; serves
    as the revision pin for models loaded from a local directory."""
    h = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name].cpu().numpy()).tobytes())
    return h.hexdigest()


def load_encoder(model_id: str, revision: str | None):
    """(tokenizer, model, resolved_revision). Local directories are
    pinned by weight fingerprint; hub names pass the revision through."""
    from transformers import AutoModel, AutoTokenizer
    from transformers.utils import logging as hf_logging
    hf_logging.set_verbosity_error()
    hf_logging.disable_progress_bar()

    try:
        if os.path.isdir(model_id):
            tokenizer = AutoTokenizer.from_pretrained(model_id)
            model = AutoModel.from_pretrained(model_id)
        else:
            tokenizer = AutoTokenizer.from_pretrained(model_id,
                                                      revision=revision)
            model = AutoModel.from_pretrained(model_id, revision=revision)
    except Exception as exc:
        raise ExportError(f"cannot load model {model_id!r}: {exc}")
    model.eval()
    resolved = weight_fingerprint(model) if os.path.isdir(model_id) \
        else revision
    if os.path.isdir(model_id) and revision is not None \
            and revision != resolved:
        raise ExportError(
            f"revision mismatch for {model_id}: pinned {revision}, "
            f"weights hash to {resolved}")
    return tokenizer, model, resolved


def read_corpus(path: str) -> tuple[list[str], list[str], int]:
    """(texts, labels, skipped) from a CSV with text and label columns;
    rows missing either field are skipped and counted."""
    if os.path.isdir(path):
        raise ExportError(
            f"{path} is a directory; image-folder input is not supported, "
            f"provide a CSV with text,label columns")
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ExportError(f"cannot read corpus: {exc}")
    with fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "text" not in cols or "label" not in cols:
            raise ExportError(
                f"{path}: need text and label columns, found {cols}")
        texts, labels, skipped = [], [], 0
        for row in reader:
            text = (row.get("text") or "").strip()
            label = (row.get("label") or "").strip()
            if not text or not label:
                skipped += 1
                continue
            texts.append(text)
            labels.append(label)
    return texts, labels, skipped


def encode(texts: list[str], tokenizer, model, pooling: str,
           batch_size: int) -> np.ndarray:
    """One pooled float32 row per text from the final hidden states."""
    width = model.config.hidden_size
    if not texts:
        return np.zeros((0, width), dtype=np.float32)
    max_len = int(getattr(model.config, "max_position_embeddings", 512))
    out = []
    with torch.no_grad():
        for lo in range(0, len(texts), batch_size):
            batch = tokenizer(texts[lo:lo + batch_size], return_tensors="pt",
                              padding=True, truncation=True,
                              max_length=max_len)
            hidden = model(**batch).last_hidden_state
            if pooling == "cls":
                pooled = hidden[:, 0, :]
            else:
                mask = batch["attention_mask"].unsqueeze(-1).to(hidden.dtype)
                pooled = (hidden * mask).sum(1) / mask.sum(1).clamp(min=1.0)
            out.append(pooled.cpu().numpy().astype(np.float32))
    return np.concatenate(out, axis=0)


def export(spec: ExportSpec) -> dict:
    """Encode the corpus and write the ADAE file plus its sidecar;
    returns the sidecar contents."""
    tokenizer, model, resolved = load_encoder(spec.model, spec.revision)
    texts, raw_labels, skipped = read_corpus(spec.input_path)
    vocab = sorted(set(raw_labels))
    codes = {name: i for i, name in enumerate(vocab)}
    labels = np.array([codes[l] for l in raw_labels], dtype=np.uint32)
    features = encode(texts, tokenizer, model, spec.pooling, spec.batch_size)
    wire.write_adae(spec.out_path, features, labels, len(vocab))

    sidecar = {
        "format": SIDECAR_FORMAT,
        "version": SIDECAR_VERSION,
        "model": spec.model,
        "revision": resolved,
        "pooling": spec.pooling,
        "batch_size": spec.batch_size,
        "input": os.path.abspath(spec.input_path),
        "n": int(len(texts)),
        "d": int(features.shape[1]),
        "label_vocab": vocab,
        "label_arity": len(vocab),
        "skipped_rows": skipped,
    }
    tmp = f"{spec.out_path}.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
    os.replace(tmp, f"{spec.out_path}.json")
    return sidecar
