"""External key-value semantic memory: build, query, persist.

Keys are unit-norm embeddings of clean reference images taken from the
model's own projection branch (run with an all-ones mask); values are object
name strings. Retrieval is cosine top-K with name de-duplication and null
padding, and is a pure selection: no gradient flows through it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyKnowledgeBase,
    EmptyRefs,
    NormViolation,
    SchemaViolation,
)


@dataclass
class KnowledgeBase:
    dim: int
    entries: list                    # ordered [(key ndarray (dim,), name str), ...]

    def validate(self):
        for i, (key, name) in enumerate(self.entries):
            if key.shape != (self.dim,):
                raise DimensionMismatch(f"entry {i}: key dim {key.shape} != {self.dim}")
            n = float(np.linalg.norm(key.astype(np.float64)))
            if abs(n - 1.0) > 1e-6:
                raise NormViolation(f"entry {i} ({name!r}): |key| = {n:.8f}")
            if not isinstance(name, str):
                raise SchemaViolation(f"entry {i}: name must be a string")

    def keys_matrix(self):
        return np.stack([k for k, _ in self.entries]).astype(np.float64)

    def names(self):
        return [n for _, n in self.entries]


@dataclass
class RetrievedContext:
    names: list                      # exactly K strings, "" pads
    scores: list                     # K floats in [-1, 1], non-increasing
    indices: list                    # KB entry index per slot, -1 for pads

    def nullified(self):
        """The retrieval-performed-but-names-nulled ablation variant."""
        return RetrievedContext([""] * len(self.names), list(self.scores), list(self.indices))


def normalized_query(q_rows):
    """L2-normalized mean of the projection query rows (float64)."""
    q = np.asarray(q_rows, dtype=np.float64).mean(axis=0)
    n = np.linalg.norm(q)
    return q / n if n > 0 else q


def retrieve(q_rows, kb: KnowledgeBase, k=9) -> RetrievedContext:
    """Top-k by cosine similarity with dedup and null padding.

    Ranking is by descending score with ties broken toward the lower entry
    index; duplicate non-null names keep only their highest-scoring
    occurrence; the result is truncated or padded to exactly k slots with
    the null name "" at score -1.
    """
    if not kb.entries:
        raise EmptyKnowledgeBase("knowledge base has no entries")
    if k < 1:
        raise ValueError("k must be >= 1")
    q_rows = np.asarray(q_rows if not hasattr(q_rows, "data") else q_rows.data)
    if q_rows.ndim != 2 or q_rows.shape[1] != kb.dim:
        raise DimensionMismatch(f"query rows {q_rows.shape} vs kb dim {kb.dim}")
    q = normalized_query(q_rows)
    scores = kb.keys_matrix() @ q
    order = np.argsort(-scores, kind="stable")
    names, out_scores, indices = [], [], []
    seen = set()
    for i in order:
        name = kb.entries[i][1]
        if name != "":
            if name in seen:
                continue
            seen.add(name)
        names.append(name)
        out_scores.append(float(scores[i]))
        indices.append(int(i))
        if len(names) == k:
            break
    while len(names) < k:
        names.append("")
        out_scores.append(-1.0)
        indices.append(-1)
    return RetrievedContext(names, out_scores, indices)


def build_kb(model, refs) -> KnowledgeBase:
    """Embed clean reference images through the projection branch.

    refs: iterable of (image (h, w, 3) in [0, 1], name). Each key is the
    L2-normalized mean of the projection query rows computed with an
    all-ones mask; entry order follows ref order.
    """
    refs = list(refs)
    if not refs:
        raise EmptyRefs("no reference images")
    entries = []
    for image, name in refs:
        rows = model.projection_queries_clean(image)
        key = normalized_query(rows)
        entries.append((key.astype(np.float32), name))
    kb = KnowledgeBase(int(entries[0][0].shape[0]), entries)
    kb.validate()
    return kb


def save_kb(kb: KnowledgeBase, path, config_snapshot=None):
    doc = {
        "dim": kb.dim,
        "entries": [{"name": name, "key": [float(x) for x in key]} for key, name in kb.entries],
    }
    if config_snapshot is not None:
        doc["config"] = config_snapshot
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_kb(path) -> KnowledgeBase:
    if not os.path.exists(path):
        raise SchemaViolation(f"knowledge base file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaViolation(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict) or "dim" not in doc or "entries" not in doc:
        raise SchemaViolation(f"{path}: expected keys 'dim' and 'entries'")
    unknown = set(doc) - {"dim", "entries", "config"}
    if unknown:
        raise SchemaViolation(f"{path}: unknown key(s) {sorted(unknown)}")
    entries = []
    for i, e in enumerate(doc["entries"]):
        if "name" not in e or "key" not in e:
            raise SchemaViolation(f"{path}: entry {i} missing 'name' or 'key'")
        entries.append((np.asarray(e["key"], dtype=np.float32), e["name"]))
    kb = KnowledgeBase(int(doc["dim"]), entries)
    kb.validate()
    return kb
