"""Class-name to text-embedding bank for open-vocabulary classification.

A class may carry several prompt subclasses (e.g. building -> building,
house, roof); the classifier takes the best-scoring subclass per class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import rng
from .tensorio import FormatError, load_tensor, save_tensor


@dataclass
class TextEmbeddingBank:
    classes: list[str]
    subclass_names: list[list[str]]
    subclass_embeddings: list[np.ndarray]   # per class: (n_sub, c), unit rows
    normalized_on_load: bool = False

    @property
    def dim(self) -> int:
        return self.subclass_embeddings[0].shape[1]

    def stacked(self):
        """(all_subclasses, c) matrix plus the owning class index per row."""
        owner = np.concatenate([np.full(len(n), i) for i, n in enumerate(self.subclass_names)])
        return np.concatenate(self.subclass_embeddings, axis=0), owner


def load_text_bank(manifest_path, embeddings_path) -> TextEmbeddingBank:
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    classes = []
    subclass_names = []
    for entry in manifest["classes"]:
        subs = entry.get("subclasses") or [entry["name"]]
        if not subs:
            raise FormatError(f"class {entry['name']!r} has no subclasses")
        classes.append(entry["name"])
        subclass_names.append(list(subs))
    rows = load_tensor(embeddings_path)
    total = sum(len(s) for s in subclass_names)
    if rows.ndim != 2 or rows.shape[0] != total:
        raise FormatError(
            f"{embeddings_path}: expected {total} embedding rows for manifest, got shape {rows.shape}")
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    if np.any(norms == 0):
        bad = int(np.argmax(norms == 0))
        raise FormatError(f"{embeddings_path}: zero embedding at row {bad}")
    normalized = bool(np.any(np.abs(norms - 1.0) > 1e-5))
    if normalized:
        rows = (rows.astype(np.float64) / norms[:, None]).astype(np.float32)
    embeddings = []
    pos = 0
    for subs in subclass_names:
        embeddings.append(rows[pos:pos + len(subs)])
        pos += len(subs)
    return TextEmbeddingBank(classes, subclass_names, embeddings, normalized_on_load=normalized)


def write_toy_bank(manifest_path, embeddings_path, class_spec: list[tuple[str, list[str]]],
                   dim: int, seed: int) -> None:
    """Seeded random unit embeddings for a class/subclass table."""
    manifest = {"classes": [{"name": name, "subclasses": subs} for name, subs in class_spec]}
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    total = sum(len(subs) for _, subs in class_spec)
    save_tensor(embeddings_path, rng.unit_rows(seed, total, dim))
