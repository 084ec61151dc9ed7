"""Confusion-matrix accumulation and IoU metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ShapeError


@dataclass
class MetricsReport:
    class_names: list[str]
    intersection: np.ndarray
    union: np.ndarray
    iou: np.ndarray              # nan where the union is empty
    miou: float
    pixel_count: int
    fg_iou: float | None = None

    def to_dict(self) -> dict:
        per_class = []
        for i, name in enumerate(self.class_names):
            value = None if np.isnan(self.iou[i]) else float(self.iou[i])
            per_class.append({"name": name, "iou": value,
                              "intersection": int(self.intersection[i]),
                              "union": int(self.union[i])})
        out = {"miou": self.miou, "per_class": per_class, "pixel_count": self.pixel_count}
        if self.fg_iou is not None:
            out["fg_iou"] = self.fg_iou
        return out

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                         confusion: np.ndarray | None = None) -> np.ndarray:
    """Add one image's pixel counts into a (gt, pred) matrix."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"accumulate_confusion: pred {pred.shape} vs gt {gt.shape}")
    if pred.max(initial=0) >= num_classes or gt.max(initial=0) >= num_classes:
        raise ValueError(f"class index out of range for K={num_classes}")
    if confusion is None:
        confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    flat = gt.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1).astype(np.int64)
    confusion += np.bincount(flat, minlength=num_classes * num_classes) \
        .reshape(num_classes, num_classes)
    return confusion


def compute_miou(confusion: np.ndarray, class_names: list[str] | None = None) -> MetricsReport:
    """Per-class IoU and the mean over classes with a nonzero union."""
    confusion = np.asarray(confusion)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ShapeError(f"compute_miou: confusion must be square, got {confusion.shape}")
    total = int(confusion.sum())
    if total == 0:
        raise ValueError("compute_miou: empty confusion matrix")
    K = confusion.shape[0]
    diag = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - np.diag(confusion)
    iou = np.full(K, np.nan)
    present = union > 0
    iou[present] = diag[present] / union[present]
    names = class_names if class_names is not None else [f"class_{i}" for i in range(K)]
    return MetricsReport(list(names), diag.astype(np.int64), union.astype(np.int64),
                         iou, float(np.nanmean(iou)), total)


def compute_fg_iou(confusion: np.ndarray, fg_index: int) -> float | None:
    """IoU of one class; None when it is absent from both pred and gt."""
    confusion = np.asarray(confusion)
    if fg_index >= confusion.shape[0]:
        raise ValueError(f"fg_index {fg_index} out of range")
    union = confusion[fg_index].sum() + confusion[:, fg_index].sum() - confusion[fg_index, fg_index]
    if union == 0:
        return None
    return float(confusion[fg_index, fg_index] / union)


def load_manifest(path):
    """Dataset manifest: classes (with subclass prompts) and image/mask pairs."""
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    root = path.parent
    classes = []
    for entry in manifest["classes"]:
        if isinstance(entry, str):
            classes.append({"name": entry, "subclasses": [entry]})
        else:
            classes.append({"name": entry["name"],
                            "subclasses": entry.get("subclasses") or [entry["name"]]})
    entries = []
    for item in manifest["entries"]:
        image = root / item["image"]
        mask = root / item["mask"]
        for p in (image, mask):
            if not p.is_file():
                raise FileNotFoundError(f"manifest references missing file: {p}")
        entries.append({"image": image, "mask": mask})
    return classes, entries
