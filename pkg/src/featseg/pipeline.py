"""End-to-end segmentation: encode, attention surgery, upsample, de-bias,
classify, and stitch sliding windows into a full-image mask."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import LastBlockParams, baseline_forward, tap_early_features
from .autodiff import ShapeError
from .encoder import EncoderConfig, toy_encode
from .textbank import TextEmbeddingBank
from .upsampler import JbuParams, simfeatup_upsample


@dataclass
class InferenceConfig:
    lam: float = 0.3            # global-bias intensity
    window: int = 224
    stride: int = 112
    long_side: int = 448
    upsample_factor: int | None = None   # None: full patch-size factor
    feature_source: str = "attention"    # or "early_tap" (A/B alternative)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.stride > self.window or self.stride < 1:
            raise ValueError(f"stride {self.stride} must be in [1, window {self.window}]")
        if self.feature_source not in ("attention", "early_tap"):
            raise ValueError(f"unknown feature source {self.feature_source!r}")


@dataclass
class SegmentationMask:
    indices: np.ndarray          # (H, W) class indices
    classes: list[str]


def subtract_global(features, o_cls, lam: float) -> np.ndarray:
    """Remove a lambda-scaled copy of the global token from every feature."""
    features = np.asarray(features)
    o_cls = np.asarray(o_cls)
    if features.shape[-1] != o_cls.shape[-1]:
        raise ShapeError(f"subtract_global: widths {features.shape[-1]} vs {o_cls.shape[-1]}")
    return (features - lam * o_cls).astype(np.float32)


def classify_patches(features: np.ndarray, bank: TextEmbeddingBank):
    """Cosine scores per class; each class takes its best-scoring subclass.

    Returns (logits (H, W, K), zero_norm_count).
    """
    if features.shape[-1] != bank.dim:
        raise ShapeError(f"classify_patches: feature width {features.shape[-1]} != "
                         f"bank width {bank.dim}")
    h, w, c = features.shape
    flat = features.reshape(h * w, c).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    norms[zero] = 1.0
    unit = flat / norms
    rows, owner = bank.stacked()
    sims = unit @ rows.astype(np.float64).T         # (hw, total_subclasses)
    sims[zero] = 0.0
    K = len(bank.classes)
    logits = np.full((h * w, K), -np.inf)
    for ki in range(K):
        logits[:, ki] = sims[:, owner == ki].max(axis=1)
    logits[zero] = 0.0
    return logits.reshape(h, w, K).astype(np.float32), int(zero.sum())


def resize_long_side(image: np.ndarray, target: int, patch: int) -> np.ndarray:
    """Bilinear resize so the long side equals ``target``; the short side is
    rounded to the nearest multiple of the patch size (at least one patch)."""
    if target <= 0:
        raise ValueError("target must be positive")
    h, w = image.shape[:2]
    long_dim = max(h, w)
    scale = target / long_dim
    short = min(h, w) * scale
    short = max(patch, int(round(short / patch)) * patch)
    nh, nw = (target, short) if h >= w else (short, target)
    if (nh, nw) == (h, w):
        return np.asarray(image, dtype=np.float32)
    return ad.bilinear_resize(np.ascontiguousarray(image, dtype=np.float32), nh, nw).value


def segment_window(window_image, enc_cfg: EncoderConfig, block: LastBlockParams,
                   jbu: JbuParams, bank: TextEmbeddingBank, cfg: InferenceConfig) -> np.ndarray:
    """Class logits at window resolution for one window-sized image."""
    edge_h, edge_w = window_image.shape[:2]
    if edge_h % enc_cfg.patch_size or edge_w % enc_cfg.patch_size:
        raise ShapeError(f"window dims ({edge_h}, {edge_w}) not divisible by patch size "
                         f"{enc_cfg.patch_size}")
    x = toy_encode(window_image, enc_cfg)
    out = baseline_forward(x, block)
    o_cls = out.tokens[0]
    feat = out.patches() if cfg.feature_source == "attention" else tap_early_features(x, block)

    factor = cfg.upsample_factor if cfg.upsample_factor is not None else enc_cfg.patch_size
    if factor > 1:
        h, w = feat.shape[:2]
        guide = window_image if factor == enc_cfg.patch_size else \
            ad.bilinear_resize(np.ascontiguousarray(window_image), h * factor, w * factor).value
        feat = simfeatup_upsample(feat, guide, jbu, factor).value

    feat = subtract_global(feat, o_cls, cfg.lam)
    logits, _ = classify_patches(feat, bank)
    if logits.shape[:2] != (edge_h, edge_w):
        logits = ad.nearest_resize(logits, edge_h, edge_w)
    return logits


def window_origins(length: int, window: int, stride: int) -> list[int]:
    """Multiples of stride, last origin clamped so the window touches the edge."""
    if length <= window:
        return [0]
    origins = list(range(0, length - window + 1, stride))
    if origins[-1] != length - window:
        origins.append(length - window)
    return origins


def slide_inference(image, enc_cfg: EncoderConfig, block: LastBlockParams,
                    jbu: JbuParams, bank: TextEmbeddingBank, cfg: InferenceConfig):
    """Mean-of-logits stitching over overlapping windows.

    Returns (logits (H, W, K), coverage (H, W)).  Images smaller than the
    window are replicate-padded to one window (and flagged via a warning).
    """
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    win = cfg.window
    if h < win or w < win:
        warnings.warn(f"image ({h}, {w}) smaller than window {win}; replicate-padding")
        pad_h, pad_w = max(win - h, 0), max(win - w, 0)
        iy = np.clip(np.arange(max(h, win)), 0, h - 1)
        ix = np.clip(np.arange(max(w, win)), 0, w - 1)
        padded = image[iy[:, None], ix[None, :]]
        logits = segment_window(padded[:win, :win], enc_cfg, block, jbu, bank, cfg)
        return logits[:h, :w], np.ones((h, w), dtype=np.int32)

    K = len(bank.classes)
    acc = np.zeros((h, w, K), dtype=np.float64)
    coverage = np.zeros((h, w), dtype=np.int32)
    for y0 in window_origins(h, win, cfg.stride):
        for x0 in window_origins(w, win, cfg.stride):
            tile = np.ascontiguousarray(image[y0:y0 + win, x0:x0 + win])
            acc[y0:y0 + win, x0:x0 + win] += segment_window(tile, enc_cfg, block, jbu, bank, cfg)
            coverage[y0:y0 + win, x0:x0 + win] += 1
    if (coverage == 0).any():
        raise RuntimeError("slide_inference: uncovered pixels")  # unreachable by construction
    return (acc / coverage[:, :, None]).astype(np.float32), coverage


def argmax_mask(logits: np.ndarray, classes: list[str]) -> SegmentationMask:
    """Per-pixel argmax; ties resolve to the lowest class index."""
    if logits.ndim != 3 or logits.shape[2] < 1:
        raise ShapeError(f"argmax_mask: bad logits shape {logits.shape}")
    return SegmentationMask(np.argmax(logits, axis=2).astype(np.int64), list(classes))
