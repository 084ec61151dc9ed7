"""Deterministic toy ViT-style encoder.

Stands in for a pretrained backbone: patch embedding, a few pre-norm
transformer blocks, and a learnable-constant global token, all with weights
drawn from a seeded counter-based PRNG.  Its output is the token sequence
consumed by the last-block surgery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    depth: int = 2
    dim: int = 32
    proj_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.proj_dim >= self.dim:
            raise ValueError(f"proj_dim must be < dim, got {self.proj_dim} >= {self.dim}")
        if self.patch_size < 1 or self.depth < 0:
            raise ValueError("patch_size must be >= 1 and depth >= 0")


@dataclass
class TokenSequence:
    """(1 + h*w, dim) tokens; row 0 is the global token, rows 1.. map row-major."""
    tokens: np.ndarray
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.ndim != 2 or self.tokens.shape[0] != 1 + h * w:
            raise ValueError(f"tokens shape {self.tokens.shape} inconsistent with grid {self.grid}")

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def patches(self) -> np.ndarray:
        """Patch tokens reshaped to the (h, w, dim) grid."""
        h, w = self.grid
        return self.tokens[1:].reshape(h, w, self.dim)


def _w(cfg: EncoderConfig, label: str, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(cfg.dim)
    return rng.uniform(rng.derive_seed(cfg.seed, label), shape, -bound, bound)


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return ((x - mu) / np.sqrt(var + eps)).astype(np.float32)


def _attention(x, wq, wk, wv, wo, dim):
    q, k, v = x @ wq, x @ wk, x @ wv
    logits = (q @ k.T / np.sqrt(dim)).astype(np.float32)
    logits -= logits.max(axis=-1, keepdims=True)
    att = np.exp(logits)
    att /= att.sum(axis=-1, keepdims=True)
    return (att @ v) @ wo


def toy_encode(image: np.ndarray, cfg: EncoderConfig) -> TokenSequence:
    """Encode an (H, W, 3) image in [-1, 1] into last-block input tokens."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    H, W, _ = image.shape
    p = cfg.patch_size
    if H % p or W % p:
        raise ValueError(f"image dims ({H}, {W}) not divisible by patch size {p}")
    if np.abs(image).max(initial=0.0) > 1.0 + 1e-6:
        raise ValueError("image values must lie in [-1, 1]")

    h, w = H // p, W // p
    patches = image.reshape(h, p, w, p, 3).transpose(0, 2, 1, 3, 4).reshape(h * w, p * p * 3)
    embed = patches @ _w(cfg, "patch_embed.w", (p * p * 3, cfg.dim)) + _w(cfg, "patch_embed.b", (cfg.dim,))
    # Positional embedding is a pure function of (seed, grid index); grids of
    # different sizes draw disjoint prefixes of the same stream.
    embed = embed + rng.uniform(rng.derive_seed(cfg.seed, "pos_embed"),
                                (h * w, cfg.dim), -0.1, 0.1)
    cls = _w(cfg, "cls_token", (1, cfg.dim))
    x = np.concatenate([cls, embed], axis=0).astype(np.float32)

    for i in range(cfg.depth):
        pre = f"block{i}."
        y = _layer_norm(x)
        x = x + _attention(y,
                           _w(cfg, pre + "wq", (cfg.dim, cfg.dim)),
                           _w(cfg, pre + "wk", (cfg.dim, cfg.dim)),
                           _w(cfg, pre + "wv", (cfg.dim, cfg.dim)),
                           _w(cfg, pre + "wo", (cfg.dim, cfg.dim)),
                           cfg.dim)
        y = _layer_norm(x)
        hdim = 2 * cfg.dim
        y = np.maximum(y @ _w(cfg, pre + "ffn.w1", (cfg.dim, hdim)) + _w(cfg, pre + "ffn.b1", (hdim,)), 0.0)
        x = x + y @ _w(cfg, pre + "ffn.w2", (hdim, cfg.dim)) + _w(cfg, pre + "ffn.b2", (cfg.dim,))
    return TokenSequence(x.astype(np.float32), (h, w))
