"""Last transformer block: the standard path and the surgery variant.

The surgery path replaces self-attention by the sum of the q-q, k-k and v-v
self-similarity attentions over v, and drops the FFN and residual
connections before projecting into the multimodal space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .autodiff import ShapeError
from .encoder import EncoderConfig, TokenSequence
from .tensorio import load_checkpoint, save_checkpoint


@dataclass
class LnLinear:
    gamma: np.ndarray
    beta: np.ndarray
    w: np.ndarray
    b: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        normed = (x - mu) / np.sqrt(var + 1e-5) * self.gamma + self.beta
        return (normed @ self.w + self.b).astype(np.float32)


@dataclass
class LastBlockParams:
    emb_q: LnLinear
    emb_k: LnLinear
    emb_v: LnLinear
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray

    @property
    def dim(self) -> int:
        return self.proj_w.shape[0]

    @property
    def proj_dim(self) -> int:
        return self.proj_w.shape[1]

    def proj(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.proj_w + self.proj_b).astype(np.float32)

    def to_tensors(self) -> dict:
        out = {}
        for key, emb in (("emb_q", self.emb_q), ("emb_k", self.emb_k), ("emb_v", self.emb_v)):
            out[f"{key}.gamma"] = emb.gamma
            out[f"{key}.beta"] = emb.beta
            out[f"{key}.w"] = emb.w
            out[f"{key}.b"] = emb.b
        out.update({"ln2.gamma": self.ln2_gamma, "ln2.beta": self.ln2_beta,
                    "ffn.w1": self.ffn_w1, "ffn.b1": self.ffn_b1,
                    "ffn.w2": self.ffn_w2, "ffn.b2": self.ffn_b2,
                    "proj.w": self.proj_w, "proj.b": self.proj_b})
        return out

    @classmethod
    def from_tensors(cls, t: dict) -> "LastBlockParams":
        def emb(key):
            return LnLinear(t[f"{key}.gamma"], t[f"{key}.beta"], t[f"{key}.w"], t[f"{key}.b"])
        return cls(emb("emb_q"), emb("emb_k"), emb("emb_v"),
                   t["ln2.gamma"], t["ln2.beta"],
                   t["ffn.w1"], t["ffn.b1"], t["ffn.w2"], t["ffn.b2"],
                   t["proj.w"], t["proj.b"])

    def save(self, directory) -> None:
        save_checkpoint(directory, self.to_tensors())

    @classmethod
    def load(cls, directory) -> "LastBlockParams":
        tensors, _ = load_checkpoint(directory)
        return cls.from_tensors(tensors)


def random_last_block_params(cfg: EncoderConfig) -> LastBlockParams:
    """Seeded parameters consistent with the toy encoder's widths."""
    d, c = cfg.dim, cfg.proj_dim
    bound = 1.0 / np.sqrt(d)

    def draw(label, shape):
        return rng.uniform(rng.derive_seed(cfg.seed, "last_block." + label), shape, -bound, bound)

    def emb(key):
        return LnLinear(np.ones(d, np.float32), np.zeros(d, np.float32),
                        draw(key + ".w", (d, d)), draw(key + ".b", (d,)))

    f = 2 * d
    return LastBlockParams(
        emb("emb_q"), emb("emb_k"), emb("emb_v"),
        np.ones(d, np.float32), np.zeros(d, np.float32),
        draw("ffn.w1", (d, f)), draw("ffn.b1", (f,)),
        draw("ffn.w2", (f, d)), draw("ffn.b2", (d,)),
        draw("proj.w", (d, c)), np.zeros(c, np.float32))


def _check_tokens(x: TokenSequence, p: LastBlockParams):
    if x.dim != p.dim:
        raise ShapeError(f"token width {x.dim} does not match block width {p.dim}")


def embed_qkv(x: TokenSequence, p: LastBlockParams):
    _check_tokens(x, p)
    return p.emb_q(x.tokens), p.emb_k(x.tokens), p.emb_v(x.tokens)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def standard_attention(q, k, v) -> np.ndarray:
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"attention operands disagree: {q.shape}, {k.shape}, {v.shape}")
    att = _softmax_rows(q @ k.T / np.sqrt(q.shape[1]))
    return (att @ v).astype(np.float32)


def modulated_attention(q, k, v) -> np.ndarray:
    """Sum of the three self-similarity attentions applied to v."""
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"attention operands disagree: {q.shape}, {k.shape}, {v.shape}")
    scale = np.sqrt(q.shape[1])
    out = np.zeros_like(v)
    for t in (q, k, v):
        out = out + _softmax_rows(t @ t.T / scale) @ v
    return out.astype(np.float32)


def tap_early_features(x: TokenSequence, p: LastBlockParams) -> np.ndarray:
    """Project the pre-block patch tokens; the upsampler trains on these."""
    _check_tokens(x, p)
    h, w = x.grid
    return p.proj(x.tokens[1:]).reshape(h, w, p.proj_dim)


def baseline_forward(x: TokenSequence, p: LastBlockParams) -> TokenSequence:
    """Modulated attention, no FFN, no residual; then the projection."""
    q, k, v = embed_qkv(x, p)
    out = p.proj(modulated_attention(q, k, v))
    return TokenSequence(out, x.grid)


def vanilla_forward(x: TokenSequence, p: LastBlockParams) -> TokenSequence:
    """The unmodified block, kept for A/B comparison against the surgery path."""
    q, k, v = embed_qkv(x, p)
    y = x.tokens + standard_attention(q, k, v)
    mu = y.mean(axis=-1, keepdims=True)
    var = ((y - mu) ** 2).mean(axis=-1, keepdims=True)
    normed = (y - mu) / np.sqrt(var + 1e-5) * p.ln2_gamma + p.ln2_beta
    hidden = np.maximum(normed @ p.ffn_w1 + p.ffn_b1, 0.0)
    z = y + hidden @ p.ffn_w2 + p.ffn_b2
    return TokenSequence(p.proj(z.astype(np.float32)), x.grid)
