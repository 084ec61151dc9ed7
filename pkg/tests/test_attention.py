import numpy as np
import pytest

from featseg.attention import (LastBlockParams, baseline_forward, embed_qkv,
                               modulated_attention, random_last_block_params,
                               standard_attention, tap_early_features, vanilla_forward)
from featseg.autodiff import ShapeError
from featseg.encoder import EncoderConfig, TokenSequence


def naive_attention(q, k, v):
    n, d = q.shape
    out = np.zeros_like(v)
    for i in range(n):
        logits = np.array([q[i] @ k[j] / np.sqrt(d) for j in range(n)])
        logits -= logits.max()
        w = np.exp(logits)
        w /= w.sum()
        for j in range(n):
            out[i] += w[j] * v[j]
    return out


def _cfg():
    return EncoderConfig(patch_size=8, depth=1, dim=32, proj_dim=16, seed=0)


def _tokens(rng, cfg, grid=(3, 4)):
    h, w = grid
    return TokenSequence(rng.normal(size=(1 + h * w, cfg.dim)).astype(np.float32), grid)


def test_standard_attention_matches_two_loop_oracle():
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(6, 5)).astype(np.float32) for _ in range(3))
    assert np.allclose(standard_attention(q, k, v), naive_attention(q, k, v), atol=1e-5)


def test_single_token_outputs_value():
    q = np.array([[2.0, -1.0]], np.float32)
    k = np.array([[0.5, 0.5]], np.float32)
    v = np.array([[7.0, 3.0]], np.float32)
    assert np.allclose(standard_attention(q, k, v), v)
    # Each of the three self-similarity branches collapses to v itself.
    assert np.allclose(modulated_attention(q, k, v), 3 * v)


def test_modulated_attention_identical_operands():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(5, 4)).astype(np.float32)
    assert np.allclose(modulated_attention(t, t, t), 3 * standard_attention(t, t, t), atol=1e-5)


def test_modulated_attention_is_sum_of_branches():
    rng = np.random.default_rng(2)
    q, k, v = (rng.normal(size=(7, 6)).astype(np.float32) for _ in range(3))
    want = (naive_attention(q, q, v) + naive_attention(k, k, v) + naive_attention(v, v, v))
    assert np.allclose(modulated_attention(q, k, v), want, atol=1e-4)


def test_attention_rows_sum_preserves_constant_value():
    rng = np.random.default_rng(3)
    q, k = (rng.normal(size=(6, 4)).astype(np.float32) for _ in range(2))
    v = np.full((6, 4), 1.5, np.float32)
    assert np.allclose(standard_attention(q, k, v), 1.5, atol=1e-6)
    assert np.allclose(modulated_attention(q, k, v), 4.5, atol=1e-5)


def test_token_permutation_equivariance():
    rng = np.random.default_rng(4)
    q, k, v = (rng.normal(size=(8, 5)).astype(np.float32) for _ in range(3))
    perm = rng.permutation(8)
    out = modulated_attention(q, k, v)
    out_p = modulated_attention(q[perm], k[perm], v[perm])
    assert np.allclose(out[perm], out_p, atol=1e-5)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        standard_attention(np.zeros((3, 4)), np.zeros((3, 4)), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        modulated_attention(np.zeros((3, 4)), np.zeros((3, 5)), np.zeros((3, 4)))


def test_embed_qkv_width_check():
    cfg = _cfg()
    p = random_last_block_params(cfg)
    bad = TokenSequence(np.zeros((5, cfg.dim + 1), np.float32), (2, 2))
    with pytest.raises(ShapeError):
        embed_qkv(bad, p)


def test_baseline_and_vanilla_disagree():
    cfg = _cfg()
    rng = np.random.default_rng(5)
    p = random_last_block_params(cfg)
    x = _tokens(rng, cfg)
    a = baseline_forward(x, p)
    b = vanilla_forward(x, p)
    assert a.grid == b.grid == x.grid
    assert a.tokens.shape == (1 + 12, cfg.proj_dim)
    assert not np.allclose(a.tokens, b.tokens)


def test_baseline_depends_on_every_token():
    cfg = _cfg()
    rng = np.random.default_rng(6)
    p = random_last_block_params(cfg)
    x = _tokens(rng, cfg)
    base = baseline_forward(x, p).tokens
    poked = TokenSequence(x.tokens.copy(), x.grid)
    poked.tokens[7] += 1.0
    out = baseline_forward(poked, p).tokens
    assert np.any(out != base)


def test_early_tap_shape_and_projection():
    cfg = _cfg()
    rng = np.random.default_rng(7)
    p = random_last_block_params(cfg)
    x = _tokens(rng, cfg, grid=(2, 5))
    feats = tap_early_features(x, p)
    assert feats.shape == (2, 5, cfg.proj_dim)
    assert np.allclose(feats[0, 0], p.proj(x.tokens[1]), atol=1e-6)


def test_last_block_params_round_trip(tmp_path):
    cfg = _cfg()
    p = random_last_block_params(cfg)
    p.save(tmp_path / "block")
    q = LastBlockParams.load(tmp_path / "block")
    for key, val in p.to_tensors().items():
        assert np.array_equal(q.to_tensors()[key], val), key
    rng = np.random.default_rng(8)
    x = _tokens(rng, cfg)
    assert np.array_equal(baseline_forward(x, p).tokens, baseline_forward(x, q).tokens)
