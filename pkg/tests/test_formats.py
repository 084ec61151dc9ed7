import json

import numpy as np
import pytest

from featseg.images import read_pgm, read_ppm, write_pgm, write_ppm
from featseg.tensorio import (FormatError, load_checkpoint, load_feature_dump, load_tensor,
                              save_checkpoint, save_feature_dump, save_tensor)


def test_tensor_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(3,), (2, 5), (4, 3, 2), (1, 1, 1, 7)]:
        arr = rng.normal(size=shape).astype(np.float32)
        path = tmp_path / "t.sfup"
        save_tensor(path, arr)
        back = load_tensor(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)


def test_tensor_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.sfup"
    save_tensor(path, np.zeros(3, np.float32))
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        load_tensor(path)


def test_tensor_truncated_rejected(tmp_path):
    path = tmp_path / "trunc.sfup"
    save_tensor(path, np.zeros((4, 4), np.float32))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_tensor(path)


def test_tensor_wrong_version_rejected(tmp_path):
    path = tmp_path / "v9.sfup"
    save_tensor(path, np.zeros(2, np.float32))
    blob = bytearray(path.read_bytes())
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        load_tensor(path)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a.w": rng.normal(size=(2, 3)).astype(np.float32),
               "b.logits": rng.normal(size=(4, 4)).astype(np.float32)}
    save_checkpoint(tmp_path / "ckpt", tensors, roles={"b": "training_only"})
    back, roles = load_checkpoint(tmp_path / "ckpt")
    assert roles == {"b": "training_only"}
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])
    infer, _ = load_checkpoint(tmp_path / "ckpt", skip_training_only=True)
    assert "a.w" in infer and "b.logits" not in infer


def test_checkpoint_missing_index(tmp_path):
    with pytest.raises(FormatError, match="index"):
        load_checkpoint(tmp_path / "nothing")


def test_feature_dump_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    tokens = rng.normal(size=(1 + 6, 8)).astype(np.float32)
    path = tmp_path / "feat.sfup"
    save_feature_dump(path, tokens, (2, 3))
    back, grid = load_feature_dump(path)
    assert grid == (2, 3)
    assert np.array_equal(back, tokens)


def test_feature_dump_vit_geometry(tmp_path):
    tokens = np.zeros((197, 4), np.float32)   # 14x14 grid + global token
    path = tmp_path / "vit.sfup"
    save_feature_dump(path, tokens, (14, 14))
    _, grid = load_feature_dump(path)
    assert grid == (14, 14)


def test_feature_dump_grid_mismatch(tmp_path):
    path = tmp_path / "feat.sfup"
    save_tensor(path, np.zeros((7, 4), np.float32))
    with open(str(path) + ".meta", "w") as f:
        f.write("h=2\nw=4\ndim=4\n")
    with pytest.raises(FormatError, match="grid"):
        load_feature_dump(path)


def test_feature_dump_truncated_no_partial(tmp_path):
    tokens = np.zeros((5, 3), np.float32)
    path = tmp_path / "feat.sfup"
    save_feature_dump(path, tokens, (2, 2))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_feature_dump(path)


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    raw = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    img = raw.astype(np.float32) / 127.5 - 1.0
    path = tmp_path / "img.ppm"
    write_ppm(path, img)
    back = read_ppm(path)
    assert back.shape == (5, 7, 3)
    assert np.abs(back - img).max() < 1e-6


def test_ppm_with_comment(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes(6))
    img = read_ppm(path)
    assert img.shape == (1, 2, 3)


def test_pgm_round_trip(tmp_path):
    mask = np.array([[0, 1, 2], [3, 0, 1]], dtype=np.uint8)
    path = tmp_path / "m.pgm"
    write_pgm(path, mask)
    assert np.array_equal(read_pgm(path), mask)


def test_ppm_wrong_magic(tmp_path):
    path = tmp_path / "x.ppm"
    path.write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(FormatError):
        read_ppm(path)
