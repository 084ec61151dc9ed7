"""Binary tensor files and checkpoint directories.

Format: magic ``SFUP``, u32 LE version (=1), u32 rank, rank u32 dims, then
row-major little-endian float32 data.  Checkpoints are a directory of these
files plus an ``index.json`` naming each tensor and its role.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SFUP"
VERSION = 1


class FormatError(ValueError):
    """A binary file does not match the expected layout."""


def save_tensor(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(blob) < 12 + 4 * rank:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", blob, 12)
    count = int(np.prod(dims)) if rank else 1
    body = blob[12 + 4 * rank:]
    if len(body) != 4 * count:
        raise FormatError(f"{path}: payload is {len(body)} bytes, expected {4 * count}")
    return np.frombuffer(body, dtype="<f4").reshape(dims).astype(np.float32)


def save_checkpoint(directory, tensors: dict, roles: dict | None = None) -> None:
    """Write named tensors as ``<name>.sfup`` plus an index.

    ``roles`` maps tensor-name prefixes (parameter groups) to a role string;
    groups marked ``"training_only"`` are skippable at inference.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"version": VERSION, "tensors": {}, "roles": roles or {}}
    for name, arr in tensors.items():
        fname = name.replace("/", "_") + ".sfup"
        save_tensor(directory / fname, arr)
        index["tensors"][name] = fname
    with open(directory / "index.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)


def load_checkpoint(directory, skip_training_only: bool = False):
    """Returns (tensors, roles).  Missing index or tensors raise FormatError."""
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.is_file():
        raise FormatError(f"{index_path}: checkpoint index not found")
    with open(index_path) as f:
        index = json.load(f)
    roles = index.get("roles", {})
    skip = {prefix for prefix, role in roles.items() if role == "training_only"} \
        if skip_training_only else set()
    tensors = {}
    for name, fname in index["tensors"].items():
        if any(name == p or name.startswith(p + ".") for p in skip):
            continue
        tensors[name] = load_tensor(directory / fname)
    return tensors, roles


def save_feature_dump(path, tokens, grid) -> None:
    """Token matrix plus a key=value sidecar holding the patch-grid shape."""
    tokens = np.asarray(tokens, dtype=np.float32)
    if tokens.ndim != 2:
        raise FormatError(f"feature dump requires rank 2 tokens, got shape {tokens.shape}")
    h, w = grid
    if tokens.shape[0] != 1 + h * w:
        raise FormatError(f"token count {tokens.shape[0]} != 1 + {h}*{w}")
    save_tensor(path, tokens)
    with open(str(path) + ".meta", "w", encoding="utf-8") as f:
        f.write(f"h={h}\nw={w}\ndim={tokens.shape[1]}\n")


def load_feature_dump(path):
    """Returns (tokens, (h, w)) after validating the sidecar against the tensor."""
    tokens = load_tensor(path)
    if tokens.ndim != 2:
        raise FormatError(f"{path}: feature dump must be rank 2, got rank {tokens.ndim}")
    meta_path = str(path) + ".meta"
    try:
        with open(meta_path, encoding="utf-8") as f:
            meta = dict(line.strip().split("=", 1) for line in f if line.strip())
    except FileNotFoundError:
        raise FormatError(f"{meta_path}: sidecar metadata not found") from None
    try:
        h, w, dim = int(meta["h"]), int(meta["w"]), int(meta["dim"])
    except (KeyError, ValueError):
        raise FormatError(f"{meta_path}: sidecar must define integer h, w, dim") from None
    if tokens.shape[0] != 1 + h * w:
        raise FormatError(f"{path}: {tokens.shape[0]} tokens but grid ({h}, {w}) needs {1 + h * w}")
    if tokens.shape[1] != dim:
        raise FormatError(f"{path}: token width {tokens.shape[1]} != sidecar dim {dim}")
    return tokens, (h, w)
