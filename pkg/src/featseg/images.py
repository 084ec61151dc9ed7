"""Binary PPM (P6) image and PGM (P5) mask I/O.

Images load as float32 (H, W, 3) in [-1, 1] via v / 127.5 - 1; masks are
uint8 class-index grids.
"""

from __future__ import annotations

import numpy as np

from .tensorio import FormatError


def _read_header(blob, magic, path):
    if blob[:2] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} file, got {blob[:2]!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        fields.append(int(blob[start:pos]))
    return fields[0], fields[1], fields[2], pos + 1


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    w, h, maxval, offset = _read_header(blob, b"P6", path)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    body = blob[offset:offset + 3 * w * h]
    if len(body) != 3 * w * h:
        raise FormatError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return pixels.astype(np.float32) / 127.5 - 1.0


def write_ppm(path, image) -> None:
    """Write an (H, W, 3) float image in [-1, 1] as 8-bit P6."""
    image = np.asarray(image)
    pixels = np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    w, h, maxval, offset = _read_header(blob, b"P5", path)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    body = blob[offset:offset + w * h]
    if len(body) != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, mask) -> None:
    mask = np.asarray(mask)
    if mask.max(initial=0) > 255:
        raise FormatError("PGM masks support at most 256 classes")
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(mask.astype(np.uint8).tobytes())
