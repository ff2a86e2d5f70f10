"""Binary netpbm I/O: P6 (color) for dataset images, P5 (gray) for heatmaps."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _header(magic: bytes, width: int, height: int) -> bytes:
    return b"%s\n%d %d\n255\n" % (magic, width, height)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"write_ppm: expected (H, W, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(_header(b"P6", w, h) + rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary PGM."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"write_pgm: expected (H, W) uint8, got {gray.shape} {gray.dtype}")
    h, w = gray.shape
    Path(path).write_bytes(_header(b"P5", w, h) + gray.tobytes())


def _parse(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise ValueError(f"netpbm: expected magic {magic.decode()}, got {data[:2]!r}")
    # header fields are whitespace separated; '#' comments run to end of line
    fields = []
    pos = len(magic)
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"netpbm: only maxval 255 supported, got {maxval}")
    return width, height, data[pos:]


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) uint8 array."""
    w, h, raw = _parse(Path(path).read_bytes(), b"P6")
    expect = w * h * 3
    if len(raw) < expect:
        raise ValueError(f"netpbm: truncated pixel data ({len(raw)} < {expect} bytes)")
    return np.frombuffer(raw[:expect], dtype=np.uint8).reshape(h, w, 3)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into an (H, W) uint8 array."""
    w, h, raw = _parse(Path(path).read_bytes(), b"P5")
    expect = w * h
    if len(raw) < expect:
        raise ValueError(f"netpbm: truncated pixel data ({len(raw)} < {expect} bytes)")
    return np.frombuffer(raw[:expect], dtype=np.uint8).reshape(h, w)


def image_to_bytes(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8, round-to-nearest."""
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def bytes_to_image(rgb: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float64 in [0, 1]."""
    return rgb.astype(np.float64).transpose(2, 0, 1) / 255.0
