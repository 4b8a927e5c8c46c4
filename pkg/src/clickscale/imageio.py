"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _write_pnm(path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {rgb.shape}")
    _write_pnm(path, b"P6", rgb)


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"expected (H, W) image, got {gray.shape}")
    _write_pnm(path, b"P5", gray)


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    out, i = [], 0
    while len(out) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PNM header")
        out.append(data[i:j])
        i = j
    return out, i + 1  # single whitespace byte ends the header


def read_pnm(path) -> np.ndarray:
    """Read a P5 or P6 file into ``(H, W)`` or ``(H, W, 3)`` uint8."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(data, 4)
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise ValueError(f"{path}: only 8-bit P5/P6 supported")
    w, h = int(w), int(h)
    ch = 3 if magic == b"P6" else 1
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=offset)
    return pix.reshape((h, w, 3) if ch == 3 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    img = read_pnm(path)
    if img.ndim != 3:
        raise ValueError(f"{path}: not a colour (P6) image")
    return img


def to_chw(rgb: np.ndarray) -> np.ndarray:
    """uint8 ``(H, W, 3)`` to float64 ``(3, H, W)`` in ``[0, 1]``."""
    return np.ascontiguousarray(np.transpose(rgb, (2, 0, 1)), dtype=np.float64) / 255.0
