"""Mid-axial slice export as binary 8-bit greymaps (PGM, P5)."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np


def mid_axial(volume: np.ndarray) -> np.ndarray:
    v = np.asarray(volume)
    if v.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {v.shape}")
    return v[v.shape[0] // 2]


def to_grey(image: np.ndarray, vmax: float) -> np.ndarray:
    if not vmax > 0:
        raise ValueError(f"vmax must be positive, got {vmax}")
    scaled = np.clip(np.asarray(image, dtype=np.float64) / vmax, 0.0, 1.0)
    return np.rint(scaled * 255).astype(np.uint8)


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> Path:
    """Write a 2D uint8 image; pixels are stored row-major, first row first."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"expected a 2D uint8 image, got {img.dtype} {img.shape}")
    h, w = img.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())
    return path


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = data.split(maxsplit=4)
    if len(fields) < 5 or fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary greymap")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit greymaps are supported")
    pixels = data[len(data) - w * h:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
