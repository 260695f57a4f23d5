from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


def to_gray(values) -> np.ndarray:
    """Min-max normalize to uint8; a constant map becomes all black."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img) -> None:
    """Binary PGM (P5, maxval 255)."""
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


def as_grid(values) -> np.ndarray:
    """Lay a token vector out as a square grid when its length allows, else a strip."""
    v = np.asarray(values)
    side = math.isqrt(v.size)
    return v.reshape(side, side) if side * side == v.size else v.reshape(1, -1)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
