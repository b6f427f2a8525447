"""Binary PGM (P5) output and simple overlays for inspection."""

from pathlib import Path

import numpy as np


def to_u8(img, lo=None, hi=None):
    img = np.asarray(img, dtype=np.float64)
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round(np.clip((img - lo) / (hi - lo), 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(path, img, lo=None, hi=None):
    """Write a 2-D array as an 8-bit P5 image, linearly mapping [lo, hi] to [0, 255]."""
    if np.ndim(img) != 2:
        raise ValueError("PGM images must be 2-D")
    data = to_u8(img, lo, hi)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def overlay(query, mask, box):
    """Query image in [0, 0.6], mask pixels lifted by 0.3, box outline at 1."""
    img = 0.6 * to_u8(query).astype(np.float64) / 255.0
    img = img + 0.3 * np.asarray(mask, dtype=bool)
    h, w = img.shape
    x1 = int(np.clip(np.floor(box.x1), 0, w - 1))
    x2 = int(np.clip(np.ceil(box.x2) - 1, 0, w - 1))
    y1 = int(np.clip(np.floor(box.y1), 0, h - 1))
    y2 = int(np.clip(np.ceil(box.y2) - 1, 0, h - 1))
    img[y1, x1: x2 + 1] = 1.0
    img[y2, x1: x2 + 1] = 1.0
    img[y1: y2 + 1, x1] = 1.0
    img[y1: y2 + 1, x2] = 1.0
    return img
