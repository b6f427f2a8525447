"""Tensor plumbing: float64 arrays, seeded RNG streams, FTNS files, and the
central-difference gradient oracle every analytic gradient is checked against.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
"""

import struct
from pathlib import Path

import numpy as np

DTYPE = np.float64
FTNS_MAGIC = b"FTNS"


class ShapeError(ValueError):
    pass


def as_tensor(x, dtype=DTYPE):
    """Copy ``x`` into a contiguous float64 array."""
    return np.ascontiguousarray(np.asarray(x, dtype=dtype))


def check_same_shape(a, b, what="operands"):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch for {what}: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

def make_rng(seed, *stream):
    """Counter-based Philox generator keyed by ``seed`` and an optional stream path.

    Different ``stream`` tuples give statistically independent sequences, so
    e.g. dataset generation and weight init never share draws.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


def rng_uniform(rng, shape):
    """Draw a float64 tensor of uniform values in [0, 1)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("rng_uniform needs a non-empty shape")
    if any(s <= 0 for s in shape):
        raise ShapeError(f"shape entries must be positive, got {shape}")
    return rng.random(shape, dtype=DTYPE)


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

def finite_difference_gradient(f, x, eps=1e-6):
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``.

    ``x`` is not modified. Raises ``FloatingPointError`` naming the coordinate
    if ``f`` is non-finite at a probe point.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = tuple(int(v) for v in np.unravel_index(i, x.shape))
            raise FloatingPointError(f"non-finite function value at coordinate {idx}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-12):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=DTYPE).ravel()
    n = np.asarray(numeric, dtype=DTYPE).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


# ---------------------------------------------------------------------------
# FTNS serialization
# ---------------------------------------------------------------------------

class FormatError(ValueError):
    """Malformed tensor or episode file; message carries the byte offset."""


def tensor_to_bytes(t):
    t = as_tensor(t)
    header = FTNS_MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.astype("<f8").tobytes()


def tensor_from_bytes(buf, name="<bytes>"):
    if len(buf) < 8:
        raise FormatError(f"{name}: truncated header at byte offset {len(buf)}")
    if buf[:4] != FTNS_MAGIC:
        raise FormatError(f"{name}: bad magic at byte offset 0")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims_end = 8 + 4 * rank
    if len(buf) < dims_end:
        raise FormatError(f"{name}: truncated dims at byte offset {len(buf)}")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    n = int(np.prod(shape)) if rank else 1
    expected = dims_end + 8 * n
    if len(buf) != expected:
        off = min(len(buf), expected)
        raise FormatError(
            f"{name}: payload size mismatch at byte offset {off} "
            f"(expected {expected} bytes, got {len(buf)})"
        )
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=dims_end)
    return data.astype(DTYPE).reshape(shape)


def save_tensor(path, t):
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path):
    path = Path(path)
    return tensor_from_bytes(path.read_bytes(), name=str(path))
