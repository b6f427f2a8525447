"""Part basis machinery: size-normalized mask stacks, multiplicative-update NMF,
IoU matching costs and a Hungarian solver with deterministic tie-breaking.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import as_tensor, load_tensor, make_rng, save_tensor

log = logging.getLogger(__name__)

NMF_EPS = 1e-9


@dataclass
class PartBasis:
    basis: np.ndarray  # (h_r * w_r, j), columns max-normalized
    h_r: int
    w_r: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.basis.shape[0] != self.h_r * self.w_r:
            raise ValueError(f"basis rows {self.basis.shape[0]} != {self.h_r}x{self.w_r}")
        if np.any(self.basis < 0):
            raise ValueError("part basis must be non-negative")
        if np.any(self.basis.max(axis=0) <= 0):
            raise ValueError("part basis has an all-zero column")

    @property
    def j(self):
        return self.basis.shape[1]

    def maps(self):
        """Basis as an (h_r, w_r, j) stack of part maps."""
        return self.basis.reshape(self.h_r, self.w_r, self.j)

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_tensor(out_dir / "basis.ftns", self.basis)
        header = {"h_r": self.h_r, "w_r": self.w_r, "j": self.j, **self.meta}
        (out_dir / "basis.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, in_dir):
        in_dir = Path(in_dir)
        header = json.loads((in_dir / "basis.json").read_text())
        basis = load_tensor(in_dir / "basis.ftns")
        if basis.ndim != 2 or basis.shape[1] != header["j"]:
            raise ValueError(f"basis.ftns shape {basis.shape} disagrees with header j={header['j']}")
        meta = {k: v for k, v in header.items() if k not in ("h_r", "w_r", "j")}
        return cls(basis, int(header["h_r"]), int(header["w_r"]), meta)


@dataclass
class MaskStack:
    m: np.ndarray  # (h_r * w_r, d) in {0, 1}
    h_r: int
    w_r: int
    skipped: int = 0

    @property
    def d(self):
        return self.m.shape[1]


# ---------------------------------------------------------------------------
# Mask stacking
# ---------------------------------------------------------------------------

def area_resize_matrix(n_in, n_out):
    """(n_out, n_in) matrix averaging input cells by their overlap with each output cell."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    k = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, k + 1) - np.maximum(lo, k), 0, None)
    return overlap / (hi - lo)


def area_resize(img, out_h, out_w):
    ry = area_resize_matrix(img.shape[0], out_h)
    rx = area_resize_matrix(img.shape[1], out_w)
    return ry @ img @ rx.T


def crop_to_box(mask):
    """Crop a binary mask to the tight box of its nonzero pixels."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("cannot crop an empty mask")
    return mask[ys.min(): ys.max() + 1, xs.min(): xs.max() + 1]


def stack_masks(masks, h_r, w_r):
    """Resize each mask to (h_r, w_r), binarize at 0.5 and stack as columns.

    Masks that come out empty are skipped and counted in ``skipped``.
    """
    cols = []
    skipped = 0
    for mk in masks:
        small = area_resize(as_tensor(mk), h_r, w_r) >= 0.5
        if not small.any():
            skipped += 1
            continue
        cols.append(small.reshape(-1).astype(np.float64))
    if skipped:
        log.warning("stack_masks: skipped %d masks that were empty after resizing", skipped)
    m = np.stack(cols, axis=1) if cols else np.zeros((h_r * w_r, 0))
    return MaskStack(m, h_r, w_r, skipped)


# ---------------------------------------------------------------------------
# NMF
# ---------------------------------------------------------------------------

def nmf_multiplicative(m, j, iters, seed, track=False):
    """Lee-Seung multiplicative updates for min ||M - P U||_F^2 with P, U >= 0.

    Returns ``(P, U, objectives)``; ``objectives`` holds the squared Frobenius
    residual after every update pair when ``track`` is set, else is empty.
    """
    m = as_tensor(m)
    n, d = m.shape
    if j < 1 or iters < 1:
        raise ValueError("j and iters must be >= 1")
    if j > d:
        raise ValueError(f"over-complete basis unsupported: j={j} > d={d}")
    rng = make_rng(seed, 0x4E4D46)
    p = 0.1 + rng.random((n, j))
    u = 0.1 + rng.random((j, d))
    objectives = []
    for _ in range(iters):
        u *= (p.T @ m) / ((p.T @ p) @ u + NMF_EPS)
        p *= (m @ u.T) / (p @ (u @ u.T) + NMF_EPS)
        if track:
            objectives.append(float(np.sum((m - p @ u) ** 2)))
    return p, u, objectives


def nmf_factorize(stack, j, iters=500, seed=0):
    """Factorize a mask stack into a max-normalized :class:`PartBasis` and weights (j, d)."""
    p, u, _ = nmf_multiplicative(stack.m, j, iters, seed)
    scale = p.max(axis=0)
    scale[scale <= 0] = 1.0
    p = p / scale
    u = u * scale[:, None]
    meta = {"seed": int(seed), "iters": int(iters), "d": int(stack.d)}
    return PartBasis(p, stack.h_r, stack.w_r, meta), u


def reconstruction_error(m, p, u):
    """Relative Frobenius error ||M - PU|| / ||M||."""
    return float(np.linalg.norm(m - p @ u) / np.linalg.norm(m))


# ---------------------------------------------------------------------------
# Assignment
# ---------------------------------------------------------------------------

def _hungarian_potentials(c):
    """Shortest augmenting path Hungarian method; returns (row->col, u, v)."""
    n = c.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[col] = row, 1-based, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = np.zeros(n, dtype=np.int64)
    for col in range(1, n + 1):
        perm[p[col] - 1] = col - 1
    return perm, u[1:], v[1:]


def _reroute(adj, start, target, banned, fixed, owner, match):
    """Alternating path in the tight graph from row ``start`` to column ``target``.

    On success the rows along the path are shifted one edge and True is returned.
    """
    seen = set()

    def walk(r):
        for c in adj[r]:
            if c in fixed or c == banned or c in seen:
                continue
            seen.add(c)
            if c == target or walk(owner[c]):
                match[r] = c
                owner[c] = r
                return True
        return False

    return walk(start)


def hungarian(cost):
    """Minimum-cost perfect assignment for a square matrix.

    Returns ``perm`` with row ``j`` assigned to column ``perm[j]``. Among all
    optimal permutations the lexicographically smallest one is returned.
    """
    c = as_tensor(cost)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    n = c.shape[0]
    if n == 0:
        return []
    perm, u, v = _hungarian_potentials(c)
    # every optimal assignment uses only zero-reduced-cost edges
    tol = 1e-9 * max(1.0, float(np.abs(c).max()))
    tight = (c - u[:, None] - v[None, :]) <= tol
    tight[np.arange(n), perm] = True
    adj = [list(np.nonzero(row)[0]) for row in tight]
    match = [int(x) for x in perm]
    owner = {c: r for r, c in enumerate(match)}
    fixed = set()
    # walk rows in order, moving each to its smallest column that still
    # leaves a perfect matching on the remaining rows
    for r in range(n):
        for col in adj[r]:
            if col >= match[r]:
                break
            if col in fixed:
                continue
            old, other = match[r], owner[col]
            trial_match, trial_owner = list(match), dict(owner)
            if _reroute(adj, other, old, col, fixed, trial_owner, trial_match):
                match, owner = trial_match, trial_owner
                match[r], owner[col] = col, r
                break
        fixed.add(match[r])
    return match


def assignment_cost(cost, perm):
    c = np.asarray(cost)
    return float(c[np.arange(len(perm)), perm].sum())


def binary_iou_cost(a, b):
    """1 - IoU between the columns of two boolean (pixels, J) matrices; empty/empty -> 1."""
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    inter = a.T @ b
    union = a.sum(0)[:, None] + b.sum(0)[None, :] - inter
    iou = np.zeros_like(inter)
    np.divide(inter, union, out=iou, where=union > 0)
    return 1.0 - iou


def iou_cost_matrix(parts, basis, bin_thresh=0.5):
    """(J, J) matching cost between part maps (H_r, W_r, J) and basis columns."""
    if not 0 < bin_thresh < 1:
        raise ValueError("bin_thresh must be in (0, 1)")
    hr, wr, j = parts.shape
    if (hr, wr, j) != (basis.h_r, basis.w_r, basis.j):
        raise ValueError(f"parts {parts.shape} disagree with basis ({basis.h_r}, {basis.w_r}, {basis.j})")
    a = parts.reshape(hr * wr, j) >= bin_thresh
    b = basis.basis >= bin_thresh
    return binary_iou_cost(a, b)
