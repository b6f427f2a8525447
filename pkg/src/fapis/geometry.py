"""Boxes, IoU/GIoU, ltrb encoding, dense target assignment, NMS and ROI-align.

Coordinates are continuous pixel coordinates: pixel (row r, col c) covers
[c, c+1) x [r, r+1), so its center is (c + 0.5, r + 0.5). Feature-grid
location (x, y) at stride s sits at image point ((x + 0.5) s, (y + 0.5) s).
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box has negative extent: {vals}")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    def scaled(self, k):
        return Box(self.x1 * k, self.y1 * k, self.x2 * k, self.y2 * k)

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def as_list(self):
        return [float(self.x1), float(self.y1), float(self.x2), float(self.y2)]

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class LtrbTarget:
    l: float
    t: float
    r: float
    b: float


@dataclass
class DenseTargets:
    """Per-location training targets for one feature level."""

    cls: np.ndarray  # (H, W) in {0, 1}
    reg: np.ndarray  # (H, W, 4) ltrb, zero at background
    box_id: np.ndarray  # (H, W) int, -1 at background
    stride: float

    @property
    def n_pos(self):
        return int(self.cls.sum())


def _intersection(a, b):
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    return max(w, 0.0) * max(h, 0.0)


def iou(a, b):
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def giou(a, b):
    """Generalized IoU in [-1, 1]."""
    if a.area == 0 and b.area == 0:
        raise ValueError("giou undefined for two zero-area boxes")
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (hull - union) / hull


def iou_matrix(a, b):
    """Pairwise IoU between (N, 4) and (M, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def encode_ltrb(loc_x, loc_y, box):
    if not (box.x1 < loc_x < box.x2 and box.y1 < loc_y < box.y2):
        raise ValueError(f"location ({loc_x}, {loc_y}) is not strictly inside {box}")
    return LtrbTarget(loc_x - box.x1, loc_y - box.y1, box.x2 - loc_x, box.y2 - loc_y)


def decode_ltrb(loc_x, loc_y, t):
    return Box(loc_x - t.l, loc_y - t.t, loc_x + t.r, loc_y + t.b)


def grid_centers(grid_h, grid_w, stride):
    """Image-space centers of a feature grid, each (H, W)."""
    ys = (np.arange(grid_h) + 0.5) * stride
    xs = (np.arange(grid_w) + 0.5) * stride
    return np.meshgrid(xs, ys)


def decode_dense(reg, stride):
    """Decode an (H, W, 4) ltrb map into an (H, W, 4) array of x1y1x2y2 boxes."""
    cx, cy = grid_centers(reg.shape[0], reg.shape[1], stride)
    return np.stack(
        [cx - reg[..., 0], cy - reg[..., 1], cx + reg[..., 2], cy + reg[..., 3]], axis=-1
    )


def assign_targets(gt_boxes, grid_h, grid_w, stride, range_min=0.0, range_max=np.inf):
    """FCOS-style dense target assignment on one feature level.

    A location is positive when its image point is strictly inside a GT box
    whose max(l, t, r, b) falls in [range_min, range_max). When several boxes
    qualify, the smallest-area box wins, then the lowest index.
    """
    if stride <= 0:
        raise ValueError("stride must be positive")
    if not range_min < range_max:
        raise ValueError("range_min must be < range_max")
    cls = np.zeros((grid_h, grid_w))
    reg = np.zeros((grid_h, grid_w, 4))
    box_id = np.full((grid_h, grid_w), -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        return DenseTargets(cls, reg, box_id, stride)

    cx, cy = grid_centers(grid_h, grid_w, stride)
    b = np.array([bx.as_array() for bx in gt_boxes])  # (K, 4)
    l = cx[..., None] - b[:, 0]
    t = cy[..., None] - b[:, 1]
    r = b[:, 2] - cx[..., None]
    bb = b[:, 3] - cy[..., None]
    ltrb = np.stack([l, t, r, bb], axis=-1)  # (H, W, K, 4)
    inside = ltrb.min(axis=-1) > 0
    m = ltrb.max(axis=-1)
    ok = inside & (m >= range_min) & (m < range_max)

    area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    # lexsort on (index, area): smallest area first, then lowest index
    order = np.lexsort((np.arange(len(gt_boxes)), area))
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    best_rank = np.where(ok, rank[None, None, :], len(order)).min(axis=-1)
    pos = ok.any(axis=-1)
    best_idx = order[best_rank.clip(max=len(order) - 1)]
    cls[pos] = 1.0
    box_id[pos] = best_idx[pos]
    sel = np.take_along_axis(ltrb, best_idx[..., None, None].repeat(4, -1), axis=2)[:, :, 0]
    reg[pos] = sel[pos]
    return DenseTargets(cls, reg, box_id, stride)


def nms(boxes, scores, iou_thresh=0.5, top_n=100):
    """Greedy NMS; returns kept indices in selection order.

    Scores are visited in descending order with ties broken by lower index. A
    box is dropped when its IoU with an already kept box exceeds ``iou_thresh``.
    """
    n = len(boxes)
    if n == 0:
        return []
    if len(scores) != n:
        raise ValueError("boxes and scores differ in length")
    arr = np.array([bx.as_array() if isinstance(bx, Box) else bx for bx in boxes], dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(n), -scores))
    ious = iou_matrix(arr, arr)
    keep = []
    suppressed = np.zeros(n, dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        if len(keep) >= top_n:
            break
        suppressed |= ious[i] > iou_thresh
    return keep


# ---------------------------------------------------------------------------
# ROI-align
# ---------------------------------------------------------------------------

def _axis_weights(lo, hi, n_out, size):
    """(n_out, size) interpolation matrix for one axis, 2 samples per bin."""
    w = np.zeros((n_out, size))
    bin_len = (hi - lo) / n_out
    rows = np.repeat(np.arange(n_out), 2)
    pos = lo + (rows + np.tile([0.25, 0.75], n_out)) * bin_len
    u = np.clip(pos - 0.5, 0.0, size - 1)
    k0 = np.floor(u).astype(np.int64)
    k1 = np.minimum(k0 + 1, size - 1)
    frac = u - k0
    np.add.at(w, (rows, k0), 0.5 * (1.0 - frac))
    np.add.at(w, (rows, k1), 0.5 * frac)
    return w


def clamp_box(box, h, w):
    return Box(
        min(max(box.x1, 0.0), w), min(max(box.y1, 0.0), h),
        min(max(box.x2, 0.0), w), min(max(box.y2, 0.0), h),
    )


def roi_align_matrices(box, h, w, out_h, out_w):
    """Separable ROI-align operators ``(Ay, Ax)`` so that out = Ay @ F @ Ax.T per channel."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    cb = clamp_box(box, h, w)
    if cb.width <= 0 or cb.height <= 0:
        raise ValueError(f"zero-area box after clamping: {box}")
    return _axis_weights(cb.y1, cb.y2, out_h, h), _axis_weights(cb.x1, cb.x2, out_w, w)


def roi_align(featmap, box, out_h, out_w):
    """Pool an (H, W, C) map inside ``box`` (feature coords) to (out_h, out_w, C).

    Each output cell averages 2x2 bilinear samples at its regular sub-grid
    points. Use :func:`roi_align_backward` for the gradient w.r.t. the map.
    """
    ay, ax = roi_align_matrices(box, featmap.shape[0], featmap.shape[1], out_h, out_w)
    return np.einsum("ih,hwc,jw->ijc", ay, featmap, ax, optimize=True)


def roi_align_backward(grad_out, box, feat_shape):
    h, w = feat_shape[0], feat_shape[1]
    ay, ax = roi_align_matrices(box, h, w, grad_out.shape[0], grad_out.shape[1])
    return np.einsum("ih,ijc,jw->hwc", ay, grad_out, ax, optimize=True)


def paste_roi(roi_map, box, img_h, img_w):
    """Resample an (Hr, Wr) box-relative map back onto an (img_h, img_w) canvas.

    Pixels whose centers fall outside ``box`` are zero.
    """
    hr, wr = roi_map.shape
    out = np.zeros((img_h, img_w))
    cb = clamp_box(box, img_h, img_w)
    if box.width <= 0 or box.height <= 0:
        return out
    r0, r1 = int(np.floor(cb.y1)), int(np.ceil(cb.y2))
    c0, c1 = int(np.floor(cb.x1)), int(np.ceil(cb.x2))
    rows = np.arange(r0, r1) + 0.5
    cols = np.arange(c0, c1) + 0.5
    rows = rows[(rows > box.y1) & (rows < box.y2)]
    cols = cols[(cols > box.x1) & (cols < box.x2)]
    if rows.size == 0 or cols.size == 0:
        return out
    wy = _lerp_matrix((rows - box.y1) / box.height * hr - 0.5, hr)
    wx = _lerp_matrix((cols - box.x1) / box.width * wr - 0.5, wr)
    patch = wy @ roi_map @ wx.T
    ri = (rows - 0.5).astype(np.int64)
    ci = (cols - 0.5).astype(np.int64)
    out[np.ix_(ri, ci)] = patch
    return out


def _lerp_matrix(u, size):
    u = np.clip(u, 0.0, size - 1)
    k0 = np.floor(u).astype(np.int64)
    k1 = np.minimum(k0 + 1, size - 1)
    frac = u - k0
    m = np.zeros((len(u), size))
    idx = np.arange(len(u))
    np.add.at(m, (idx, k0), 1.0 - frac)
    np.add.at(m, (idx, k1), frac)
    return m


def mask_to_box(mask):
    """Tight box of a binary (H, W) mask, pixel-edge convention."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("empty mask has no bounding box")
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
