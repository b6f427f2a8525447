"""Training losses with hand-derived gradients.

Every function returns ``(value, grad)`` where ``grad`` has the shape of the
prediction argument.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import grid_centers
from .numeric import check_same_shape
from .partfactor import binary_iou_cost, hungarian

SCORE_EPS = 1e-7


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0 <= self.gamma <= 5:
            raise ValueError("gamma must lie in [0, 5]")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 0.1

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    l_c: float
    l_b: float
    l_s: float
    l_nmf: float
    total: float
    grad_norm: float = 0.0

    def as_dict(self):
        return asdict(self)


def focal_loss(scores, targets, cfg=FocalConfig()):
    """Focal loss averaged over all H*W locations.

    Scores are clamped to [1e-7, 1 - 1e-7]; the gradient is zero where the
    clamp is active.
    """
    check_same_shape(scores, targets, "focal_loss")
    if not np.all((targets == 0) | (targets == 1)):
        raise ValueError("focal targets must be 0 or 1")
    c = np.clip(scores, SCORE_EPS, 1 - SCORE_EPS)
    pos = targets == 1
    cp = np.where(pos, c, 1 - c)
    ap = np.where(pos, cfg.alpha, 1 - cfg.alpha)
    g = cfg.gamma
    one_m = 1 - cp
    log_cp = np.log(cp)
    n = scores.size
    loss = -np.sum(ap * one_m**g * log_cp) / n

    # d/dc' of -a (1-c')^g log c'
    if g > 0:
        d_cp = -ap * (one_m**g / cp - g * one_m ** (g - 1) * log_cp)
    else:
        d_cp = -ap / cp
    grad = np.where(pos, d_cp, -d_cp) / n
    grad = grad * ((scores > SCORE_EPS) & (scores < 1 - SCORE_EPS))
    return float(loss), grad


def giou_terms(pred, target):
    """Per-row 1 - GIoU for (K, 4) x1y1x2y2 boxes and the gradient w.r.t. ``pred``.

    ``target`` boxes must have positive area.
    """
    px1, py1, px2, py2 = pred.T
    tx1, ty1, tx2, ty2 = target.T
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)

    iw_raw = np.minimum(px2, tx2) - np.maximum(px1, tx1)
    ih_raw = np.minimum(py2, ty2) - np.maximum(py1, ty1)
    iw = np.clip(iw_raw, 0, None)
    ih = np.clip(ih_raw, 0, None)
    inter = iw * ih
    union = area_p + area_t - inter
    cw = np.maximum(px2, tx2) - np.minimum(px1, tx1)
    ch = np.maximum(py2, ty2) - np.minimum(py1, ty1)
    hull = cw * ch
    loss = 2.0 - inter / union - union / hull

    # d loss / d inter, d union, d hull
    dl_di = -1.0 / union
    dl_du = inter / union**2 - 1.0 / hull
    dl_dh = union / hull**2

    # union = area_p + area_t - inter
    dl_di_total = dl_di - dl_du
    w_on = (iw_raw > 0) * ih
    h_on = (ih_raw > 0) * iw
    di_dx1 = -1.0 * (px1 >= tx1) * w_on
    di_dx2 = 1.0 * (px2 <= tx2) * w_on
    di_dy1 = -1.0 * (py1 >= ty1) * h_on
    di_dy2 = 1.0 * (py2 <= ty2) * h_on
    da_dx1 = -(py2 - py1)
    da_dx2 = py2 - py1
    da_dy1 = -(px2 - px1)
    da_dy2 = px2 - px1
    dh_dx1 = -1.0 * (px1 < tx1) * ch
    dh_dx2 = 1.0 * (px2 > tx2) * ch
    dh_dy1 = -1.0 * (py1 < ty1) * cw
    dh_dy2 = 1.0 * (py2 > ty2) * cw

    grad = np.stack(
        [
            dl_di_total * di_dx1 + dl_du * da_dx1 + dl_dh * dh_dx1,
            dl_di_total * di_dy1 + dl_du * da_dy1 + dl_dh * dh_dy1,
            dl_di_total * di_dx2 + dl_du * da_dx2 + dl_dh * dh_dx2,
            dl_di_total * di_dy2 + dl_du * da_dy2 + dl_dh * dh_dy2,
        ],
        axis=1,
    )
    return loss, grad


def giou_loss(reg, targets):
    """Mean of 1 - GIoU over positive locations of an (H, W, 4) ltrb map."""
    h, w, _ = reg.shape
    if targets.cls.shape != (h, w):
        raise ValueError(f"targets grid {targets.cls.shape} != regression grid {(h, w)}")
    grad = np.zeros_like(reg)
    pos = targets.cls == 1
    n_pos = int(pos.sum())
    if n_pos == 0:
        return 0.0, grad
    cx, cy = grid_centers(h, w, targets.stride)
    cx, cy = cx[pos], cy[pos]
    t = reg[pos]
    ts = targets.reg[pos]
    pred = np.stack([cx - t[:, 0], cy - t[:, 1], cx + t[:, 2], cy + t[:, 3]], axis=1)
    tgt = np.stack([cx - ts[:, 0], cy - ts[:, 1], cx + ts[:, 2], cy + ts[:, 3]], axis=1)
    terms, g_box = giou_terms(pred, tgt)
    # x1 = cx - l, y1 = cy - t, x2 = cx + r, y2 = cy + b
    grad[pos] = g_box * np.array([-1.0, -1.0, 1.0, 1.0]) / n_pos
    return float(terms.sum() / n_pos), grad


def dice_loss(pred, gt):
    """1 - 2<A, B> / (|A|^2 + |B|^2); gradient w.r.t. ``pred``."""
    check_same_shape(pred, gt, "dice_loss")
    s_ab = float(np.sum(pred * gt))
    denom = float(np.sum(pred * pred) + np.sum(gt * gt))
    if denom <= 0:
        raise ValueError("dice loss undefined for two all-zero maps")
    loss = 1.0 - 2.0 * s_ab / denom
    grad = (-2.0 * gt * denom + 4.0 * s_ab * pred) / denom**2
    return loss, grad


def dice_columns(a, b):
    """Column-wise dice loss between (P, K) matrices; returns (losses (K,), grad w.r.t. a)."""
    s_ab = np.sum(a * b, axis=0)
    denom = np.sum(a * a, axis=0) + np.sum(b * b, axis=0)
    if np.any(denom <= 0):
        raise ValueError("dice loss undefined for two all-zero maps")
    loss = 1.0 - 2.0 * s_ab / denom
    grad = (-2.0 * b * denom + 4.0 * s_ab * a) / denom**2
    return loss, grad


def match_parts(parts, basis, bin_thresh=0.5):
    """Hungarian match of one instance's (H_r, W_r, J) parts to the basis columns."""
    hr, wr, j = parts.shape
    if j != basis.j:
        raise ValueError(f"part count {j} != basis columns {basis.j}")
    if (hr, wr) != (basis.h_r, basis.w_r):
        raise ValueError(f"part maps {(hr, wr)} != basis size {(basis.h_r, basis.w_r)}")
    a = parts.reshape(hr * wr, j) >= bin_thresh
    b = basis.basis >= bin_thresh
    return hungarian(binary_iou_cost(a, b))


def nmf_reg_loss(parts, basis, n_instances=None):
    """Part-basis regularizer averaged over instances.

    Args:
        parts: (N, H_r, W_r, J) max-normalized part maps, one stack per instance.
        basis: the precomputed :class:`~fapis.partfactor.PartBasis`.
        n_instances: defaults to ``len(parts)``.

    Returns:
        ``(loss, grad, perms)``; the matching is held fixed for the gradient.
    """
    parts = np.asarray(parts, dtype=np.float64)
    if parts.ndim == 3:
        parts = parts[None]
    n = len(parts) if n_instances is None else int(n_instances)
    grad = np.zeros_like(parts)
    if n == 0:
        return 0.0, grad, []
    total = 0.0
    perms = []
    for k, p in enumerate(parts):
        perm = match_parts(p, basis)
        perms.append(perm)
        a = p.reshape(-1, p.shape[-1])
        b = basis.basis[:, perm]
        losses, g = dice_columns(a, b)
        total += float(losses.sum())
        grad[k] = g.reshape(p.shape) / n
    return total / n, grad, perms


def total_loss(l_c, l_b, l_s, l_nmf, w=LossWeights()):
    for name, v in (("l_c", l_c), ("l_b", l_b), ("l_s", l_s), ("l_nmf", l_nmf)):
        if not np.isfinite(v):
            raise FloatingPointError(f"loss term {name} is not finite ({v})")
    return w.lambda1 * l_c + w.lambda2 * l_b + w.lambda3 * l_s + w.lambda4 * l_nmf


def make_report(l_c, l_b, l_s, l_nmf, w=LossWeights(), grad_norm=0.0):
    terms = [float(v) for v in (l_c, l_b, l_s, l_nmf)]
    return LossReport(*terms, float(total_loss(*terms, w)), float(grad_norm))
