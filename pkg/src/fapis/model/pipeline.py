"""Episode-level forward pass, training losses with full backprop, and SGD."""

from dataclasses import dataclass

import numpy as np

from ..geometry import Box, assign_targets, decode_dense, nms, paste_roi, roi_align, roi_align_backward
from ..losses import FocalConfig, LossWeights, dice_loss, focal_loss, giou_loss, make_report, nmf_reg_loss
from . import layers as L
from . import ops
from .network import backward_dense, forward_dense


@dataclass
class DensePredictions:
    cls: np.ndarray  # (H, W) in (0, 1)
    reg: np.ndarray  # (H, W, 4) >= 0
    imp: np.ndarray  # (H, W, J)
    stride: float


@dataclass
class InstancePrediction:
    box: Box
    score: float
    importance: np.ndarray  # (J,) raw, pre-sigmoid
    mask: np.ndarray  # (H_r, W_r) in [0, 1]
    level: int
    loc: tuple  # (y, x) on the level grid
    full_mask: np.ndarray = None  # (img, img) binary, query resolution


def _stack(episodes):
    return (
        np.stack([e.support_img for e in episodes]),
        [e.support_mask for e in episodes],
        np.stack([e.query_img for e in episodes]),
    )


def level_targets(ep, out, n, cfg):
    targets = []
    for li, stride in enumerate(cfg.strides):
        h, w = out["cls"][li].shape[1:3]
        lo, hi = cfg.level_ranges[li]
        targets.append(assign_targets(ep.query_boxes, h, w, stride, lo, hi))
    return targets


def pick_instance_location(k, box, targets, scores_n, cfg):
    """Location whose importance vector represents GT instance ``k`` in training.

    The highest-scoring positive location assigned to the instance; if none,
    the level-0 cell holding the box center.
    """
    best = None
    for li, t in enumerate(targets):
        ys, xs = np.nonzero(t.box_id == k)
        if ys.size == 0:
            continue
        s = scores_n[li][ys, xs]
        i = int(np.argmax(s))
        if best is None or s[i] > best[0]:
            best = (s[i], li, int(ys[i]), int(xs[i]))
    if best is not None:
        return best[1], best[2], best[3]
    stride = cfg.strides[0]
    h, w = targets[0].cls.shape
    y = min(max(int((box.y1 + box.y2) / 2 // stride), 0), h - 1)
    x = min(max(int((box.x1 + box.x2) / 2 // stride), 0), w - 1)
    return 0, y, x


def gt_mask_target(mask, box, cfg):
    pooled = roi_align(mask[..., None], box, cfg.h_r, cfg.w_r)[..., 0]
    return (pooled >= 0.5).astype(np.float64)


def loss_and_grads(params, episodes, basis, cfg, weights=LossWeights(), focal=FocalConfig(),
                   need_grad=True):
    """Batch-mean of the weighted loss over ``episodes`` and its parameter gradients.

    Returns ``(report, grads)``; ``grads`` is None when ``need_grad`` is false.
    ``basis`` may be None only when ``weights.lambda4 == 0``.
    """
    if basis is None and weights.lambda4 != 0:
        raise ValueError("a part basis is required when lambda4 > 0")
    s_imgs, s_masks, q_imgs = _stack(episodes)
    out, cache = forward_dense(params, s_imgs, s_masks, q_imgs, cfg)
    n_ep = len(episodes)
    ps = cfg.part_stride
    d = {
        "cls_logit": [np.zeros_like(x) for x in out["cls_logit"]],
        "reg": [np.zeros_like(x) for x in out["reg"]],
        "imp": [np.zeros_like(x) for x in out["imp"]],
        "parts": np.zeros_like(out["parts"]),
    }
    sums = np.zeros(4)
    for n, ep in enumerate(episodes):
        targets = level_targets(ep, out, n, cfg)
        scores_n = [c[n] for c in out["cls"]]

        flat_s = np.concatenate([s.ravel() for s in scores_n])
        flat_t = np.concatenate([t.cls.ravel() for t in targets])
        l_c, g_c = focal_loss(flat_s, flat_t, focal)
        off = 0
        for li, s in enumerate(scores_n):
            g = g_c[off: off + s.size].reshape(s.shape)
            off += s.size
            d["cls_logit"][li][n] = weights.lambda1 / n_ep * g * s * (1 - s)

        n_pos = [t.n_pos for t in targets]
        total_pos = sum(n_pos)
        l_b = 0.0
        for li, t in enumerate(targets):
            if n_pos[li] == 0:
                continue
            v, g = giou_loss(out["reg"][li][n], t)
            frac = n_pos[li] / total_pos
            l_b += v * frac
            d["reg"][li][n] = weights.lambda2 / n_ep * frac * g

        k_inst = len(ep.query_boxes)
        inst = []
        for k, box in enumerate(ep.query_boxes):
            li, y, x = pick_instance_location(k, box, targets, scores_n, cfg)
            pooled = roi_align(out["parts"][n], box.scaled(1.0 / ps), cfg.h_r, cfg.w_r)
            mask, pcache = ops.pam_fuse(pooled, out["imp"][li][n, y, x])
            tgt = gt_mask_target(ep.query_masks[k], box, cfg)
            v, dm = dice_loss(mask, tgt)
            inst.append((box, li, y, x, pcache, v, dm))
        l_s = sum(i[5] for i in inst) / k_inst

        l_nmf, d_pp = 0.0, None
        if basis is not None:
            p_plus = np.stack([i[4][0] for i in inst])
            l_nmf, d_pp, _ = nmf_reg_loss(p_plus, basis)

        if need_grad:
            for k, (box, li, y, x, pcache, _, dm) in enumerate(inst):
                extra = None
                if d_pp is not None and weights.lambda4:
                    extra = weights.lambda4 / n_ep * d_pp[k]
                dpooled, dimp = ops.pam_fuse_backward(weights.lambda3 / (n_ep * k_inst) * dm, pcache, extra)
                d["parts"][n] += roi_align_backward(dpooled, box.scaled(1.0 / ps), out["parts"].shape[1:])
                d["imp"][li][n, y, x] += dimp
        sums += (l_c, l_b, l_s, l_nmf)

    means = sums / n_ep
    report = make_report(*means, w=weights)
    if not need_grad:
        return report, None
    grads = backward_dense(params, d, cache, cfg)
    report.grad_norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    return report, grads


def train_step(episodes, params, basis, weights, lr, momentum, cfg, velocity=None,
               focal=FocalConfig(), max_grad_norm=None):
    """One SGD-with-momentum update on a batch (or a single episode).

    Returns ``(new_params, report)``. ``velocity`` (a dict of momentum buffers)
    is updated in place when given. Raises ``FloatingPointError`` naming the
    offending term, leaving ``params`` and ``velocity`` untouched, when the
    loss is not finite.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if not isinstance(episodes, (list, tuple)):
        episodes = [episodes]
    report, grads = loss_and_grads(params, episodes, basis, cfg, weights, focal)
    if not np.isfinite(report.grad_norm):
        raise FloatingPointError("gradient norm is not finite")
    scale = 1.0
    if max_grad_norm is not None and report.grad_norm > max_grad_norm:
        scale = max_grad_norm / report.grad_norm
    new = {}
    for k, p in params.items():
        g = grads[k] * scale
        if velocity is not None:
            v = velocity.get(k)
            v = g.copy() if v is None else momentum * v + g
            velocity[k] = v
            g = v
        new[k] = p - lr * g
    return new, report


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def forward(episode, params, cfg):
    """Run the full pipeline on one episode.

    Returns ``(dense, parts, instances)``: a :class:`DensePredictions` per
    level, the (2H0, 2W0, J) part maps and the NMS-selected instances with
    their assembled masks.
    """
    out, _ = forward_dense(
        params, episode.support_img[None], [episode.support_mask], episode.query_img[None], cfg
    )
    dense = [
        DensePredictions(out["cls"][li][0], out["reg"][li][0], out["imp"][li][0], cfg.strides[li])
        for li in range(len(cfg.strides))
    ]
    parts = out["parts"][0]
    return dense, parts, select_instances(dense, parts, cfg, episode.query_img.shape)


def select_instances(dense, parts, cfg, img_shape):
    cand_boxes, cand_scores, cand_src = [], [], []
    for li, dp in enumerate(dense):
        boxes = decode_dense(dp.reg, dp.stride)
        ys, xs = np.nonzero(dp.cls > cfg.score_thresh)
        for y, x in zip(ys, xs):
            cand_boxes.append(boxes[y, x])
            cand_scores.append(dp.cls[y, x])
            cand_src.append((li, int(y), int(x)))
    keep = nms(cand_boxes, cand_scores, cfg.nms_iou, cfg.top_n)
    img_h, img_w = img_shape
    ps = cfg.part_stride
    instances = []
    for i in keep:
        li, y, x = cand_src[i]
        b = cand_boxes[i]
        box = Box(max(b[0], 0.0), max(b[1], 0.0), min(b[2], img_w), min(b[3], img_h))
        if box.width <= 0 or box.height <= 0:
            continue
        imp = dense[li].imp[y, x].copy()
        pooled = roi_align(parts, box.scaled(1.0 / ps), cfg.h_r, cfg.w_r)
        mask, _ = ops.pam_fuse(pooled, imp)
        full = paste_roi(mask, box, img_h, img_w) >= 0.5
        instances.append(InstancePrediction(box, float(cand_scores[i]), imp, mask, li, (y, x), full))
    return instances


def importance_fraction(instances, theta=0.5):
    """Mean fraction of parts per instance whose gated importance exceeds ``theta``."""
    if not instances:
        return float("nan")
    return float(np.mean([np.mean(L.sigmoid(i.importance) > theta) for i in instances]))
