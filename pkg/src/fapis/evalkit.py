"""Detection and mask scoring: greedy IoU matching, 101-point AP and recall@10.

AP pools predictions from all episodes (one class, so mAP is plain AP),
matching happens per episode. Recall@10 is computed per episode and averaged.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box, iou

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MODES = ("box", "mask")


@dataclass
class ScoredPrediction:
    score: float
    box: Box
    mask: np.ndarray = None

    def __post_init__(self):
        self.score = float(self.score)
        if not np.isfinite(self.score):
            raise ValueError("prediction score must be finite")


@dataclass
class GroundTruth:
    box: Box
    mask: np.ndarray = None


def mask_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _pair_iou(pred, gt, mode):
    if mode == "box":
        return iou(pred.box, gt.box)
    if pred.mask is None or gt.mask is None:
        raise ValueError("mask mode needs masks on predictions and ground truth")
    return mask_iou(pred.mask, gt.mask)


def _order(preds):
    # stable: equal scores keep input order
    return sorted(range(len(preds)), key=lambda i: -preds[i].score)


def match_predictions(preds, gts, iou_thresh=0.5, mode="box"):
    """Label each prediction ``True`` (tp) or ``False`` (fp), in the input order.

    Predictions are visited by descending score; each claims the unmatched
    ground truth with the highest IoU, provided that IoU exceeds ``iou_thresh``.
    """
    if not 0 < iou_thresh < 1:
        raise ValueError("iou_thresh must be in (0, 1)")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    labels = [False] * len(preds)
    free = [True] * len(gts)
    for i in _order(preds):
        best, best_iou = -1, iou_thresh
        for g, gt in enumerate(gts):
            if not free[g]:
                continue
            v = _pair_iou(preds[i], gt, mode)
            if v > best_iou:
                best, best_iou = g, v
        if best >= 0:
            free[best] = False
            labels[i] = True
    return labels


def average_precision(labels, n_gt):
    """101-point interpolated AP of a score-ordered tp/fp sequence."""
    if n_gt < 1:
        raise ValueError("average precision is undefined without ground truth")
    tp = np.cumsum(np.asarray(labels, dtype=np.float64))
    if tp.size == 0:
        return 0.0
    fp = np.arange(1, tp.size + 1) - tp
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # running max from the right gives the interpolated precision envelope
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(vals.mean())


def mean_recall_at_10(labels_per_episode, n_gt_per_episode, k=10):
    """Recall from the ``k`` best predictions of each episode, averaged over episodes.

    Each label list must already be in descending-score order.
    """
    if len(labels_per_episode) != len(n_gt_per_episode):
        raise ValueError("need one ground-truth count per episode")
    if not labels_per_episode:
        raise ValueError("no episodes")
    recalls = []
    for labels, n_gt in zip(labels_per_episode, n_gt_per_episode):
        if n_gt < 1:
            raise ValueError("recall is undefined without ground truth")
        recalls.append(sum(bool(x) for x in labels[:k]) / n_gt)
    return float(np.mean(recalls))


@dataclass
class EvalResult:
    map50_box: float
    map50_mask: float
    mar10_box: float
    mar10_mask: float
    episodes: list = field(default_factory=list)
    importance_fraction: float = float("nan")
    pr_curves: dict = field(default_factory=dict)

    def metrics(self):
        return {
            "map50_box": self.map50_box,
            "map50_mask": self.map50_mask,
            "mar10_box": self.mar10_box,
            "mar10_mask": self.mar10_mask,
            "importance_fraction": self.importance_fraction,
        }

    def as_dict(self):
        return {**self.metrics(), "episodes": self.episodes}


def _pr_curve(labels, n_gt):
    tp = np.cumsum(np.asarray(labels, dtype=np.float64))
    n = np.arange(1, tp.size + 1)
    return tp / n_gt, tp / np.maximum(n, 1)


def score_episodes(preds_per_episode, gts_per_episode, iou_thresh=0.5, modes=MODES):
    """Score lists of :class:`ScoredPrediction` against lists of :class:`GroundTruth`.

    Metrics of modes left out of ``modes`` are NaN.
    """
    if len(preds_per_episode) != len(gts_per_episode):
        raise ValueError("predictions and ground truth cover different episode counts")
    n_gt = [len(g) for g in gts_per_episode]
    metrics = {f"{m}_{mode}": float("nan") for m in ("map50", "mar10") for mode in MODES}
    curves = {}
    rows = [{"episode": e, "n_gt": n, "n_pred": len(p)} for e, (n, p) in enumerate(zip(n_gt, preds_per_episode))]
    for mode in modes:
        pooled = []
        ranked_labels = []
        for e, (preds, gts) in enumerate(zip(preds_per_episode, gts_per_episode)):
            labels = match_predictions(preds, gts, iou_thresh, mode)
            order = _order(preds)
            ranked_labels.append([labels[i] for i in order])
            pooled.extend((preds[i].score, e, i, labels[i]) for i in order)
        # global ranking; ties resolved by episode then in-episode rank
        pooled.sort(key=lambda t: (-t[0], t[1], t[2]))
        labels = [t[3] for t in pooled]
        metrics[f"map50_{mode}"] = average_precision(labels, sum(n_gt))
        metrics[f"mar10_{mode}"] = mean_recall_at_10(ranked_labels, n_gt)
        curves[mode] = _pr_curve(labels, sum(n_gt))
        for e, rl in enumerate(ranked_labels):
            rows[e][f"tp_{mode}"] = int(sum(rl))
            rows[e][f"recall10_{mode}"] = sum(rl[:10]) / n_gt[e]
    return EvalResult(episodes=rows, pr_curves=curves, **metrics)


def write_eval_json(result, path):
    path = Path(path)
    path.write_text(json.dumps(result.as_dict(), indent=2, sort_keys=True) + "\n")


def write_pr_csv(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "rank", "recall", "precision"])
        for mode, (rec, prec) in result.pr_curves.items():
            for i, (r, p) in enumerate(zip(rec, prec)):
                w.writerow([mode, i + 1, f"{r:.6f}", f"{p:.6f}"])
