"""Epoch loop, checkpoints and model evaluation on episode corpora."""

import csv
import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .losses import LossWeights
from .evalkit import GroundTruth, ScoredPrediction, score_episodes
from .model import forward, importance_fraction, init_params, param_shapes, train_step
from .numeric import FormatError, load_tensor, make_rng, save_tensor

MANIFEST = "manifest.json"
LOG_FIELDS = ("epoch", "step", "lr", "l_c", "l_b", "l_s", "l_nmf", "total", "grad_norm")


def batch_order(n, epoch, seed):
    return make_rng(seed, 0x5EF, epoch).permutation(n)


def fit(episodes, basis, cfg: RunConfig, log=None, params=None):
    """Train from a seeded init. Returns ``(params, rows)`` with one log row per step.

    ``log`` is an optional callable receiving each row as it is produced.
    """
    mcfg = cfg.model_config()
    if basis is not None and basis.j != cfg.j:
        raise ValueError(f"basis has {basis.j} parts but the config asks for {cfg.j}")
    params = init_params(mcfg, cfg.seed) if params is None else params
    weights = cfg.weights if basis is not None else LossWeights(*cfg.lambdas[:3], 0.0)
    velocity = {}
    steps_per_epoch = -(-len(episodes) // cfg.batch)
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        order = batch_order(len(episodes), epoch, cfg.seed)
        for b in range(steps_per_epoch):
            batch = [episodes[i] for i in order[b * cfg.batch: (b + 1) * cfg.batch]]
            lr = cfg.lr_at(step, steps_per_epoch)
            params, rep = train_step(
                batch, params, basis, weights, lr, cfg.momentum, mcfg,
                velocity=velocity, focal=cfg.focal, max_grad_norm=cfg.max_grad_norm,
            )
            row = {"epoch": epoch, "step": step, "lr": lr, **rep.as_dict()}
            rows.append(row)
            if log is not None:
                log(row)
            step += 1
    return params, rows


def write_loss_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k not in ("epoch", "step") else r[k]) for k in LOG_FIELDS})


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params, cfg: RunConfig, step, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in sorted(params):
        save_tensor(directory / f"{name}.ftns", params[name])
    manifest = {
        "config": cfg.as_dict(),
        "seed": cfg.seed,
        "shapes": {k: list(params[k].shape) for k in sorted(params)},
        "step": int(step),
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory):
    """Returns ``(params, cfg, step)``; shapes are checked against the manifest and the model."""
    directory = Path(directory)
    path = directory / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON at byte offset {exc.pos}") from exc
    cfg = RunConfig.from_dict(manifest["config"])
    expected = param_shapes(cfg.model_config())
    if set(expected) != set(manifest["shapes"]):
        raise FormatError(f"{path}: parameter set does not match the configured model")
    params = {}
    for name, shape in expected.items():
        t = load_tensor(directory / f"{name}.ftns")
        if t.shape != tuple(shape) or list(shape) != manifest["shapes"][name]:
            raise FormatError(f"{name}: stored shape {t.shape}, expected {tuple(shape)}")
        params[name] = t
    return params, cfg, int(manifest["step"])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def predict(episodes, params, cfg: RunConfig):
    mcfg = cfg.model_config()
    return [forward(ep, params, mcfg)[2] for ep in episodes]


def evaluate(episodes, params, cfg: RunConfig, iou_thresh=0.5, theta=0.5):
    """Box/mask mAP50 and mAR10 of the model on ``episodes``.

    The importance fraction averages, over episodes with at least one
    detection, the per-instance share of parts whose gate exceeds ``theta``.
    """
    all_inst = predict(episodes, params, cfg)
    preds = [[ScoredPrediction(i.score, i.box, i.full_mask) for i in inst] for inst in all_inst]
    gts = [[GroundTruth(b, m > 0.5) for b, m in zip(ep.query_boxes, ep.query_masks)] for ep in episodes]
    result = score_episodes(preds, gts, iou_thresh)
    fracs = [importance_fraction(inst, theta) for inst in all_inst if inst]
    result.importance_fraction = float(np.mean(fracs)) if fracs else float("nan")
    for row, inst in zip(result.episodes, all_inst):
        row["importance_fraction"] = importance_fraction(inst, theta) if inst else None
    return result
