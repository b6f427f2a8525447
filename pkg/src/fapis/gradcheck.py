"""Finite-difference checks of every hand-written gradient.

Each check draws a random problem from a seed, evaluates the analytic
gradient, and compares it to central differences with a norm-wise relative
error. Inputs are drawn away from clamps, kinks and ties so the function is
smooth at the probe point.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import Box, assign_targets
from .losses import FocalConfig, LossWeights, dice_loss, focal_loss, giou_loss, nmf_reg_loss
from .numeric import finite_difference_gradient, make_rng, relative_error
from .partfactor import PartBasis

LOSS_TOL = 1e-5
PIPELINE_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tol: float

    @property
    def passed(self):
        return bool(self.error <= self.tol)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} seed={self.seed} rel_err={self.error:.3e} tol={self.tol:.0e}"


def _fd_error(f, x, analytic):
    return relative_error(analytic, finite_difference_gradient(f, x))


def check_focal(seed):
    rng = make_rng(seed, 1)
    s = rng.uniform(0.05, 0.95, (6, 7))
    t = (rng.random((6, 7)) < 0.3).astype(np.float64)
    cfg = FocalConfig(alpha=rng.uniform(0.1, 0.9), gamma=rng.uniform(0.0, 3.0))
    _, g = focal_loss(s, t, cfg)
    return _fd_error(lambda x: focal_loss(x, t, cfg)[0], s, g)


def check_giou(seed):
    rng = make_rng(seed, 2)
    h = w = 8
    stride = 4.0
    boxes = [Box(2.0, 3.0, 17.0, 21.0), Box(14.0, 9.0, 30.0, 26.0)]
    targets = assign_targets(boxes, h, w, stride)
    reg = rng.uniform(1.0, 12.0, (h, w, 4))
    _, g = giou_loss(reg, targets)
    return _fd_error(lambda x: giou_loss(x, targets)[0], reg, g)


def check_dice(seed):
    rng = make_rng(seed, 3)
    pred = rng.uniform(0.0, 1.0, (9, 9))
    gt = (rng.random((9, 9)) < 0.5).astype(np.float64)
    _, g = dice_loss(pred, gt)
    return _fd_error(lambda x: dice_loss(x, gt)[0], pred, g)


def _random_basis(rng, h, w, j):
    return PartBasis(rng.uniform(0.05, 1.0, (h * w, j)), h, w)


def check_nmf_reg(seed):
    rng = make_rng(seed, 4)
    basis = _random_basis(rng, 5, 5, 4)
    parts = rng.uniform(0.0, 1.0, (3, 5, 5, 4))
    # keep clear of the binarization threshold so the matching is locally constant
    parts = np.where(np.abs(parts - 0.5) < 0.05, parts + 0.1, parts)
    _, g, _ = nmf_reg_loss(parts, basis)
    return _fd_error(lambda x: nmf_reg_loss(x, basis)[0], parts, g)


def check_pam_fuse(seed):
    from .model import ops

    rng = make_rng(seed, 5)
    parts = rng.normal(0.0, 1.0, (6, 6, 4))
    imp = rng.normal(-1.0, 1.0, 4)
    r = rng.normal(0.0, 1.0, (6, 6))

    def f_parts(x):
        return float(np.sum(ops.pam_fuse(x, imp)[0] * r))

    def f_imp(x):
        return float(np.sum(ops.pam_fuse(parts, x)[0] * r))

    mask, cache = ops.pam_fuse(parts, imp)
    dparts, dimp = ops.pam_fuse_backward(r, cache)
    return max(_fd_error(f_parts, parts, dparts), _fd_error(f_imp, imp, dimp))


def check_simnet(seed):
    from .model import ops
    from .model.network import ModelConfig, init_params

    rng = make_rng(seed, 6)
    cfg = ModelConfig(c=4, simnet_hidden=6, gn_groups=2)
    params = {k: v for k, v in init_params(cfg, seed).items() if k.startswith("simnet")}
    f_s = rng.normal(0.0, 1.0, 4)
    f_q = rng.normal(0.0, 1.0, (5, 5, 4))
    r = rng.normal(0.0, 1.0, (5, 5, 4))
    out, cache = ops.simnet_forward(params, f_s, f_q)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dfs, dfq = ops.simnet_backward(r, cache, grads)

    errs = [
        _fd_error(lambda x: float(np.sum(ops.simnet_forward(params, x, f_q)[0] * r)), f_s, dfs),
        _fd_error(lambda x: float(np.sum(ops.simnet_forward(params, f_s, x)[0] * r)), f_q, dfq),
    ]
    for name in ("simnet.fc0.w", "simnet.ln1.g", "simnet.fc3.w"):
        def f(x, name=name):
            return float(np.sum(ops.simnet_forward({**params, name: x}, f_s, f_q)[0] * r))
        errs.append(_fd_error(f, params[name], grads[name]))
    return max(errs)


def check_pipeline(seed, n_params=32):
    """Whole-model loss gradient on a random slice of ``n_params`` parameters."""
    from .episodes import EpisodeConfig, generate_corpus
    from .model import ModelConfig, init_params, loss_and_grads
    from .partfactor import crop_to_box, nmf_factorize, stack_masks

    cfg = ModelConfig(img_size=32, c1=4, c=4, j=3, h_r=8, w_r=8, simnet_hidden=6, gn_groups=2)
    ecfg = EpisodeConfig(img_size=32, n_instances_range=(1, 2), n_distractors_range=(0, 1))
    eps = generate_corpus("train", 2, seed, ecfg)
    masks = [crop_to_box(m) for e in generate_corpus("train", 10, seed + 1) for m in e.query_masks]
    basis, _ = nmf_factorize(stack_masks(masks, 8, 8), 3, 100, seed)
    rng = make_rng(seed, 7)
    params = init_params(cfg, seed)
    # move off the symmetric init
    params = {k: v + 0.05 * rng.normal(0.0, 1.0, v.shape) for k, v in params.items()}
    w = LossWeights()
    _, grads = loss_and_grads(params, eps, basis, cfg, w)

    flat = [(k, i) for k in sorted(params) for i in range(params[k].size)]
    pick = rng.choice(len(flat), size=min(n_params, len(flat)), replace=False)
    analytic, numeric = [], []
    h = 1e-6
    for p in sorted(pick):
        k, i = flat[p]
        orig = params[k].flat[i]
        params[k].flat[i] = orig + h
        lp = loss_and_grads(params, eps, basis, cfg, w, need_grad=False)[0].total
        params[k].flat[i] = orig - h
        lm = loss_and_grads(params, eps, basis, cfg, w, need_grad=False)[0].total
        params[k].flat[i] = orig
        analytic.append(grads[k].flat[i])
        numeric.append((lp - lm) / (2 * h))
    return relative_error(np.array(analytic), np.array(numeric))


LOSS_CHECKS = {
    "focal": check_focal,
    "giou": check_giou,
    "dice": check_dice,
    "nmf_reg": check_nmf_reg,
}
MODEL_CHECKS = {
    "pam_fuse": check_pam_fuse,
    "simnet": check_simnet,
}


def run_checks(component, seeds=range(10), pipeline_seeds=(0,)):
    if component == "losses":
        table = LOSS_CHECKS
    elif component == "model":
        table = MODEL_CHECKS
    else:
        raise ValueError(f"unknown component {component!r}")
    results = [CheckResult(name, s, fn(s), LOSS_TOL) for name, fn in table.items() for s in seeds]
    if component == "model":
        results += [CheckResult("pipeline", s, check_pipeline(s), PIPELINE_TOL) for s in pipeline_seeds]
    return results
