"""Resolved run configuration shared by every command.

Defaults follow the reference training setup where one exists: J = 16 parts,
loss weights (1, 1, 1, 0.1), focal alpha 0.25 / gamma 2, 32x32 ROI masks,
SGD with momentum and mini-batches of 16. Learning rate, schedule and epoch
count are tuned for the synthetic toy benchmark.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .episodes import DEFAULT_SPLITS
from .losses import FocalConfig, LossWeights
from .model import ModelConfig

CONFIG_NAME = "run_config.json"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    img_size: int = 64
    j: int = 16
    h_r: int = 32
    w_r: int = 32
    lambdas: tuple = (1.0, 1.0, 1.0, 0.1)
    alpha: float = 0.25
    gamma: float = 2.0
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 16
    epochs: int = 8
    warmup_steps: int = 50
    # epochs after which the learning rate drops 10x
    lr_steps: tuple = (6,)
    max_grad_norm: float = 5.0
    nms_iou: float = 0.5
    score_thresh: float = 0.05
    top_n: int = 20
    strides: tuple = (4,)
    level_ranges: tuple = ((0.0, math.inf),)
    splits: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SPLITS.items()})

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.lr_steps = tuple(int(v) for v in self.lr_steps)
        self.strides = tuple(int(v) for v in self.strides)
        self.level_ranges = tuple(
            (float(lo), math.inf if hi in ("inf", math.inf) else float(hi)) for lo, hi in self.level_ranges
        )
        if len(self.lambdas) != 4:
            raise ConfigError("lambdas needs four entries")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr > 0 and momentum in [0, 1)")
        if self.batch < 1 or self.epochs < 0 or self.j < 1:
            raise ConfigError("batch and j must be positive, epochs non-negative")
        try:
            self.weights
            self.focal
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def weights(self):
        return LossWeights(*self.lambdas)

    @property
    def focal(self):
        return FocalConfig(self.alpha, self.gamma)

    def model_config(self):
        return ModelConfig(
            img_size=self.img_size, j=self.j, h_r=self.h_r, w_r=self.w_r,
            strides=self.strides, level_ranges=self.level_ranges,
            score_thresh=self.score_thresh, nms_iou=self.nms_iou, top_n=self.top_n, seed=self.seed,
        )

    def lr_at(self, step, steps_per_epoch):
        """Linear warmup, then 10x drops at the configured epoch boundaries."""
        drops = sum(step >= e * steps_per_epoch for e in self.lr_steps)
        lr = self.lr * 0.1 ** drops
        if self.warmup_steps and step < self.warmup_steps:
            lr *= (step + 1) / self.warmup_steps
        return lr

    def as_dict(self):
        d = asdict(self)
        d["level_ranges"] = [[lo, "inf" if math.isinf(hi) else hi] for lo, hi in self.level_ranges]
        for k in ("lambdas", "lr_steps", "strides"):
            d[k] = list(d[k])
        return d

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **overrides):
        d = self.as_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(d)


def load_config(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at byte offset {exc.pos}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return RunConfig.from_dict(d)


def write_config(cfg, directory):
    Path(directory, CONFIG_NAME).write_text(cfg.to_json())
