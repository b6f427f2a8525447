"""Synthetic 1-way 1-shot episodes built from parametric shape families.

Each episode has a support image showing one instance of the target class and
a query image with several target instances, a few distractors from other
classes of the same split, and additive Gaussian noise. Within an episode the
target class has one fill intensity; distractors are kept at least
``min_contrast`` away from it, so the support is needed to tell them apart.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from .geometry import Box, iou_matrix, mask_to_box
from .numeric import FormatError, load_tensor, make_rng, save_tensor

FAMILIES = ("rectangle", "ellipse", "triangle", "cross", "ring", "lshape")

DEFAULT_SPLITS = {
    "train": ("rectangle", "triangle", "cross", "ring"),
    "test": ("ellipse", "lshape"),
}


class SplitError(ValueError):
    pass


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShapeClassSpec:
    family: str
    size_range: tuple = (12.0, 24.0)
    aspect_range: tuple = (0.6, 1.6)
    rotation_range: tuple = (-0.5, 0.5)
    intensity_range: tuple = (0.3, 1.0)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")

    @property
    def class_id(self):
        return FAMILIES.index(self.family)


@dataclass
class EpisodeConfig:
    img_size: int = 64
    n_instances_range: tuple = (1, 4)
    n_distractors_range: tuple = (0, 2)
    distractor_classes: tuple = ()
    noise_sigma: float = 0.05
    min_contrast: float = 0.3
    max_overlap_iou: float = 0.3
    min_pixels: int = 16
    support_stride: int = 4
    split: str = None
    splits: dict = field(default_factory=lambda: dict(DEFAULT_SPLITS))

    def __post_init__(self):
        if self.img_size < 32:
            raise ValueError("img_size must be >= 32")
        lo, hi = self.n_instances_range
        if not 1 <= lo <= hi <= 6:
            raise ValueError("n_instances_range must lie within [1, 6]")
        dlo, dhi = self.n_distractors_range
        if not 0 <= dlo <= dhi <= 3:
            raise ValueError("n_distractors_range must lie within [0, 3]")


@dataclass
class Episode:
    support_img: np.ndarray
    support_mask: np.ndarray
    query_img: np.ndarray
    query_masks: list
    query_boxes: list
    class_id: int
    seed: int = 0

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.class_id == other.class_id
            and self.seed == other.seed
            and np.array_equal(self.support_img, other.support_img)
            and np.array_equal(self.support_mask, other.support_mask)
            and np.array_equal(self.query_img, other.query_img)
            and len(self.query_masks) == len(other.query_masks)
            and all(np.array_equal(a, b) for a, b in zip(self.query_masks, other.query_masks))
            and self.query_boxes == other.query_boxes
        )

    @property
    def family(self):
        return FAMILIES[self.class_id]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _inside(family, u, v):
    if family == "rectangle":
        return (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if family == "ellipse":
        return u * u + v * v <= 1
    if family == "triangle":
        return (v <= 1) & (np.abs(u) <= (v + 1) / 2)
    if family == "cross":
        arm = 0.38
        box = (np.abs(u) <= 1) & (np.abs(v) <= 1)
        return box & ((np.abs(u) <= arm) | (np.abs(v) <= arm))
    if family == "ring":
        r2 = u * u + v * v
        return (r2 <= 1) & (r2 >= 0.3)
    if family == "lshape":
        box = (np.abs(u) <= 1) & (np.abs(v) <= 1)
        return box & ((u <= -0.1) | (v >= 0.1))
    raise ValueError(f"unknown shape family {family!r}")


def render_shape(family, size, cx, cy, aspect, angle, img_size):
    """Binary (img_size, img_size) mask sampled at pixel centers."""
    ys, xs = np.mgrid[0:img_size, 0:img_size] + 0.5
    dx, dy = xs - cx, ys - cy
    ca, sa = np.cos(angle), np.sin(angle)
    lx = ca * dx + sa * dy
    ly = -sa * dx + ca * dy
    hx = 0.5 * size * np.sqrt(aspect)
    hy = 0.5 * size / np.sqrt(aspect)
    return _inside(family, lx / hx, ly / hy)


def _sample_shape(rng, spec, img_size):
    size = rng.uniform(*spec.size_range)
    aspect = rng.uniform(*spec.aspect_range)
    angle = rng.uniform(*spec.rotation_range)
    margin = 0.5 * size * max(np.sqrt(aspect), 1 / np.sqrt(aspect))
    margin = min(margin, img_size / 2 - 1)
    cx = rng.uniform(margin, img_size - margin)
    cy = rng.uniform(margin, img_size - margin)
    return render_shape(spec.family, size, cx, cy, aspect, angle, img_size)


def _place(rng, spec, cfg, occupied, boxes, attempts=100):
    for _ in range(attempts):
        m = _sample_shape(rng, spec, cfg.img_size)
        if m.sum() < cfg.min_pixels:
            continue
        if np.any(m & occupied):
            continue
        box = mask_to_box(m)
        if boxes and iou_matrix(box.as_array(), np.array([b.as_array() for b in boxes])).max() > cfg.max_overlap_iou:
            continue
        return m, box
    raise PlacementError(f"could not place a {spec.family} after {attempts} attempts")


def _distractor_intensity(rng, spec, target, min_contrast):
    lo, hi = spec.intensity_range
    for _ in range(100):
        v = rng.uniform(lo, hi)
        if abs(v - target) >= min_contrast:
            return v
    # fall back to the farther end of the range
    return lo if abs(lo - target) > abs(hi - target) else hi


def check_split(spec, cfg):
    if cfg.split is None:
        return
    allowed = cfg.splits[cfg.split]
    families = [spec.family] + [d.family for d in cfg.distractor_classes]
    bad = [f for f in families if f not in allowed]
    if bad:
        raise SplitError(f"families {bad} are not part of split {cfg.split!r}")


def generate_episode(seed, spec, cfg=None):
    """Render one deterministic episode for target class ``spec``."""
    cfg = cfg or EpisodeConfig()
    check_split(spec, cfg)
    rng = make_rng(seed, 0xE915)
    n = cfg.img_size
    intensity = rng.uniform(*spec.intensity_range)

    # support: one instance, visible at the feature stride
    st = cfg.support_stride
    for _ in range(100):
        s_mask, _ = _place(rng, spec, cfg, np.zeros((n, n), dtype=bool), [])
        if s_mask[st // 2:: st, st // 2:: st].any():
            break
    else:
        raise PlacementError("support instance vanishes at the feature stride")
    support = rng.normal(0.0, cfg.noise_sigma, (n, n))
    support[s_mask] += intensity

    k = int(rng.integers(cfg.n_instances_range[0], cfg.n_instances_range[1] + 1))
    n_dis = 0
    if cfg.distractor_classes:
        n_dis = int(rng.integers(cfg.n_distractors_range[0], cfg.n_distractors_range[1] + 1))

    occupied = np.zeros((n, n), dtype=bool)
    boxes, masks = [], []
    query = np.zeros((n, n))
    for _ in range(k):
        m, box = _place(rng, spec, cfg, occupied, boxes)
        occupied |= binary_dilation(m)
        boxes.append(box)
        masks.append(m)
        query[m] = intensity
    all_boxes = list(boxes)
    for _ in range(n_dis):
        dspec = cfg.distractor_classes[int(rng.integers(len(cfg.distractor_classes)))]
        m, box = _place(rng, dspec, cfg, occupied, all_boxes)
        occupied |= binary_dilation(m)
        all_boxes.append(box)
        query[m] = _distractor_intensity(rng, dspec, intensity, cfg.min_contrast)
    query += rng.normal(0.0, cfg.noise_sigma, (n, n))

    return Episode(
        support_img=support,
        support_mask=s_mask.astype(np.float64),
        query_img=query,
        query_masks=[m.astype(np.float64) for m in masks],
        query_boxes=boxes,
        class_id=spec.class_id,
        seed=int(seed),
    )


def episode_seed(corpus_seed, index):
    key = [int(corpus_seed)] + [int(v) for v in np.atleast_1d(index)]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def generate_corpus(split, n, seed, cfg=None, splits=None):
    """``n`` episodes whose target and distractor classes all come from ``split``."""
    base = cfg or EpisodeConfig()
    splits = dict(splits or base.splits)
    families = splits[split]
    specs = [ShapeClassSpec(f) for f in families]
    out = []
    for i in range(n):
        out.append(_corpus_episode(seed, i, specs, base, split, splits))
    return out


def _corpus_episode(seed, i, specs, base, split, splits, retries=20):
    for attempt in range(retries):
        es = episode_seed(seed, i) if attempt == 0 else episode_seed(seed, (i, attempt))
        pick = make_rng(es, 0xC1A55).integers(len(specs))
        target = specs[pick]
        others = tuple(s for s in specs if s.family != target.family)
        cfg_i = EpisodeConfig(
            img_size=base.img_size,
            n_instances_range=base.n_instances_range,
            n_distractors_range=base.n_distractors_range,
            distractor_classes=others,
            noise_sigma=base.noise_sigma,
            min_contrast=base.min_contrast,
            max_overlap_iou=base.max_overlap_iou,
            min_pixels=base.min_pixels,
            support_stride=base.support_stride,
            split=split,
            splits=splits,
        )
        try:
            return generate_episode(es, target, cfg_i)
        except PlacementError:
            continue
    raise PlacementError(f"episode {i}: placement failed for {retries} derived seeds")


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def save_episode(ep, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_tensor(path / "support.ftns", ep.support_img)
    save_tensor(path / "support_mask.ftns", ep.support_mask)
    save_tensor(path / "query.ftns", ep.query_img)
    for i, m in enumerate(ep.query_masks):
        save_tensor(path / f"mask_{i:03d}.ftns", m)
    meta = {
        "boxes": [b.as_list() for b in ep.query_boxes],
        "class_id": ep.class_id,
        "family": ep.family,
        "n_instances": len(ep.query_masks),
        "seed": ep.seed,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_episode(path):
    path = Path(path)
    meta_path = path / "meta.json"
    raw = meta_path.read_bytes()
    try:
        meta = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: malformed JSON at byte offset {exc.pos}") from exc
    n = meta["n_instances"]
    if len(meta["boxes"]) != n:
        raise FormatError(f"{meta_path}: {len(meta['boxes'])} boxes for {n} instances")
    masks = [load_tensor(path / f"mask_{i:03d}.ftns") for i in range(n)]
    return Episode(
        support_img=load_tensor(path / "support.ftns"),
        support_mask=load_tensor(path / "support_mask.ftns"),
        query_img=load_tensor(path / "query.ftns"),
        query_masks=masks,
        query_boxes=[Box(*b) for b in meta["boxes"]],
        class_id=int(meta["class_id"]),
        seed=int(meta["seed"]),
    )


def save_corpus(episodes, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, ep in enumerate(episodes):
        save_episode(ep, root / f"ep_{i:05d}")


def load_corpus(root):
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("ep_"))
    if not dirs:
        raise FileNotFoundError(f"no episodes under {root}")
    return [load_episode(d) for d in dirs]
