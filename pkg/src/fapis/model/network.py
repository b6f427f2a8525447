"""Tiny conditioned detector/segmenter: backbone, support conditioning,
SimNet-driven scoring tower, box tower and PartNet, all NHWC float64.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..numeric import make_rng
from . import layers as L
from . import ops


@dataclass
class ModelConfig:
    img_size: int = 64
    in_ch: int = 3
    c1: int = 8
    c: int = 16
    j: int = 16
    h_r: int = 32
    w_r: int = 32
    strides: tuple = (4,)
    # max(l, t, r, b) ranges per level, in pixels
    level_ranges: tuple = ((0.0, math.inf),)
    simnet_hidden: int = 64
    gn_groups: int = 4
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    top_n: int = 20
    seed: int = 0

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.level_ranges = tuple(tuple(float(v) for v in r) for r in self.level_ranges)
        if self.strides not in ((4,), (4, 8)):
            raise ValueError("supported level layouts are strides (4,) and (4, 8)")
        if len(self.level_ranges) != len(self.strides):
            raise ValueError("need one assignment range per level")
        if self.c % self.gn_groups:
            raise ValueError("channel count must be divisible by gn_groups")

    @property
    def part_stride(self):
        return self.strides[0] / 2

    def as_dict(self):
        d = asdict(self)
        d["level_ranges"] = [[lo, "inf" if math.isinf(hi) else hi] for lo, hi in self.level_ranges]
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "level_ranges" in d:
            d["level_ranges"] = tuple(
                (float(lo), math.inf if hi == "inf" else float(hi)) for lo, hi in d["level_ranges"]
            )
        if "strides" in d:
            d["strides"] = tuple(d["strides"])
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# Architecture tables
# ---------------------------------------------------------------------------

def backbone_spec(cfg):
    base = [
        ("conv", "backbone.conv0", 1), ("relu",),
        ("conv", "backbone.conv1", 2), ("relu",),
        ("conv", "backbone.conv2", 2), ("relu",),
    ]
    extra = [("conv", "backbone.conv3", 2), ("relu",)] if len(cfg.strides) > 1 else []
    return base, extra


def tower_spec(prefix):
    return [
        ("conv", f"{prefix}.conv0", 1), ("gn", f"{prefix}.gn0"), ("relu",),
        ("conv", f"{prefix}.conv1", 1), ("gn", f"{prefix}.gn1"), ("relu",),
    ]


PARTNET_SPEC = [
    ("conv", "partnet.conv0", 1), ("gn", "partnet.gn0"), ("relu",),
    ("conv", "partnet.conv1", 1), ("gn", "partnet.gn1"), ("relu",),
    ("conv", "partnet.conv2", 1), ("gn", "partnet.gn2"), ("relu",),
    ("up",),
    ("conv", "partnet.conv3", 1), ("gn", "partnet.gn3"), ("relu",),
    ("conv", "partnet.conv4", 1),
]


def param_shapes(cfg):
    c, c1, j, hd = cfg.c, cfg.c1, cfg.j, cfg.simnet_hidden
    shapes = {
        "backbone.conv0.w": (3, 3, cfg.in_ch, c1), "backbone.conv0.b": (c1,),
        "backbone.conv1.w": (3, 3, c1, c), "backbone.conv1.b": (c,),
        "backbone.conv2.w": (3, 3, c, c), "backbone.conv2.b": (c,),
    }
    if len(cfg.strides) > 1:
        shapes.update({"backbone.conv3.w": (3, 3, c, c), "backbone.conv3.b": (c,)})
    dims = [c, hd, hd, hd, 9 * c * c + c]
    for i in range(ops.SIMNET_LAYERS):
        shapes[f"simnet.fc{i}.w"] = (dims[i], dims[i + 1])
        shapes[f"simnet.fc{i}.b"] = (dims[i + 1],)
        if i < ops.SIMNET_LAYERS - 1:
            shapes[f"simnet.ln{i}.g"] = (dims[i + 1],)
            shapes[f"simnet.ln{i}.b"] = (dims[i + 1],)
    for tower in ("cls_tower", "reg_tower"):
        for i in range(2):
            shapes[f"{tower}.conv{i}.w"] = (3, 3, c, c)
            shapes[f"{tower}.conv{i}.b"] = (c,)
            shapes[f"{tower}.gn{i}.g"] = (c,)
            shapes[f"{tower}.gn{i}.b"] = (c,)
    shapes.update({
        "cls_out.w": (3, 3, c, 1), "cls_out.b": (1,),
        "imp_out.w": (3, 3, c, j), "imp_out.b": (j,),
        "reg_out.w": (3, 3, c, 4), "reg_out.b": (4,),
    })
    for i in range(5):
        co = j if i == 4 else c
        shapes[f"partnet.conv{i}.w"] = (3, 3, c, co)
        shapes[f"partnet.conv{i}.b"] = (co,)
        if i < 4:
            shapes[f"partnet.gn{i}.g"] = (c,)
            shapes[f"partnet.gn{i}.b"] = (c,)
    return shapes


PARAM_GROUPS = ("backbone", "simnet", "cls_tower", "cls_out", "imp_out", "reg_tower", "reg_out", "partnet")


def init_params(cfg, seed=None):
    """Seeded init: weights ~ U(-a, a) with a = sqrt(6 / fan_in); norm scales 1; biases 0
    except the score prior (p = 0.01), importance prior (sigmoid = 1 / (J + 1)) and a
    positive box-size offset."""
    seed = cfg.seed if seed is None else seed
    rng = make_rng(seed, 0x1A17)
    params = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[:-1]))
            a = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-a, a, shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    params["cls_out.b"][:] = -math.log(99.0)
    params["imp_out.b"][:] = -math.log(cfg.j)
    params["reg_out.b"][:] = 1.0
    return params


def zeros_like_params(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# Sequential helper
# ---------------------------------------------------------------------------

def seq_forward(params, spec, x, groups):
    caches = []
    for layer in spec:
        kind = layer[0]
        if kind == "conv":
            x, cache = L.conv_forward(x, params[layer[1] + ".w"], params[layer[1] + ".b"], stride=layer[2])
        elif kind == "gn":
            x, cache = L.group_norm_forward(x, params[layer[1] + ".g"], params[layer[1] + ".b"], groups)
        elif kind == "relu":
            x, cache = L.relu_forward(x)
        elif kind == "up":
            x, cache = L.upsample2x_forward(x), None
        else:
            raise ValueError(kind)
        caches.append(cache)
    return x, caches


def seq_backward(spec, dx, caches, grads, need_dx=True):
    last = len(spec) - 1
    for i, (layer, cache) in enumerate(zip(reversed(spec), reversed(caches))):
        kind = layer[0]
        if kind == "conv":
            dx, dw, db = L.conv_backward(dx, cache, need_dx=need_dx or i != last)
            grads[layer[1] + ".w"] += dw
            grads[layer[1] + ".b"] += db
        elif kind == "gn":
            dx, dg, dbeta = L.group_norm_backward(dx, cache)
            grads[layer[1] + ".g"] += dg
            grads[layer[1] + ".b"] += dbeta
        elif kind == "relu":
            dx = L.relu_backward(dx, cache)
        else:
            dx = L.upsample2x_backward(dx)
    return dx


# ---------------------------------------------------------------------------
# Dense forward / backward
# ---------------------------------------------------------------------------

def encode_images(imgs):
    """(N, H, W) grayscale -> (N, H, W, 3) with normalized x/y coordinate channels."""
    imgs = np.asarray(imgs, dtype=np.float64)
    n, h, w = imgs.shape
    ys = (np.arange(h) + 0.5) / h * 2 - 1
    xs = (np.arange(w) + 0.5) / w * 2 - 1
    gx = np.broadcast_to(xs[None, None, :], (n, h, w))
    gy = np.broadcast_to(ys[None, :, None], (n, h, w))
    return np.stack([imgs, gx, gy], axis=-1)


def forward_dense(params, support_imgs, support_masks, query_imgs, cfg):
    """Dense predictions for a batch of episodes.

    Returns ``(out, cache)`` where ``out`` holds per-level lists ``cls_logit``
    (N, H, W), ``cls`` (N, H, W), ``reg`` (N, H, W, 4), ``imp`` (N, H, W, J),
    ``f_s`` (N, C) and the part maps ``parts`` (N, 2H0, 2W0, J).
    """
    n = len(query_imgs)
    g = cfg.gn_groups
    x = encode_images(np.concatenate([support_imgs, query_imgs], axis=0))
    base_spec, extra_spec = backbone_spec(cfg)
    feat0, bb_cache = seq_forward(params, base_spec, x, g)
    feats = [feat0]
    extra_cache = None
    if extra_spec:
        feat1, extra_cache = seq_forward(params, extra_spec, feat0, g)
        feats.append(feat1)

    out = {k: [] for k in ("cls_logit", "cls", "reg", "reg_z", "imp", "f_s")}
    level_caches = []
    cq0 = None
    for li, feat in enumerate(feats):
        fs_map, fq = feat[:n], feat[n:]
        f_s, map_caches = [], []
        for k in range(n):
            v, mc = ops.masked_average_pool(fs_map[k], support_masks[k])
            f_s.append(v)
            map_caches.append(mc)
        f_s = np.stack(f_s)
        cq = ops.channelwise_modulate(fq, f_s)
        if li == 0:
            cq0 = cq
        s, sim_cache = ops.simnet_forward(params, f_s, cq)
        t, cls_t_cache = seq_forward(params, tower_spec("cls_tower"), s, g)
        z_cls, cls_cache = L.conv_forward(t, params["cls_out.w"], params["cls_out.b"])
        z_imp, imp_cache = L.conv_forward(t, params["imp_out.w"], params["imp_out.b"])
        r, reg_t_cache = seq_forward(params, tower_spec("reg_tower"), cq, g)
        z_reg, reg_cache = L.conv_forward(r, params["reg_out.w"], params["reg_out.b"])
        stride = cfg.strides[li]
        out["cls_logit"].append(z_cls[..., 0])
        out["cls"].append(L.sigmoid(z_cls[..., 0]))
        out["reg_z"].append(z_reg)
        out["reg"].append(stride * L.softplus(z_reg))
        out["imp"].append(z_imp)
        out["f_s"].append(f_s)
        level_caches.append(dict(
            fq=fq, f_s=f_s, map_caches=map_caches, sim=sim_cache, cls_t=cls_t_cache,
            cls=cls_cache, imp=imp_cache, reg_t=reg_t_cache, reg=reg_cache, z_reg=z_reg,
        ))
    parts, part_cache = seq_forward(params, PARTNET_SPEC, cq0, g)
    out["parts"] = parts
    cache = dict(n=n, bb=bb_cache, extra=extra_cache, levels=level_caches, parts=part_cache,
                 feat_shapes=[f.shape for f in feats])
    return out, cache


def backward_dense(params, dout, cache, cfg):
    """Parameter gradients given upstream gradients on the dense outputs.

    ``dout`` keys: ``cls_logit`` / ``reg`` / ``imp`` (per-level lists, ``reg``
    w.r.t. the post-softplus distances) and ``parts``.
    """
    grads = zeros_like_params(params)
    n = cache["n"]
    g = cfg.gn_groups
    dfeats = [np.zeros(s) for s in cache["feat_shapes"]]
    dcq0 = seq_backward(PARTNET_SPEC, dout["parts"], cache["parts"], grads)

    for li, lc in enumerate(cache["levels"]):
        stride = cfg.strides[li]
        dz_reg = dout["reg"][li] * stride * L.sigmoid(lc["z_reg"])
        dr, dw, db = L.conv_backward(dz_reg, lc["reg"])
        grads["reg_out.w"] += dw
        grads["reg_out.b"] += db
        dcq = seq_backward(tower_spec("reg_tower"), dr, lc["reg_t"], grads)

        dt, dw, db = L.conv_backward(dout["imp"][li], lc["imp"])
        grads["imp_out.w"] += dw
        grads["imp_out.b"] += db
        dt2, dw, db = L.conv_backward(dout["cls_logit"][li][..., None], lc["cls"])
        grads["cls_out.w"] += dw
        grads["cls_out.b"] += db
        ds = seq_backward(tower_spec("cls_tower"), dt + dt2, lc["cls_t"], grads)
        dfs, dcq_sim = ops.simnet_backward(ds, lc["sim"], grads)
        dcq = dcq + dcq_sim
        if li == 0:
            dcq = dcq + dcq0
        dfq, dfs_cwm = ops.channelwise_modulate_backward(dcq, lc["fq"], lc["f_s"])
        dfs = dfs + dfs_cwm
        dfeats[li][n:] += dfq
        for k in range(n):
            dfeats[li][k] += ops.masked_average_pool_backward(dfs[k], lc["map_caches"][k])

    base_spec, extra_spec = backbone_spec(cfg)
    if extra_spec:
        dfeats[0] += seq_backward(extra_spec, dfeats[1], cache["extra"], grads)
    seq_backward(base_spec, dfeats[0], cache["bb"], grads, need_dx=False)
    return grads
