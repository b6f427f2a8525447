"""Support conditioning, the SimNet hypernetwork and the part assembling module."""

import numpy as np

from . import layers as L

MAXNORM_EPS = 1e-9


def downsample_mask_nearest(mask, h, w):
    """Nearest-neighbor resample of an (H_s, W_s) mask to (h, w) at cell centers."""
    hs, ws = mask.shape
    rows = np.floor((np.arange(h) + 0.5) * hs / h).astype(np.int64)
    cols = np.floor((np.arange(w) + 0.5) * ws / w).astype(np.int64)
    return mask[np.ix_(rows, cols)] > 0.5


def masked_average_pool(f_map, mask):
    """Per-channel mean of an (H, W, C) map over the (downsampled) mask.

    Returns ``(vector, cache)``.
    """
    small = downsample_mask_nearest(mask, f_map.shape[0], f_map.shape[1])
    count = int(small.sum())
    if count == 0:
        raise ValueError("support mask is empty after downsampling to the feature grid")
    return f_map[small].mean(axis=0), (small, count, f_map.shape)


def masked_average_pool_backward(dvec, cache):
    small, count, shape = cache
    d = np.zeros(shape)
    d[small] = dvec / count
    return d


def channelwise_modulate(f_q, f_s):
    """Scale each channel of an (..., H, W, C) map by the support vector (..., C)."""
    if f_q.shape[-1] != f_s.shape[-1]:
        raise ValueError(f"channel mismatch: map has {f_q.shape[-1]}, vector has {f_s.shape[-1]}")
    return f_q * f_s[..., None, None, :]


def channelwise_modulate_backward(dout, f_q, f_s):
    return dout * f_s[..., None, None, :], np.sum(dout * f_q, axis=(-3, -2))


# ---------------------------------------------------------------------------
# SimNet
# ---------------------------------------------------------------------------

SIMNET_LAYERS = 4


def simnet_kernel_scale(c):
    return 1.0 / np.sqrt(9.0 * c)


def simnet_generate(params, f_s):
    """Map support vectors (N, C) to per-sample 3x3 conv weights and biases."""
    n, c = f_s.shape
    caches = []
    h = f_s
    for i in range(SIMNET_LAYERS):
        h, cache = L.linear_forward(h, params[f"simnet.fc{i}.w"], params[f"simnet.fc{i}.b"])
        caches.append(("fc", cache))
        if i < SIMNET_LAYERS - 1:
            h, cache = L.layer_norm_forward(h, params[f"simnet.ln{i}.g"], params[f"simnet.ln{i}.b"])
            caches.append(("ln", i, cache))
            h, cache = L.relu_forward(h)
            caches.append(("relu", cache))
    scale = simnet_kernel_scale(c)
    theta = h * scale
    w = theta[:, : 9 * c * c].reshape(n, 3, 3, c, c)
    b = theta[:, 9 * c * c:]
    return w, b, (caches, scale)


def simnet_generate_backward(dw, db, cache, grads):
    caches, scale = cache
    n = dw.shape[0]
    dh = np.concatenate([dw.reshape(n, -1), db], axis=1) * scale
    fc_i = SIMNET_LAYERS - 1
    for entry in reversed(caches):
        kind = entry[0]
        if kind == "fc":
            dh, dwt, dbt = L.linear_backward(dh, entry[1])
            grads[f"simnet.fc{fc_i}.w"] += dwt
            grads[f"simnet.fc{fc_i}.b"] += dbt
            fc_i -= 1
        elif kind == "ln":
            dh, dg, dbeta = L.layer_norm_backward(dh, entry[2])
            grads[f"simnet.ln{entry[1]}.g"] += dg
            grads[f"simnet.ln{entry[1]}.b"] += dbeta
        else:
            dh = L.relu_backward(dh, entry[1])
    return dh


def simnet_forward(params, f_s, f_q_mod):
    """Apply the support-generated conv to modulated query maps.

    Accepts a single sample (C,), (H, W, C) or a batch (N, C), (N, H, W, C).
    Returns ``(out, cache)``.
    """
    single = f_s.ndim == 1
    if single:
        f_s, f_q_mod = f_s[None], f_q_mod[None]
    w, b, gcache = simnet_generate(params, f_s)
    out, ccache = L.dynamic_conv_forward(f_q_mod, w, b)
    if single:
        out = out[0]
    return out, (gcache, ccache, single)


def simnet_backward(dout, cache, grads):
    """Returns (d f_s, d f_q_mod) and accumulates parameter grads into ``grads``."""
    gcache, ccache, single = cache
    if single:
        dout = dout[None]
    dx, dw, db = L.dynamic_conv_backward(dout, ccache)
    dfs = simnet_generate_backward(dw, db, gcache, grads)
    if single:
        return dfs[0], dx[0]
    return dfs, dx


# ---------------------------------------------------------------------------
# Part assembling
# ---------------------------------------------------------------------------

def maxnorm_relu(parts):
    """Rectify (H_r, W_r, J) part maps and scale each map so its peak is 1.

    Maps whose peak is <= 1e-9 become all zeros.
    """
    r = np.maximum(parts, 0.0)
    peak = r.max(axis=(0, 1))
    live = peak > MAXNORM_EPS
    safe = np.where(live, peak, 1.0)
    return r / safe * live, (parts, r, safe, live)


def maxnorm_relu_backward(dp, cache):
    parts, r, safe, live = cache
    hr, wr, j = parts.shape
    dr = dp / safe
    # peak location of each map receives -sum(dp * r) / peak^2
    corr = -np.sum(dp * r, axis=(0, 1)) / safe**2
    flat = r.reshape(-1, j)
    arg = flat.argmax(axis=0)
    dflat = dr.reshape(-1, j)
    dflat[arg, np.arange(j)] += corr
    dr = dflat.reshape(hr, wr, j) * live
    return dr * (parts > 0)


def pam_fuse(parts_pooled, importance):
    """Fuse pooled part maps (H_r, W_r, J) with importances (J,) into a mask in [0, 1]."""
    p_plus, mcache = maxnorm_relu(parts_pooled)
    gate = L.sigmoid(importance)
    raw = p_plus @ gate
    return np.clip(raw, 0.0, 1.0), (p_plus, mcache, gate, raw)


def pam_fuse_backward(dmask, cache, dp_plus_extra=None):
    """Gradients of :func:`pam_fuse` w.r.t. the pooled parts and the raw importances.

    ``dp_plus_extra`` adds a gradient arriving directly at the normalized parts
    (e.g. from the part-basis regularizer).
    """
    p_plus, mcache, gate, raw = cache
    draw = dmask * (raw < 1.0)
    dp_plus = draw[..., None] * gate
    if dp_plus_extra is not None:
        dp_plus = dp_plus + dp_plus_extra
    dgate = np.einsum("hwj,hw->j", p_plus, draw)
    dimp = dgate * gate * (1.0 - gate)
    return maxnorm_relu_backward(dp_plus, mcache), dimp
