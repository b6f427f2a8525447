import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fapis.episodes import EpisodeConfig, generate_corpus
from fapis.gradcheck import check_pam_fuse, check_pipeline, check_simnet
from fapis.losses import LossWeights
from fapis.model import (
    ModelConfig,
    channelwise_modulate,
    forward,
    forward_dense,
    importance_fraction,
    init_params,
    loss_and_grads,
    masked_average_pool,
    pam_fuse,
    param_shapes,
    simnet_forward,
    train_step,
)
from fapis.model import ops
from fapis.model.network import PARAM_GROUPS
from fapis.model.ops import channelwise_modulate_backward, simnet_backward, simnet_kernel_scale
from fapis.numeric import finite_difference_gradient, make_rng, relative_error
from fapis.partfactor import crop_to_box, nmf_factorize, stack_masks

TINY = ModelConfig(img_size=32, c1=4, c=8, j=4, h_r=8, w_r=8, simnet_hidden=16, gn_groups=2)
TINY_EP = EpisodeConfig(img_size=32, n_instances_range=(1, 2), n_distractors_range=(0, 1))


@pytest.fixture(scope="module")
def tiny_setup():
    eps = generate_corpus("train", 6, 0, TINY_EP)
    masks = [crop_to_box(m) for e in generate_corpus("train", 20, 1, TINY_EP) for m in e.query_masks]
    basis, _ = nmf_factorize(stack_masks(masks, 8, 8), TINY.j, 100, 0)
    return eps, basis


# --- conditioning ----------------------------------------------------------

def test_map_examples():
    rng = make_rng(0)
    f = rng.normal(size=(4, 4, 3))
    v, _ = masked_average_pool(f, np.ones((16, 16)))
    np.testing.assert_allclose(v, f.mean(axis=(0, 1)), atol=1e-12)
    m = np.zeros((16, 16))
    m[3:9, 2:7] = 1
    v, _ = masked_average_pool(np.full((4, 4, 2), 1.75), m)
    np.testing.assert_allclose(v, 1.75)
    grid = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    v, _ = masked_average_pool(grid, np.array([[1.0, 1.0], [0.0, 0.0]]))
    assert v[0] == pytest.approx(1.5)


def test_map_empty_after_downsample():
    m = np.zeros((16, 16))
    m[0, 0] = 1  # nearest sampling at stride 4 reads pixels 2, 6, 10, 14
    with pytest.raises(ValueError):
        masked_average_pool(np.ones((4, 4, 1)), m)


def test_modulate_examples_and_gradient():
    rng = make_rng(1)
    fq = rng.normal(size=(3, 4, 5))
    np.testing.assert_array_equal(channelwise_modulate(fq, np.ones(5)), fq)
    assert np.all(channelwise_modulate(fq, np.zeros(5)) == 0)
    with pytest.raises(ValueError):
        channelwise_modulate(fq, np.ones(4))
    fs = rng.normal(size=5)
    r = rng.normal(size=fq.shape)
    dq, ds = channelwise_modulate_backward(r, fq, fs)
    assert relative_error(dq, finite_difference_gradient(lambda x: np.sum(channelwise_modulate(x, fs) * r), fq)) <= 1e-6
    assert relative_error(ds, finite_difference_gradient(lambda x: np.sum(channelwise_modulate(fq, x) * r), fs)) <= 1e-6


# --- SimNet ----------------------------------------------------------------

def _simnet_params(c, seed=0):
    cfg = ModelConfig(c=c, simnet_hidden=8, gn_groups=1)
    return {k: v for k, v in init_params(cfg, seed).items() if k.startswith("simnet")}


def test_simnet_zero_head_gives_zero_map():
    p = _simnet_params(3)
    p["simnet.fc3.w"][:] = 0
    p["simnet.fc3.b"][:] = 0
    rng = make_rng(2)
    out, _ = simnet_forward(p, rng.normal(size=3), rng.normal(size=(4, 4, 3)))
    assert np.all(out == 0)


def test_simnet_delta_kernel_is_identity():
    c = 3
    p = _simnet_params(c)
    theta = np.zeros(9 * c * c + c)
    k = np.zeros((3, 3, c, c))
    k[1, 1] = np.eye(c)
    theta[: 9 * c * c] = k.ravel()
    p["simnet.fc3.w"][:] = 0
    p["simnet.fc3.b"][:] = theta / simnet_kernel_scale(c)
    rng = make_rng(3)
    x = rng.normal(size=(4, 4, c))
    out, _ = simnet_forward(p, rng.normal(size=c), x)
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_simnet_fc_gradient_on_4x4x3():
    c = 3
    p = _simnet_params(c, seed=4)
    rng = make_rng(4)
    fs, fq = rng.normal(size=c), rng.normal(size=(4, 4, c))
    r = rng.normal(size=(4, 4, c))
    _, cache = simnet_forward(p, fs, fq)
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    simnet_backward(r, cache, grads)
    for name in sorted(p):
        def f(x, name=name):
            return float(np.sum(simnet_forward({**p, name: x}, fs, fq)[0] * r))
        assert relative_error(grads[name], finite_difference_gradient(f, p[name])) <= 1e-5, name


@pytest.mark.parametrize("seed", range(10))
def test_simnet_and_pam_gradients_random_points(seed):
    assert check_simnet(seed) <= 1e-5
    assert check_pam_fuse(seed) <= 1e-5


# --- PAM -------------------------------------------------------------------

def test_pam_hand_example():
    parts = np.array([[1.0, 0.0], [0.0, 2.0]]).reshape(2, 1, 2)
    m, _ = pam_fuse(parts, np.zeros(2))
    np.testing.assert_allclose(m.ravel(), [0.5, 0.5], atol=1e-15)


def test_pam_saturated_gate_selects_part():
    rng = make_rng(5)
    parts = rng.normal(size=(6, 6, 4))
    imp = np.full(4, -20.0)
    imp[2] = 20.0
    m, _ = pam_fuse(parts, imp)
    r = np.maximum(parts[..., 2], 0)
    np.testing.assert_allclose(m, r / r.max(), atol=1e-6)


def test_pam_negative_parts_give_zero_mask():
    m, _ = pam_fuse(-np.ones((3, 3, 2)) - 0.1, np.zeros(2))
    assert np.all(m == 0)


@pytest.mark.parametrize("seed", range(100))
def test_pam_permutation_and_scale_invariance(seed):
    rng = make_rng(seed, 51)
    j = int(rng.integers(1, 8))
    parts = rng.normal(size=(5, 5, j))
    imp = rng.normal(size=j) * 2
    base, _ = pam_fuse(parts, imp)
    perm = rng.permutation(j)
    m_perm, _ = pam_fuse(parts[..., perm], imp[perm])
    assert np.max(np.abs(m_perm - base)) <= 1e-12
    k = float(np.exp(rng.uniform(-5, 5)))
    m_scale, _ = pam_fuse(k * parts, imp)
    assert np.max(np.abs(m_scale - base)) <= 1e-12
    assert base.min() >= 0 and base.max() <= 1


# --- full model ------------------------------------------------------------

def test_param_shapes_cover_groups():
    names = param_shapes(ModelConfig())
    for g in PARAM_GROUPS:
        assert any(n.startswith(g) for n in names)
    assert names["simnet.fc3.w"] == (64, 9 * 16 * 16 + 16)


def test_forward_deterministic_and_well_formed():
    cfg = ModelConfig()
    params = init_params(cfg, 3)
    eps = generate_corpus("test", 20, 4)
    for ep in eps:
        dense, parts, inst = forward(ep, params, cfg)
        d = dense[0]
        assert d.cls.shape == (16, 16) and d.reg.shape == (16, 16, 4) and d.imp.shape == (16, 16, 16)
        assert np.all((d.cls > 0) & (d.cls < 1))
        assert np.all(d.reg >= 0)
        assert parts.shape == (32, 32, 16)
        assert all(np.all(np.isfinite(a)) for a in (d.cls, d.reg, d.imp, parts))
        assert len(inst) <= cfg.top_n
        for i in inst:
            assert 0 < i.score < 1
            assert i.mask.shape == (32, 32) and i.mask.min() >= 0 and i.mask.max() <= 1
            assert i.full_mask.shape == (64, 64)
    a = forward(eps[0], params, cfg)
    b = forward(eps[0], params, cfg)
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[0][0].cls, b[0][0].cls)
    assert [i.box for i in a[2]] == [i.box for i in b[2]]


def test_two_level_forward():
    cfg = ModelConfig(strides=(4, 8), level_ranges=((0, 12), (12, float("inf"))))
    dense, parts, _ = forward(generate_corpus("train", 1, 0)[0], init_params(cfg, 0), cfg)
    assert [d.cls.shape for d in dense] == [(16, 16), (8, 8)]
    assert [d.stride for d in dense] == [4, 8]


def test_support_enters_only_through_pooled_vector(monkeypatch):
    cfg = TINY
    params = init_params(cfg, 0)
    ep = generate_corpus("train", 1, 0, TINY_EP)[0]
    fixed = make_rng(9).normal(size=cfg.c)
    monkeypatch.setattr(ops, "masked_average_pool", lambda f, m: (fixed.copy(), None))
    outs = []
    for img in (ep.support_img, make_rng(10).normal(size=ep.support_img.shape)):
        out, _ = forward_dense(params, img[None], [ep.support_mask], ep.query_img[None], cfg)
        outs.append(out["cls"][0])
    assert np.array_equal(outs[0], outs[1])


def test_train_step_lr_zero(tiny_setup):
    eps, basis = tiny_setup
    params = init_params(TINY, 0)
    new, rep = train_step(eps[0], params, basis, LossWeights(), 0.0, 0.9, TINY)
    assert all(np.array_equal(new[k], params[k]) for k in params)
    assert rep.total > 0 and rep.grad_norm > 0
    assert rep.total == pytest.approx(rep.l_c + rep.l_b + rep.l_s + 0.1 * rep.l_nmf, abs=1e-12)


def test_train_step_descends(tiny_setup):
    eps, basis = tiny_setup
    params = init_params(TINY, 1)
    vel = {}
    totals = []
    for _ in range(11):
        params, rep = train_step(eps[1], params, basis, LossWeights(), 1e-3, 0.9, TINY, velocity=vel)
        totals.append(rep.total)
    assert totals[10] < totals[0]


def test_train_step_nonfinite_leaves_params(tiny_setup):
    eps, basis = tiny_setup
    params = init_params(TINY, 0)
    params["reg_out.b"] = np.full_like(params["reg_out.b"], np.nan)
    snapshot = {k: v.copy() for k, v in params.items()}
    vel = {}
    with np.errstate(invalid="ignore"):
        with pytest.raises(FloatingPointError, match="l_b"):
            train_step(eps[0], params, basis, LossWeights(), 1e-2, 0.9, TINY, velocity=vel)
    assert vel == {}
    for k in params:
        assert np.array_equal(params[k], snapshot[k], equal_nan=True)


def test_every_param_group_gets_gradient(tiny_setup):
    eps, basis = tiny_setup
    _, grads = loss_and_grads(init_params(TINY, 2), eps[:3], basis, TINY)
    for g in PARAM_GROUPS:
        norm = np.sqrt(sum(np.sum(v**2) for k, v in grads.items() if k.startswith(g + ".")))
        assert norm > 0, g


def test_lambda4_zero_needs_no_basis(tiny_setup):
    eps, _ = tiny_setup
    rep, _ = loss_and_grads(init_params(TINY, 0), eps[:2], None, TINY, LossWeights(1, 1, 1, 0))
    assert rep.l_nmf == 0
    with pytest.raises(ValueError):
        loss_and_grads(init_params(TINY, 0), eps[:2], None, TINY)


@pytest.mark.parametrize("seed", range(3))
def test_pipeline_gradient_slice(seed):
    assert check_pipeline(seed) <= 1e-4


def test_importance_fraction():
    from fapis.model.pipeline import InstancePrediction
    from fapis.geometry import Box

    inst = [
        InstancePrediction(Box(0, 0, 1, 1), 0.5, np.array([5.0, -5.0, -5.0, -5.0]), np.zeros((2, 2)), 0, (0, 0)),
        InstancePrediction(Box(0, 0, 1, 1), 0.5, np.array([5.0, 5.0, -5.0, -5.0]), np.zeros((2, 2)), 0, (0, 0)),
    ]
    assert importance_fraction(inst) == pytest.approx(0.375)
    assert np.isnan(importance_fraction([]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_param_init_is_seeded(seed):
    a = init_params(TINY, seed)
    b = init_params(TINY, seed)
    assert all(np.array_equal(a[k], b[k]) for k in a)
