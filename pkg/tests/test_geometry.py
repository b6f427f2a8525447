import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fapis.geometry import (
    Box,
    LtrbTarget,
    assign_targets,
    decode_ltrb,
    encode_ltrb,
    giou,
    iou,
    mask_to_box,
    nms,
    paste_roi,
    roi_align,
    roi_align_backward,
)
from fapis.numeric import finite_difference_gradient, make_rng, relative_error


def mc_areas(a, b, n=200_000, seed=0):
    """Monte-Carlo estimate of |a & b|, |a | b| and hull area by uniform points in the hull."""
    rng = make_rng(seed)
    hx1, hy1 = min(a.x1, b.x1), min(a.y1, b.y1)
    hx2, hy2 = max(a.x2, b.x2), max(a.y2, b.y2)
    xs = rng.uniform(hx1, hx2, n)
    ys = rng.uniform(hy1, hy2, n)
    hull = (hx2 - hx1) * (hy2 - hy1)
    in_a = (xs >= a.x1) & (xs <= a.x2) & (ys >= a.y1) & (ys <= a.y2)
    in_b = (xs >= b.x1) & (xs <= b.x2) & (ys >= b.y1) & (ys <= b.y2)
    return hull * np.mean(in_a & in_b), hull * np.mean(in_a | in_b), hull


boxes = st.builds(
    lambda x, y, w, h: Box(x, y, x + w, y + h),
    st.floats(-20, 20), st.floats(-20, 20), st.floats(0.1, 20), st.floats(0.1, 20),
)


def test_box_rejects_negative_extent():
    with pytest.raises(ValueError):
        Box(2, 0, 1, 1)
    Box(1, 1, 1, 1)  # zero area is allowed


def test_iou_basic():
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, Box(5, 5, 6, 6)) == 0.0
    assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0


def test_iou_and_giou_hand_example_with_monte_carlo():
    a, b = Box(0, 0, 2, 2), Box(1, 1, 3, 3)
    assert iou(a, b) == pytest.approx(1 / 7, abs=1e-12)
    assert giou(a, b) == pytest.approx(1 / 7 - 2 / 9, abs=1e-12)
    assert giou(a, b) == pytest.approx(-5 / 63, abs=1e-12)
    inter, union, hull = mc_areas(a, b)
    assert inter / union == pytest.approx(iou(a, b), abs=0.01)
    assert inter / union - (hull - union) / hull == pytest.approx(giou(a, b), abs=0.01)


def test_giou_limits():
    a = Box(0, 0, 1, 1)
    assert giou(a, a) == 1.0
    assert giou(a, Box(100, 100, 101, 101)) < -0.9
    with pytest.raises(ValueError):
        giou(Box(0, 0, 0, 0), Box(1, 1, 1, 1))


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_giou_iou_properties(a, b):
    assert 0.0 <= iou(a, b) <= 1.0
    assert -1.0 <= giou(a, b) <= iou(a, b) + 1e-12
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-12)
    assert giou(a, b) == pytest.approx(giou(b, a), abs=1e-12)
    union = a.area + b.area - a.area * 0 - (
        max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1)) * max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    )
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    if abs(hull - union) < 1e-9 * hull:
        assert giou(a, b) == pytest.approx(iou(a, b), abs=1e-9)
    elif hull - union > 1e-6 * hull:
        assert giou(a, b) < iou(a, b)


def test_encode_decode_examples():
    assert encode_ltrb(2, 2, Box(0, 0, 4, 4)) == LtrbTarget(2, 2, 2, 2)
    assert encode_ltrb(1, 1, Box(0, 0, 4, 2)) == LtrbTarget(1, 1, 3, 1)
    assert decode_ltrb(1, 1, LtrbTarget(1, 1, 3, 1)) == Box(0, 0, 4, 2)
    with pytest.raises(ValueError):
        encode_ltrb(5, 1, Box(0, 0, 4, 2))
    with pytest.raises(ValueError):
        encode_ltrb(0, 1, Box(0, 0, 4, 2))  # on the edge is not strictly inside


def test_encode_decode_round_trip():
    rng = make_rng(11)
    for _ in range(100):
        x1, y1 = rng.uniform(-50, 50, 2)
        w, h = rng.uniform(0.5, 40, 2)
        box = Box(x1, y1, x1 + w, y1 + h)
        lx, ly = x1 + w * rng.uniform(0.01, 0.99), y1 + h * rng.uniform(0.01, 0.99)
        back = decode_ltrb(lx, ly, encode_ltrb(lx, ly, box))
        np.testing.assert_allclose(back.as_array(), box.as_array(), atol=1e-12)


def assign_oracle(gt, h, w, stride, lo, hi):
    """Literal per-location loop over all boxes."""
    cls = np.zeros((h, w))
    ids = np.full((h, w), -1)
    reg = np.zeros((h, w, 4))
    for y in range(h):
        for x in range(w):
            px, py = (x + 0.5) * stride, (y + 0.5) * stride
            cands = []
            for k, b in enumerate(gt):
                ltrb = (px - b.x1, py - b.y1, b.x2 - px, b.y2 - py)
                if min(ltrb) > 0 and lo <= max(ltrb) < hi:
                    cands.append((b.area, k, ltrb))
            if cands:
                _, k, ltrb = min(cands, key=lambda c: (c[0], c[1]))
                cls[y, x], ids[y, x], reg[y, x] = 1, k, ltrb
    return cls, ids, reg


def test_assign_full_coverage_and_background():
    t = assign_targets([Box(0, 0, 32, 32)], 8, 8, 4.0)
    assert t.n_pos == 64 and np.all(t.box_id == 0)
    t = assign_targets([Box(0, 0, 4, 4)], 8, 8, 4.0)
    assert t.cls[3, 3] == 0 and t.box_id[3, 3] == -1
    empty = assign_targets([], 4, 4, 4.0)
    assert empty.n_pos == 0 and np.all(empty.box_id == -1)


def test_assign_nested_prefers_smaller_box():
    big, small = Box(0, 0, 32, 32), Box(8, 8, 16, 16)
    t = assign_targets([big, small], 8, 8, 4.0)
    assert t.box_id[2, 2] == 1  # center (10, 10) is inside both
    np.testing.assert_allclose(t.reg[2, 2], [2, 2, 6, 6])
    assert t.box_id[0, 0] == 0


def test_assign_equal_area_tie_goes_to_lower_index():
    a, b = Box(0, 0, 16, 8), Box(0, 0, 8, 16)
    t = assign_targets([a, b], 4, 4, 4.0)
    assert t.box_id[0, 0] == 0
    t = assign_targets([b, a], 4, 4, 4.0)
    assert t.box_id[0, 0] == 0


@pytest.mark.parametrize("seed", range(30))
def test_assign_matches_oracle(seed):
    rng = make_rng(seed, 99)
    gt = []
    for _ in range(int(rng.integers(0, 5))):
        x1, y1 = rng.uniform(0, 50, 2)
        w, h = rng.uniform(2, 30, 2)
        gt.append(Box(x1, y1, x1 + w, y1 + h))
    lo, hi = [(0, np.inf), (0, 12), (8, 64)][seed % 3]
    t = assign_targets(gt, 16, 16, 4.0, lo, hi)
    cls, ids, reg = assign_oracle(gt, 16, 16, 4.0, lo, hi)
    assert t.n_pos == int(cls.sum())
    assert np.array_equal(t.cls, cls)
    assert np.array_equal(t.box_id, ids)
    np.testing.assert_allclose(t.reg, reg, atol=1e-12)
    assert np.all(t.reg[t.cls == 1] >= 0)
    assert np.array_equal(t.box_id == -1, t.cls == 0)


def greedy_nms_oracle(boxes, scores, thresh, top_n):
    remaining = list(range(len(boxes)))
    kept = []
    while remaining and len(kept) < top_n:
        best = max(remaining, key=lambda i: (scores[i], -i))
        kept.append(best)
        remaining = [i for i in remaining if i != best and iou(boxes[i], boxes[best]) <= thresh]
    return kept


def random_boxes(rng, n, extent=60):
    out = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, extent, 2)
        w, h = rng.uniform(2, 25, 2)
        out.append(Box(x1, y1, x1 + w, y1 + h))
    return out


def test_nms_trivial_cases():
    assert nms([], [], 0.5, 5) == []
    assert nms([Box(0, 0, 1, 1)], [0.3], 0.5, 5) == [0]
    same = [Box(0, 0, 4, 4), Box(0, 0, 4, 4)]
    assert nms(same, [0.8, 0.9], 0.5, 5) == [1]
    assert nms(same, [0.9, 0.9], 0.5, 5) == [0]


@pytest.mark.parametrize("seed", range(50))
def test_nms_matches_greedy_oracle(seed):
    rng = make_rng(seed, 5)
    bxs = random_boxes(rng, 20)
    # quantized scores create ties
    scores = list(np.round(rng.uniform(0, 1, 20), 1))
    thresh = float(rng.uniform(0.2, 0.8))
    top_n = int(rng.integers(1, 25))
    got = nms(bxs, scores, thresh, top_n)
    assert got == greedy_nms_oracle(bxs, scores, thresh, top_n)
    kept_scores = [scores[i] for i in got]
    assert kept_scores == sorted(kept_scores, reverse=True)
    for i, j in itertools.combinations(got, 2):
        assert iou(bxs[i], bxs[j]) <= thresh


def bilinear_oracle(f, y, x):
    """Sample an (H, W) map at continuous pixel-center coordinates, border clamped."""
    h, w = f.shape
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    dy, dx = y - y0, x - x0
    return ((1 - dy) * (1 - dx) * f[y0, x0] + (1 - dy) * dx * f[y0, x1]
            + dy * (1 - dx) * f[y1, x0] + dy * dx * f[y1, x1])


def roi_align_oracle(f, box, oh, ow):
    out = np.zeros((oh, ow))
    bh, bw = box.height / oh, box.width / ow
    for i in range(oh):
        for j in range(ow):
            acc = 0.0
            for sy in (0.25, 0.75):
                for sx in (0.25, 0.75):
                    y = box.y1 + (i + sy) * bh - 0.5
                    x = box.x1 + (j + sx) * bw - 0.5
                    acc += bilinear_oracle(f, y, x)
            out[i, j] = acc / 4
    return out


def test_roi_align_constant_map():
    f = np.full((6, 7, 2), 3.25)
    out = roi_align(f, Box(0.3, 1.1, 5.2, 4.9), 4, 3)
    np.testing.assert_allclose(out, 3.25, atol=1e-13)


def test_roi_align_aligned_blocks_are_block_means():
    f = np.arange(16.0).reshape(4, 4, 1)
    out = roi_align(f, Box(0, 0, 4, 4), 2, 2)[..., 0]
    # each 2x2 bin samples exactly at its four pixel centers
    expected = f[..., 0].reshape(2, 2, 2, 2).mean(axis=(1, 3))
    np.testing.assert_allclose(out, expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_roi_align_matches_sampling_oracle(seed):
    rng = make_rng(seed, 8)
    f = rng.normal(size=(6, 6, 1))
    x1, y1 = rng.uniform(0, 4, 2)
    box = Box(x1, y1, x1 + rng.uniform(0.5, 6 - x1), y1 + rng.uniform(0.5, 6 - y1))
    oh, ow = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    out = roi_align(f, box, oh, ow)[..., 0]
    assert np.max(np.abs(out - roi_align_oracle(f[..., 0], box, oh, ow))) <= 1e-10


def test_roi_align_gradient():
    rng = make_rng(4)
    f = rng.normal(size=(6, 6, 2))
    box = Box(0.7, 1.2, 5.1, 4.4)
    r = rng.normal(size=(3, 3, 2))
    analytic = roi_align_backward(r, box, f.shape)
    fd = finite_difference_gradient(lambda x: float(np.sum(roi_align(x, box, 3, 3) * r)), f)
    assert relative_error(analytic, fd) <= 1e-6


def test_roi_align_rejects_degenerate():
    with pytest.raises(ValueError):
        roi_align(np.zeros((4, 4, 1)), Box(5, 5, 6, 6), 2, 2)
    with pytest.raises(ValueError):
        roi_align(np.zeros((4, 4, 1)), Box(0, 0, 2, 2), 0, 2)


def test_paste_roi_of_ones_fills_box():
    out = paste_roi(np.ones((8, 8)), Box(2, 3, 10, 7), 12, 12)
    expected = np.zeros((12, 12))
    expected[3:7, 2:10] = 1
    np.testing.assert_array_equal(out, expected)


def test_mask_to_box_is_tight():
    m = np.zeros((10, 10), dtype=bool)
    m[2:5, 3:9] = True
    m[6, 4] = True
    assert mask_to_box(m) == Box(3, 2, 9, 7)
    with pytest.raises(ValueError):
        mask_to_box(np.zeros((3, 3)))
