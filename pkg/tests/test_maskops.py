import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soundobj.maskops import (
    CandidatePool,
    binarize,
    iou_matrix,
    mask_iou,
    match_candidates,
    nms,
    patchify_mask,
    read_mask,
    rect_mask,
    sample_background,
    write_mask,
)
from soundobj.numerics import DegenerateInputError


def pixel_iou(a, b):
    """Loop-free but independent oracle: count pixels via Python sets."""
    pa = set(zip(*np.nonzero(a)))
    pb = set(zip(*np.nonzero(b)))
    union = pa | pb
    return len(pa & pb) / len(union) if union else 0.0


@st.composite
def rects(draw, shape=(1, 16, 16)):
    _, h, w = shape
    top = draw(st.integers(0, h - 1))
    left = draw(st.integers(0, w - 1))
    height = draw(st.integers(0, h - top))
    width = draw(st.integers(0, w - left))
    return rect_mask(shape, top, left, height, width)


# -- patchify / binarize -----------------------------------------------------------

def test_patchify_top_left_quadrant():
    m = rect_mask((1, 32, 32), 0, 0, 16, 16)
    np.testing.assert_array_equal(patchify_mask(m, 16), [[1, 0, 0, 0]])


def test_patchify_empty_and_half():
    np.testing.assert_array_equal(patchify_mask(np.zeros((2, 32, 32)), 16), np.zeros((2, 4)))
    m = rect_mask((1, 32, 32), 0, 0, 8, 16)
    assert patchify_mask(m, 16)[0, 0] == 0.5


def test_patchify_rejects_bad_extents():
    with pytest.raises(ValueError):
        patchify_mask(np.zeros((1, 30, 32)), 16)
    with pytest.raises(ValueError):
        patchify_mask(np.zeros((1, 1, 2, 2)), 1)


def test_patchify_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = rng.random((2, 24, 36)) < 0.3
        grid = patchify_mask(m, 6)
        expected = np.zeros((2, 24))
        for t in range(2):
            for r in range(4):
                for c in range(6):
                    expected[t, r * 6 + c] = m[t, r * 6 : r * 6 + 6, c * 6 : c * 6 + 6].mean()
        np.testing.assert_allclose(grid, expected, atol=1e-15)


def test_binarize_examples():
    np.testing.assert_array_equal(binarize([0.9, 0.2, 0.5, 0.49], 0.5), [1, 0, 1, 0])
    np.testing.assert_array_equal(binarize(np.random.default_rng(1).random(10), 0.0), np.ones(10))
    np.testing.assert_array_equal(binarize(np.zeros(5), 0.5), np.zeros(5))


@settings(max_examples=200, deadline=None)
@given(rects(shape=(1, 16, 24)))
def test_binarize_at_one_marks_fully_covered(mask):
    full = binarize(patchify_mask(mask, 4), 1.0)
    for n in range(full.shape[1]):
        r, c = divmod(n, 6)
        assert full[0, n] == mask[0, r * 4 : r * 4 + 4, c * 4 : c * 4 + 4].all()


# -- IoU -------------------------------------------------------------------------

def test_iou_examples():
    a = rect_mask((1, 20, 20), 2, 2, 10, 10)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, rect_mask((1, 20, 20), 15, 15, 3, 3)) == 0.0
    shifted = rect_mask((1, 20, 20), 2, 7, 10, 10)
    assert mask_iou(a, shifted) == pytest.approx(1 / 3)
    assert mask_iou(a, shifted) == pytest.approx(pixel_iou(a, shifted))


def test_iou_empty_and_shape_mismatch():
    z = np.zeros((1, 4, 4), dtype=bool)
    assert mask_iou(z, z) == 0.0
    with pytest.raises(ValueError):
        mask_iou(z, np.zeros((1, 4, 5)))


@settings(max_examples=300, deadline=None)
@given(rects(), rects())
def test_iou_properties(a, b):
    v = mask_iou(a, b)
    assert v == mask_iou(b, a)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(pixel_iou(a, b))
    if a.any() and b.any():
        assert (v == 1.0) == np.array_equal(a, b)


def test_iou_matrix_matches_pairwise():
    rng = np.random.default_rng(2)
    ms = [rng.random((1, 8, 8)) < 0.4 for _ in range(5)]
    mat = iou_matrix(ms, ms[:3])
    for i in range(5):
        for j in range(3):
            assert mat[i, j] == pytest.approx(mask_iou(ms[i], ms[j]))


# -- NMS -------------------------------------------------------------------------

def brute_nms(masks, threshold, cap):
    kept = []
    for i, m in enumerate(masks):
        if all(pixel_iou(m, masks[k]) < threshold for k in kept):
            kept.append(i)
    return kept[:cap]


def test_nms_examples():
    a = rect_mask((1, 10, 10), 0, 0, 4, 4)
    c = rect_mask((1, 10, 10), 6, 6, 4, 4)
    assert nms([a, a.copy(), c], 0.9, 2) == [0, 2]
    assert nms([a], 0.5, 2) == [0]
    b = rect_mask((1, 10, 10), 0, 6, 4, 4)
    assert nms([a, b, c], 0.5, 2) == [0, 1]


@settings(max_examples=200, deadline=None)
@given(st.lists(rects(), min_size=1, max_size=6), st.floats(0.05, 1.0), st.integers(1, 4))
def test_nms_properties(masks, threshold, cap):
    kept = nms(masks, threshold, cap)
    assert kept == brute_nms(masks, threshold, cap)
    assert len(kept) <= cap
    assert all(i < j for i, j in zip(kept, kept[1:]))
    for i in kept:
        for j in kept:
            if i != j:
                assert mask_iou(masks[i], masks[j]) < threshold


def test_nms_rejects_bad_cap():
    with pytest.raises(ValueError):
        nms([np.ones((1, 2, 2))], 0.5, 0)


# -- candidate matching ------------------------------------------------------------

def test_match_argmax_over_ious():
    gt = rect_mask((1, 20, 20), 0, 0, 10, 10)
    good = rect_mask((1, 20, 20), 0, 0, 10, 8)  # IoU 0.8
    poor = rect_mask((1, 20, 20), 8, 8, 10, 10)
    pool = match_candidates([good, poor], [gt], 0.5)
    assert mask_iou(good, gt) == pytest.approx(0.8)
    assert pool.positive_indices == (0,)
    assert len(pool) == 2


def test_match_appends_gt_when_nothing_overlaps():
    gt = rect_mask((1, 20, 20), 0, 0, 5, 5)
    other = rect_mask((1, 20, 20), 10, 10, 5, 5)
    pool = match_candidates([other, other.copy()], [gt], 0.5)
    assert len(pool) == 3
    assert pool.positive_indices == (2,)
    np.testing.assert_array_equal(pool.candidates[2], gt)


def test_match_two_gts():
    g1 = rect_mask((1, 20, 20), 0, 0, 6, 6)
    g2 = rect_mask((1, 20, 20), 10, 10, 6, 6)
    pool = match_candidates([g2.copy(), rect_mask((1, 20, 20), 0, 10, 3, 3), g1.copy()], [g1, g2])
    assert pool.positive_indices == (0, 2)


def test_match_tie_takes_lowest_index():
    gt = rect_mask((1, 10, 10), 0, 0, 4, 4)
    pool = match_candidates([gt.copy(), gt.copy()], [gt])
    assert pool.positive_indices == (0,)


@settings(max_examples=200, deadline=None)
@given(st.lists(rects(), min_size=0, max_size=5), st.lists(rects(), min_size=1, max_size=2), st.floats(0.1, 0.9))
def test_match_properties(cands, gts, min_iou):
    pool = match_candidates(cands, gts, min_iou)
    assert all(0 <= i < len(pool) for i in pool.positive_indices)
    for g in gts:
        ious = [mask_iou(c, g) for c in cands]
        if ious and max(ious) >= min_iou:
            assert any(pool.positive_indices.count(i) and ious[i] == max(ious) for i in range(len(cands)))
        else:
            assert any(np.array_equal(pool.candidates[i], g) for i in pool.positive_indices)


def test_candidate_pool_validation():
    m = np.zeros((1, 4, 4))
    with pytest.raises(ValueError):
        CandidatePool([m], ())
    with pytest.raises(ValueError):
        CandidatePool([m], (1,))
    with pytest.raises(ValueError):
        CandidatePool([m, np.zeros((1, 4, 5))], (0,))


# -- background sampling -------------------------------------------------------------

def test_sample_background_example():
    grid = np.array([[0.9, 0.2, 0.0, 0.4]])
    picked = sample_background(grid, 0.5, 50, 7)
    assert len(picked) == math.ceil(0.5 * 3) == 2
    assert all(t == 0 and n in {1, 2, 3} for t, n in picked)
    assert len(set(picked)) == 2


def test_sample_background_full_and_empty():
    grid = np.array([[0.9, 0.2, 0.0, 0.4], [0.1, 0.7, 0.3, 0.6]])
    assert sample_background(grid, 0.5, 100, 0) == [(0, 1), (0, 2), (0, 3), (1, 0), (1, 2)]
    with pytest.raises(DegenerateInputError):
        sample_background(np.full((1, 4), 0.5), 0.5, 50, 0)
    with pytest.raises(ValueError):
        sample_background(grid, 0.5, 0, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1, 100), st.floats(0.05, 1.0))
def test_sample_background_properties(seed, beta, theta):
    grid = np.random.default_rng(seed).random((2, 9))
    if not np.any(grid < theta):
        return
    picked = sample_background(grid, theta, beta, seed)
    assert picked == sample_background(grid, theta, beta, seed)
    assert len(set(picked)) == len(picked) == math.ceil(beta / 100 * np.sum(grid < theta))
    assert all(grid[t, n] < theta for t, n in picked)


# -- mask records ------------------------------------------------------------------

def test_mask_round_trip_and_truncation():
    m = np.random.default_rng(3).random((2, 5, 7)) < 0.5
    buf = io.BytesIO()
    write_mask(buf, m)
    buf.seek(0)
    np.testing.assert_array_equal(read_mask(buf), m)
    with pytest.raises(ValueError, match="byte"):
        read_mask(io.BytesIO(buf.getvalue()[:20]))
