import numpy as np
import pytest

from fusionreid import imageops as iops
from fusionreid.errors import ConfigError

RNG = np.random.default_rng(7)


def rand_image(h, w):
    return RNG.uniform(0, 1, (h, w, 3))


# ---------------------------------------------------------------------------
# resize
# ---------------------------------------------------------------------------

def test_resize_identity():
    img = rand_image(6, 4)
    assert np.array_equal(iops.resize(img, 6, 4), img)


def test_resize_checkerboard_average():
    img = np.zeros((2, 2, 3))
    img[0, 1] = 1.0
    img[1, 0] = 1.0
    out = iops.resize(img, 1, 1)
    assert np.allclose(out, 0.5)


def _bilinear_oracle(img, th, tw):
    h, w = img.shape[:2]
    out = np.zeros((th, tw, 3))
    for i in range(th):
        for j in range(tw):
            y = (i + 0.5) * h / th - 0.5
            x = (j + 0.5) * w / tw - 0.5
            y0 = min(max(int(np.floor(y)), 0), h - 1)
            x0 = min(max(int(np.floor(x)), 0), w - 1)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy = min(max(y - y0, 0.0), 1.0)
            fx = min(max(x - x0, 0.0), 1.0)
            for c in range(3):
                top = img[y0, x0, c] * (1 - fx) + img[y0, x1, c] * fx
                bot = img[y1, x0, c] * (1 - fx) + img[y1, x1, c] * fx
                out[i, j, c] = top * (1 - fy) + bot * fy
    return np.clip(out, 0, 1)


def test_resize_matches_scalar_oracle():
    ramp = np.linspace(0, 1, 4 * 4 * 3).reshape(4, 4, 3)
    got = iops.resize(ramp, 2, 2)
    want = _bilinear_oracle(ramp, 2, 2)
    assert np.max(np.abs(got - want)) < 1e-10
    img = rand_image(5, 7)
    assert np.max(np.abs(iops.resize(img, 3, 4) - _bilinear_oracle(img, 3, 4))) < 1e-10


# ---------------------------------------------------------------------------
# patchify
# ---------------------------------------------------------------------------

def test_patchify_counts():
    grid = iops.patchify(rand_image(64, 32), 16)
    assert (grid.rows, grid.cols) == (4, 2)
    assert grid.patches.shape == (8, 16 * 16 * 3)
    grid = iops.patchify(rand_image(256, 128), 16)
    assert grid.num_patches == 128


def test_patchify_rejects_non_divisible():
    with pytest.raises(ConfigError, match="60x32.*16"):
        iops.patchify(rand_image(60, 32), 16)


def test_patchify_roundtrip_bit_exact():
    for _ in range(5):
        img = rand_image(32, 16)
        assert np.array_equal(iops.unpatchify(iops.patchify(img, 8)), img)


def test_patch_order_row_major():
    img = np.zeros((4, 4, 3))
    img[0, 2:, :] = 1.0  # only in the top-right 2x2 patch
    grid = iops.patchify(img, 2)
    assert grid.patches[1].sum() > 0
    assert grid.patches[0].sum() == grid.patches[2].sum() == grid.patches[3].sum() == 0


# ---------------------------------------------------------------------------
# mask planners
# ---------------------------------------------------------------------------

def test_random_plan_counts():
    rng = np.random.default_rng(0)
    assert len(iops.random_mask_plan(8, 0.15, rng)) == 1
    assert len(iops.random_mask_plan(128, 0.15, rng)) == 19


def test_random_plan_frequency():
    rng = np.random.default_rng(42)
    hits = np.zeros(128)
    trials = 10_000
    for _ in range(trials):
        hits[iops.random_mask_plan(128, 0.15, rng).positions] += 1
    freq = hits / trials
    assert np.max(np.abs(freq - 19 / 128)) < 0.02


def test_region_plan_full_bbox_behaves_like_random():
    grid = iops.patchify(rand_image(64, 32), 16)
    plan = iops.region_mask_plan(grid, (0, 0, 64, 32), 0.15, np.random.default_rng(3))
    assert plan.strategy == "region"
    assert len(plan) == 1  # floor(0.15*8)
    # candidate set is every patch
    overlaps = iops.bbox_patch_overlaps(grid, (0, 0, 64, 32))
    assert np.all(overlaps == 1.0)


def test_region_plan_restricted_to_covered_patches():
    grid = iops.patchify(rand_image(64, 32), 16)
    # bbox exactly covering patches 2 and 3 (second patch row)
    bbox = (16, 0, 16, 32)
    for seed in range(20):
        plan = iops.region_mask_plan(grid, bbox, 0.15, np.random.default_rng(seed))
        assert len(plan) == 1 and plan.positions[0] in (2, 3)


def test_region_plan_candidate_shortage():
    grid = iops.patchify(rand_image(64, 32), 16)
    bbox = (16, 0, 16, 16)  # exactly patch 2
    plan = iops.region_mask_plan(grid, bbox, 0.45, np.random.default_rng(0))
    assert len(plan) == 1  # target floor(0.45*8)=3, only one candidate


def test_region_plan_degenerate_bbox_warns():
    grid = iops.patchify(rand_image(64, 32), 16)
    with pytest.warns(iops.DegenerateRegionWarning):
        plan = iops.region_mask_plan(grid, (0, 0, 2, 2), 0.15, np.random.default_rng(0))
    assert len(plan) == 0


def test_plans_deterministic_given_seed():
    grid = iops.patchify(rand_image(64, 32), 16)
    a = iops.random_mask_plan(8, 0.3, np.random.default_rng(5)).positions
    b = iops.random_mask_plan(8, 0.3, np.random.default_rng(5)).positions
    assert np.array_equal(a, b)
    c = iops.region_mask_plan(grid, (8, 4, 40, 24), 0.3, np.random.default_rng(5)).positions
    d = iops.region_mask_plan(grid, (8, 4, 40, 24), 0.3, np.random.default_rng(5)).positions
    assert np.array_equal(c, d)


def test_plan_targets_match_grid():
    grid = iops.patchify(rand_image(64, 32), 16)
    plan = iops.random_mask_plan(8, 0.3, np.random.default_rng(1)).with_targets(grid)
    assert np.array_equal(plan.targets, grid.patches[plan.positions])
