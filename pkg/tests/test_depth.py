import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmmtrack.depth import (
    DepthFrame,
    Intrinsics,
    attach_labels,
    backproject,
    data_mixtures,
    one_hot_histograms,
    project,
    quadtree_cluster,
)
from gmmtrack.errors import InvalidInputError
from gmmtrack.scene import BACKGROUND, OBJECT, PALM

INTR = Intrinsics(285.0, 285.0, 159.5, 119.5, 320, 240)


def small(depth):
    h, w = depth.shape
    return DepthFrame(depth, Intrinsics(100.0, 100.0, (w - 1) / 2, (h - 1) / 2, w, h))


def check_tiling(leaves, mask):
    owner = leaves.owner
    assert np.array_equal(owner >= 0, mask)
    counts = np.bincount(owner[mask], minlength=len(leaves))
    np.testing.assert_array_equal(counts, leaves.pixel_count)
    for i, (u0, v0, w, h) in enumerate(leaves.rects):
        inside = np.zeros_like(mask)
        inside[v0:v0 + h, u0:u0 + w] = True
        assert np.all(owner[(owner == i)] == i)
        assert np.all(inside[owner == i])


def test_principal_point_on_axis():
    np.testing.assert_allclose(backproject(INTR.cx, INTR.cy, 1000.0, INTR), [0, 0, 1000])


def test_unit_tangent_pixel():
    np.testing.assert_allclose(backproject(INTR.cx + INTR.fx, INTR.cy, 500.0, INTR), [500, 0, 500])


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 319), st.floats(0, 239), st.floats(100, 5000))
def test_project_backproject_round_trip(u, v, d):
    uv = project(backproject(u, v, d, INTR), INTR)
    assert abs(uv[0] - u) < 1e-6 and abs(uv[1] - v) < 1e-6


def test_backproject_rejects_nonpositive_depth():
    with pytest.raises(InvalidInputError):
        backproject(1, 1, 0.0, INTR)


def test_constant_patch_is_one_leaf():
    leaves = quadtree_cluster(small(np.full((8, 8), 700.0)))
    assert len(leaves) == 1
    assert leaves.pixel_count[0] == 64
    assert tuple(leaves.rects[0]) == (0, 0, 8, 8)


def test_two_depth_patch_splits():
    d = np.full((8, 8), 600.0)
    d[:, :2] = 500.0  # variance over the block is 1875 mm^2, above the 900 mm^2 bound
    leaves = quadtree_cluster(small(d))
    sizes = sorted(int(r[2]) for r in leaves.rects)
    # right quadrants are uniform 4x4 leaves; left quadrants fall to 2x2 blocks
    assert sizes == [2] * 8 + [4] * 2
    four = [tuple(r) for r in leaves.rects if r[2] == 4]
    assert (4, 0, 4, 4) in four and (4, 4, 4, 4) in four
    assert len(four) == 2
    check_tiling(leaves, d > 0)


def test_invalid_frame_gives_no_leaves():
    leaves = quadtree_cluster(small(np.zeros((16, 16))))
    assert len(leaves) == 0
    h, o = data_mixtures(leaves)
    assert len(h) == 0 and len(o) == 0


def test_leaf_gaussian_geometry():
    leaves = quadtree_cluster(small(np.full((8, 8), 1000.0)), displacement=0.0)
    # side of 8 px at 1 m with f = 100 px is 80 mm, sigma is half a side
    assert leaves.sigmas[0] == pytest.approx(40.0)
    np.testing.assert_allclose(leaves.means[0], [0, 0, 1000], atol=1e-9)
    shifted = quadtree_cluster(small(np.full((8, 8), 1000.0)), displacement=0.5)
    np.testing.assert_allclose(shifted.means[0], [0, 0, 1040], atol=1e-9)


def test_all_palm_leaf():
    leaves = attach_labels(quadtree_cluster(small(np.full((8, 8), 800.0))),
                           one_hot_histograms(np.full((8, 8), PALM)))
    assert leaves.labels[0] == PALM and leaves.probs[0] == 1.0


def test_majority_label_and_probability():
    d = np.full((8, 8), 800.0)
    hist = np.zeros((8, 8, 8))
    hist[..., OBJECT] = 0.6
    hist[..., PALM] = 0.4
    leaves = attach_labels(quadtree_cluster(small(d)), hist)
    assert leaves.labels[0] == OBJECT
    assert leaves.probs[0] == pytest.approx(0.6)


def test_tie_goes_to_lower_class():
    hist = np.zeros((8, 8, 8))
    hist[..., OBJECT] = 0.5
    hist[..., PALM] = 0.5
    leaves = attach_labels(quadtree_cluster(small(np.full((8, 8), 800.0))), hist)
    assert leaves.labels[0] == min(OBJECT, PALM)


def test_background_leaves_are_dropped_and_weights_are_one():
    d = np.full((16, 16), 800.0)
    lab = np.full((16, 16), PALM)
    lab[:, 8:] = BACKGROUND
    lab[8:, :8] = OBJECT
    leaves = attach_labels(quadtree_cluster(small(d)), one_hot_histograms(lab))
    hand, obj = data_mixtures(leaves)
    assert len(hand) == 1 and len(obj) == 1
    assert np.all(hand.weights == 1.0) and np.all(obj.weights == 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_quadtree_invariants_random_frames(seed):
    rng = np.random.default_rng(seed)
    H, W = 37, 53  # not multiples of eight
    d = rng.uniform(300, 900, (H, W))
    d = np.where(rng.uniform(size=(H, W)) < 0.3, 0.0, d)
    smooth = rng.uniform(size=(H, W)) < 0.5
    d[smooth & (d > 0)] = 600.0
    frame = small(d)
    mask = rng.uniform(size=(H, W)) < 0.8
    leaves = quadtree_cluster(frame, mask)
    m = mask & (d > 0)
    check_tiling(leaves, m)
    assert np.all(leaves.pixel_count <= 64)
    assert np.all(leaves.rects[:, 2:] <= 8)
    assert np.all((leaves.depth_var < 30.0 ** 2) | (leaves.pixel_count == 1))
    assert len(leaves) <= m.sum()


def test_mask_shape_mismatch():
    with pytest.raises(InvalidInputError):
        quadtree_cluster(small(np.ones((8, 8))), np.ones((4, 4), bool))


def test_depth_frame_validation():
    with pytest.raises(InvalidInputError):
        DepthFrame(np.ones((10, 10)), INTR)
    with pytest.raises(InvalidInputError):
        DepthFrame(np.full((240, 320), -1.0), INTR)
