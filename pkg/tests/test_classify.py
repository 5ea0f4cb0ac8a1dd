import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from matplotlib.colors import hsv_to_rgb

from gmmtrack.classify import (
    BACKGROUND_DEPTH,
    N_LAYER2,
    UNARY,
    DecisionForest,
    ForestParams,
    HsvRange,
    TrainingSet,
    Tree,
    classify_pixels,
    depth_difference_feature,
    deserialize_forest,
    feature_values,
    select_viewpoint,
    segment_object_hsv,
    serialize_forest,
    train_forest,
)
from gmmtrack.depth import ColorFrame, DepthFrame, Intrinsics
from gmmtrack.errors import InvalidInputError
from gmmtrack.kinematics import HAND_R, HAND_T, N_POSE
from gmmtrack.scene import BACKGROUND, OBJECT
from gmmtrack.synth import viewpoint_rotation

INTR = Intrinsics(200.0, 200.0, 99.5, 99.5, 200, 200)


def rgb_image(h, w, hue_deg, s=0.9, v=0.8):
    hsv = np.zeros((h, w, 3))
    hsv[..., 0] = (hue_deg % 360) / 360
    hsv[..., 1] = s
    hsv[..., 2] = v
    return np.rint(hsv_to_rgb(hsv) * 255).astype(np.uint8)


# --- colour segmentation ----------------------------------------------------------


def test_nothing_in_range():
    depth = DepthFrame(np.full((200, 200), 600.0), INTR)
    mask, hat = segment_object_hsv(ColorFrame(rgb_image(200, 200, 20)), depth, HsvRange((90, 150)))
    assert not mask.any()
    assert np.array_equal(hat.depth, depth.depth)


def test_left_half_green():
    img = rgb_image(200, 200, 20)
    img[:, :100] = rgb_image(200, 100, 120)
    depth = DepthFrame(np.full((200, 200), 600.0), INTR)
    mask, hat = segment_object_hsv(ColorFrame(img), depth, HsvRange((90, 150), (0.4, 1), (0.2, 1)))
    expect = np.zeros((200, 200), bool)
    expect[:, :100] = True
    assert np.array_equal(mask, expect)
    assert np.all(hat.depth[expect] == 0) and np.all(hat.depth[~expect] == 600)


def test_hue_wrap():
    r = HsvRange((350, 10))
    assert r.contains(np.array([[5 / 360, 0.5, 0.5]]))[0]
    assert r.contains(np.array([[355 / 360, 0.5, 0.5]]))[0]
    assert not r.contains(np.array([[180 / 360, 0.5, 0.5]]))[0]


def test_segment_ignores_pixels_without_depth():
    d = np.full((200, 200), 600.0)
    d[:50] = 0
    mask, _ = segment_object_hsv(ColorFrame(rgb_image(200, 200, 120)), DepthFrame(d, INTR), HsvRange((90, 150)))
    assert not mask[:50].any() and mask[50:].all()


def test_incongruent_frames():
    with pytest.raises(InvalidInputError):
        segment_object_hsv(ColorFrame(rgb_image(10, 10, 0)), DepthFrame(np.ones((200, 200)), INTR),
                           HsvRange((0, 10)))


# --- features -----------------------------------------------------------------------


def test_flat_plane_unary_feature_is_zero():
    d = np.full((200, 200), 800.0)
    assert depth_difference_feature(d, (100, 100), (12.0, -7.0)) == 0.0


def test_probe_off_silhouette():
    d = np.zeros((200, 200))
    d[90:110, 90:110] = 800.0
    # 40 pixel-metres at 0.8 m is 50 pixels, well outside the patch
    assert depth_difference_feature(d, (100, 100), (40.0, 0.0)) == BACKGROUND_DEPTH - 800.0
    assert depth_difference_feature(d, (100, 100), (0.0, 400.0)) == BACKGROUND_DEPTH - 800.0


def render_step(z):
    """Plane square (half width 100 mm) at z with a raised inner square (half width 30 mm) 20 mm closer."""
    vv, uu = np.mgrid[0:200, 0:200].astype(float)
    rx, ry = (uu - INTR.cx) / INTR.fx, (vv - INTR.cy) / INTR.fy
    inner = (np.abs(rx * (z - 20)) < 30) & (np.abs(ry * (z - 20)) < 30)
    outer = (np.abs(rx * z) < 100) & (np.abs(ry * z) < 100)
    return np.where(inner, z - 20.0, np.where(outer, z, 0.0))


def test_depth_scaling_invariance():
    near, far = render_step(1000.0), render_step(2000.0)
    c = (100, 100)
    # probes at 14 px (near) and about 7 px (far) both land on the outer plane
    for off, kind in (((13.7, 0.0), "unary"), ((0.0, -13.7), "unary"), ((13.7, 0.0, -13.7, 0.0), "binary"),
                      ((2.0, 1.0, 13.7, 5.0), "binary")):
        a = depth_difference_feature(near, c, off, kind)
        b = depth_difference_feature(far, c, off, kind)
        assert a == b


def test_feature_nan_without_depth():
    assert np.isnan(depth_difference_feature(np.zeros((5, 5)), (2, 2), (1.0, 1.0)))


# --- training ------------------------------------------------------------------------


def constant_images(depths, size=4):
    depth = np.stack([np.full((size, size), d, np.uint16) for d in depths])
    return depth


def test_separable_dataset_gives_depth_one_tree():
    depth = constant_images([1000] * 6 + [2000] * 6)
    labels = np.stack([np.full((4, 4), c, np.uint8) for c in [0] * 6 + [1] * 6])
    ts = TrainingSet(depth, labels, 200.0)
    params = ForestParams(trees=1, pixels_per_image=16, candidate_offsets=50, thresholds=20, max_depth=5)
    forest = train_forest(ts, 2, params, seed=0)
    tree = forest.trees[0]
    assert tree.depth() == 1
    leaves = tree.kind == -1
    assert np.all(np.isin(tree.hist[leaves].max(axis=1), [1.0]))
    vv, uu = np.mgrid[0:4, 0:4]
    for img, c in zip(depth, [0] * 6 + [1] * 6):
        p = forest.predict_proba(img.astype(float), uu.ravel(), vv.ravel())
        assert np.all(np.argmax(p, axis=1) == c)


def test_single_class_dataset():
    ts = TrainingSet(constant_images([900, 1200]), np.full((2, 4, 4), 3, np.uint8), 200.0)
    forest = train_forest(ts, 5, ForestParams(trees=2, pixels_per_image=16), seed=1)
    for t in forest.trees:
        assert len(t) == 1
        np.testing.assert_array_equal(t.hist[0], np.eye(5)[3])


def two_part_fixture(shift=0):
    d = np.zeros((48, 64))
    lab = np.full((48, 64), N_LAYER2 - 1, np.uint8)
    d[10:38, 10 + shift:30 + shift] = 500
    lab[10:38, 10 + shift:30 + shift] = 0
    d[10:38, 30 + shift:54 + shift] = 700
    lab[10:38, 30 + shift:54 + shift] = 5
    return d, lab


def toy_set():
    ims, labs = zip(*(two_part_fixture(s) for s in range(-4, 5)))
    return TrainingSet(np.array(ims, np.uint16), np.array(labs), 100.0)


def test_training_is_deterministic():
    ts = toy_set()
    p = ForestParams(trees=2, pixels_per_image=200, candidate_offsets=20, thresholds=10, max_depth=8)
    a = train_forest(ts, N_LAYER2, p, seed=11, layer=2, viewpoint="front")
    b = train_forest(ts, N_LAYER2, p, seed=11, layer=2, viewpoint="front")
    assert serialize_forest(a) == serialize_forest(b)


@pytest.mark.parametrize("max_depth", [1, 3, 6])
def test_max_depth_is_respected(max_depth):
    ts = toy_set()
    p = ForestParams(trees=2, pixels_per_image=200, candidate_offsets=20, thresholds=10, max_depth=max_depth)
    forest = train_forest(ts, N_LAYER2, p, seed=2, layer=2)
    assert all(t.depth() <= max_depth for t in forest.trees)


def test_serialisation_round_trip(tmp_path):
    ts = toy_set()
    forest = train_forest(ts, N_LAYER2, ForestParams(trees=3, pixels_per_image=150, max_depth=6,
                                                     candidate_offsets=20), seed=4, layer=2, viewpoint="thumb")
    path = tmp_path / "f.forest"
    forest.save(path)
    back = DecisionForest.load(path)
    assert serialize_forest(back) == serialize_forest(forest)
    assert (back.layer, back.viewpoint, back.n_classes, back.max_depth) == (2, "thumb", N_LAYER2, 6)
    d, _ = two_part_fixture()
    vv, uu = np.nonzero(d > 0)
    np.testing.assert_array_equal(back.predict_proba(d, uu, vv), forest.predict_proba(d, uu, vv))


def test_corrupt_forest_file():
    with pytest.raises(InvalidInputError):
        deserialize_forest(b"nope")
    with pytest.raises(InvalidInputError):
        deserialize_forest(b"XXXX" + bytes(40))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_compiled_inference_matches_reference(seed):
    rng = np.random.default_rng(seed)
    ts = toy_set()
    forest = train_forest(ts, N_LAYER2, ForestParams(trees=3, pixels_per_image=100, max_depth=7,
                                                     candidate_offsets=15), seed=int(seed % 1000), layer=2)
    d = np.where(rng.uniform(size=(48, 64)) < 0.2, 0.0, rng.uniform(300, 900, (48, 64)))
    vv, uu = np.nonzero(d > 0)
    scale = rng.uniform(50, 300)
    np.testing.assert_allclose(forest.predict_proba(d, uu, vv, scale),
                               forest.predict_proba_reference(d, uu, vv, scale), atol=1e-6)


# --- two-layer inference -------------------------------------------------------------


def leaf_forest(hist, layer):
    hist = np.asarray(hist, np.float32)[None]
    t = Tree(np.array([-1], np.int8), np.zeros((1, 4), np.float32), np.zeros(1, np.float32),
             np.array([-1], np.int32), np.array([-1], np.int32), hist)
    return DecisionForest([t], hist.shape[1], 0, 100.0, layer)


def test_invalid_frame_is_all_background():
    intr = Intrinsics(100, 100, 31.5, 23.5, 64, 48)
    out = classify_pixels(leaf_forest([1, 0, 0], 1), leaf_forest(np.eye(7)[0], 2), DepthFrame(np.zeros((48, 64)), intr))
    assert np.all(out[..., BACKGROUND] == 1) and np.all(out.sum(-1) == 1)


def test_object_mask_wins():
    intr = Intrinsics(100, 100, 31.5, 23.5, 64, 48)
    d, _ = two_part_fixture()
    mask = np.zeros_like(d, bool)
    mask[20:25, 20:25] = True
    out = classify_pixels(leaf_forest([1, 0, 0], 1), leaf_forest(np.eye(7)[0], 2), DepthFrame(d, intr), mask)
    assert np.all(out[mask][:, OBJECT] == 1)
    assert np.all(out[mask][:, :6] == 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_two_part_fixture_with_trained_forests():
    intr = Intrinsics(100, 100, 31.5, 23.5, 64, 48)
    ts = toy_set()
    l2 = train_forest(ts, N_LAYER2, ForestParams(trees=3, pixels_per_image=1500, max_depth=12,
                                                 candidate_offsets=40), seed=0, layer=2)
    hand = np.where(ts.labels < N_LAYER2 - 1, 0, 2).astype(np.uint8)
    l1 = train_forest(TrainingSet(ts.depth, hand, 100.0), 3, ForestParams(trees=3, pixels_per_image=1500,
                                                                          max_depth=12, candidate_offsets=40), seed=0)
    d, lab = two_part_fixture()
    out = classify_pixels(l1, l2, DepthFrame(d, intr))
    pred = np.argmax(out, axis=2)
    interior = np.zeros_like(d, bool)
    interior[12:36, 12:28] = True
    interior[12:36, 32:52] = True
    truth = np.where(lab == N_LAYER2 - 1, BACKGROUND, lab)
    assert (pred[interior] == truth[interior]).mean() >= 0.99
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


# --- viewpoint ------------------------------------------------------------------------


def pose_with(rotvec):
    p = np.zeros(N_POSE)
    p[HAND_T] = [0.0, 0.0, 450.0]
    p[HAND_R] = rotvec
    return p


def test_viewpoint_examples(kin):
    assert select_viewpoint(pose_with([0, 0, 0]), kin) == "front"
    assert select_viewpoint(pose_with([0, np.pi, 0]), kin) == "back"
    assert select_viewpoint(pose_with([0, np.pi / 2, 0]), kin) == "thumb"
    assert select_viewpoint(pose_with([0, -np.pi / 2, 0]), kin) == "little"


@pytest.mark.parametrize("vp", ["front", "back", "thumb", "little"])
def test_training_viewpoints_are_recognised(kin, vp):
    p = pose_with(viewpoint_rotation(vp))
    p[HAND_T] = [0, 70, 450]
    assert select_viewpoint(p, kin) == vp
