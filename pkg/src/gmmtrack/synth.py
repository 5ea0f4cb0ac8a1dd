"""Synthetic labelled RGB-D frames rendered from the Gaussian scene model.

Every Gaussian is drawn as its one-standard-deviation sphere; the nearest
ray-sphere hit per pixel provides depth, class label and colour.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb
from scipy.interpolate import CubicSpline

from .classify import ARM, HAND, LAYER1_BACKGROUND, LAYER2_BACKGROUND, VIEWPOINTS, TrainingSet
from .depth import ColorFrame, DepthFrame, Intrinsics, project
from .errors import ConfigError, InvalidInputError
from .kinematics import (
    ARTICULATION,
    HAND_R,
    HAND_T,
    N_POSE,
    OBJECT_R,
    OBJECT_T,
    KinematicModel,
    exp_so3,
    forward_kinematics,
    transform_points,
)
from .scene import BACKGROUND, OBJECT, SceneModel, compute_visibility, pose_scene, posed_landmarks

ARM_LABEL = 8  # label-image code for forearm pixels (background in the 8-class space)

DEFAULT_INTRINSICS = Intrinsics(fx=285.0, fy=285.0, cx=159.5, cy=119.5, width=320, height=240)
# hand-frame +y (fingers) points up in the image, palm toward the camera
FINGERS_UP = np.array([0.0, 0.0, np.pi])
# applied after the fingers-up roll, which mirrors the thumb to the hand's -x side
_VIEW_ROTATIONS = {
    "front": np.zeros(3),
    "back": np.array([0.0, np.pi, 0.0]),
    "thumb": np.array([0.0, -np.pi / 2, 0.0]),
    "little": np.array([0.0, np.pi / 2, 0.0]),
}


@dataclass(frozen=True)
class SynthConfig:
    intrinsics: Intrinsics = DEFAULT_INTRINSICS
    object_hsv: tuple = (120.0, 0.8, 0.7)
    skin_hsv: tuple = (20.0, 0.45, 0.85)
    hue_noise_deg: float = 2.0
    depth_noise_mm: float = 2.0
    include_arm: bool = True
    wrist_position: tuple = (0.0, 70.0, 450.0)
    position_jitter_mm: float = 30.0
    tilt_jitter_deg: float = 25.0
    roll_jitter_deg: float = 30.0
    intersection_tolerance_mm: float = 0.0
    max_attempts_per_sample: int = 5000


@dataclass
class RenderedFrame:
    depth: np.ndarray  # (H, W) mm, 0 where no surface
    labels: np.ndarray  # (H, W) uint8 scene labels, ARM_LABEL for forearm
    color: np.ndarray  # (H, W, 3) uint8

    @property
    def object_mask(self) -> np.ndarray:
        return self.labels == OBJECT

    def frames(self, intrinsics: Intrinsics, timestamp: float = 0.0):
        return ColorFrame(self.color, timestamp), DepthFrame(self.depth, intrinsics, timestamp)


def _spheres(scene: SceneModel, kinematic: KinematicModel, pose, include_arm: bool):
    chain = forward_kinematics(kinematic, pose)
    posed = pose_scene(scene, kinematic, pose, chain)
    centers, radii, labels = [posed.means], [posed.sigmas], [posed.labels]
    if include_arm and len(kinematic.arm_spheres):
        arm = kinematic.arm_spheres
        centers.append(transform_points(kinematic, chain, np.zeros(len(arm), int), arm[:, :3]))
        radii.append(arm[:, 3])
        labels.append(np.full(len(arm), ARM_LABEL))
    return np.concatenate(centers), np.concatenate(radii), np.concatenate(labels)


def render_spheres(centers, radii, labels, intr: Intrinsics):
    """Nearest ray-sphere intersection per pixel; returns depth, label, owner index."""
    W, H = intr.width, intr.height
    depth = np.full((H, W), np.inf)
    owner = np.full((H, W), -1, dtype=np.int64)
    for i, (c, r) in enumerate(zip(centers, radii)):
        x, y, z = c
        if z + r <= 0:
            continue
        if z - r <= 1e-3:
            umin, umax, vmin, vmax = 0, W - 1, 0, H - 1
        else:
            us = [intr.fx * (x + s * r) / (z + t * r) + intr.cx for s in (-1, 1) for t in (-1, 1)]
            vs = [intr.fy * (y + s * r) / (z + t * r) + intr.cy for s in (-1, 1) for t in (-1, 1)]
            umin, umax = max(int(np.floor(min(us))), 0), min(int(np.ceil(max(us))), W - 1)
            vmin, vmax = max(int(np.floor(min(vs))), 0), min(int(np.ceil(max(vs))), H - 1)
        if umin > umax or vmin > vmax:
            continue
        uu, vv = np.meshgrid(np.arange(umin, umax + 1), np.arange(vmin, vmax + 1))
        rx = (uu - intr.cx) / intr.fx
        ry = (vv - intr.cy) / intr.fy
        # ray p = t (rx, ry, 1): the hit parameter t is the depth directly
        a = rx * rx + ry * ry + 1.0
        b = rx * x + ry * y + z
        disc = b * b - a * (x * x + y * y + z * z - r * r)
        hit = disc >= 0
        t = (b - np.sqrt(np.where(hit, disc, 0.0))) / a
        hit &= t > 0
        sub = depth[vmin:vmax + 1, umin:umax + 1]
        sub_o = owner[vmin:vmax + 1, umin:umax + 1]
        win = hit & (t < sub)
        sub[win] = t[win]
        sub_o[win] = i
    lab = np.full((H, W), BACKGROUND, dtype=np.uint8)
    fg = owner >= 0
    lab[fg] = np.asarray(labels)[owner[fg]]
    depth[~fg] = 0.0
    return depth, lab, owner


def _paint(labels: np.ndarray, cfg: SynthConfig, rng: np.random.Generator | None) -> np.ndarray:
    H, W = labels.shape
    hsv = np.zeros((H, W, 3))
    for mask, (h, s, v) in ((labels == OBJECT, cfg.object_hsv),
                            ((labels != OBJECT) & (labels != BACKGROUND), cfg.skin_hsv)):
        n = int(mask.sum())
        if n == 0:
            continue
        noise = rng.normal(0.0, cfg.hue_noise_deg, n) if (rng is not None and cfg.hue_noise_deg > 0) else 0.0
        hsv[mask, 0] = ((h + noise) % 360.0) / 360.0
        hsv[mask, 1] = s
        hsv[mask, 2] = v
    return np.rint(hsv_to_rgb(hsv) * 255).astype(np.uint8)


def render_frame(scene: SceneModel, kinematic: KinematicModel, pose, intrinsics: Intrinsics = DEFAULT_INTRINSICS,
                 config: SynthConfig | None = None, rng: np.random.Generator | None = None,
                 include_arm: bool | None = None, depth_noise: float | None = None) -> RenderedFrame:
    """Render depth, label and colour images of the posed scene.

    Noise (hue jitter, additive depth noise) is only applied when ``rng`` is given.
    """
    cfg = SynthConfig() if config is None else config
    arm = cfg.include_arm if include_arm is None else include_arm
    centers, radii, labels = _spheres(scene, kinematic, pose, arm)
    depth, lab, _ = render_spheres(centers, radii, labels, intrinsics)
    sigma = cfg.depth_noise_mm if depth_noise is None else depth_noise
    if rng is not None and sigma > 0:
        fg = depth > 0
        depth[fg] = np.maximum(depth[fg] + rng.normal(0.0, sigma, int(fg.sum())), 1.0)
    return RenderedFrame(depth, lab, _paint(lab, cfg, rng))


# --- training data ----------------------------------------------------------------


def random_rotation(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def compose_rotvec(a, b) -> np.ndarray:
    """Axis-angle of R(a) @ R(b)."""
    from scipy.spatial.transform import Rotation

    return (Rotation.from_rotvec(a) * Rotation.from_rotvec(b)).as_rotvec()


def unwrap_rotvec(r, reference) -> np.ndarray:
    """Equivalent axis-angle vector closest to ``reference`` (angles shifted by 2 pi multiples)."""
    r = np.asarray(r, float)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return r.copy()
    axis = r / theta
    cands = [axis * (theta + 2 * np.pi * k) for k in (-1, 0, 1)]
    return min(cands, key=lambda c: np.linalg.norm(c - reference))


def viewpoint_rotation(viewpoint: str) -> np.ndarray:
    return compose_rotvec(_VIEW_ROTATIONS[viewpoint], FINGERS_UP)


def sample_hand_pose(kinematic: KinematicModel, viewpoint: str, rng: np.random.Generator,
                     cfg: SynthConfig) -> np.ndarray:
    pose = np.zeros(N_POSE)
    pose[ARTICULATION] = rng.uniform(kinematic.lower, kinematic.upper)
    roll = np.array([0.0, 0.0, rng.uniform(-1, 1) * np.deg2rad(cfg.roll_jitter_deg)])
    tilt = random_rotation(rng, np.deg2rad(cfg.tilt_jitter_deg))
    pose[HAND_R] = compose_rotvec(tilt, compose_rotvec(viewpoint_rotation(viewpoint), roll))
    pose[HAND_T] = np.asarray(cfg.wrist_position) + rng.normal(0.0, cfg.position_jitter_mm, 3)
    return pose


def fingertip_positions(scene: SceneModel, kinematic: KinematicModel, pose) -> np.ndarray:
    return posed_landmarks(scene, kinematic, pose)[:5]


def intersects(scene: SceneModel, kinematic: KinematicModel, pose, tolerance: float = 0.0) -> bool:
    """True when any object 1-sigma sphere overlaps a hand 1-sigma sphere beyond ``tolerance``."""
    posed = pose_scene(scene, kinematic, pose)
    nh = scene.n_hand
    d = np.linalg.norm(posed.means[:nh, None] - posed.means[None, nh:], axis=-1)
    limit = posed.sigmas[:nh, None] + posed.sigmas[None, nh:] - tolerance
    return bool(np.any(d < limit))


def place_object_between_fingers(scene, kinematic, pose, rng) -> tuple[np.ndarray, float]:
    """Put the object centre uniformly on the thumb-to-finger segment; returns pose and fraction."""
    tips = fingertip_positions(scene, kinematic, pose)
    other = rng.integers(1, 5)
    s = rng.uniform(0.0, 1.0)
    pose = pose.copy()
    pose[OBJECT_T] = tips[0] + s * (tips[other] - tips[0])
    pose[OBJECT_R] = random_rotation(rng, np.pi)
    return pose, s


@dataclass
class LabeledFrames:
    depth: np.ndarray  # (N, H, W) uint16, object pixels removed
    labels: np.ndarray  # (N, H, W) uint8 scene labels with ARM_LABEL
    poses: np.ndarray  # (N, 32)
    viewpoints: list[str]
    focal: float
    rejection_rate: float = 0.0

    def __len__(self):
        return len(self.depth)

    def layer1(self) -> TrainingSet:
        lut = np.full(256, 255, dtype=np.uint8)
        lut[:6] = HAND
        lut[ARM_LABEL] = ARM
        lut[BACKGROUND] = LAYER1_BACKGROUND
        return TrainingSet(self.depth, lut[self.labels], self.focal)

    def layer2(self) -> TrainingSet:
        lut = np.full(256, 255, dtype=np.uint8)
        lut[:6] = np.arange(6)
        lut[ARM_LABEL] = LAYER2_BACKGROUND
        lut[BACKGROUND] = LAYER2_BACKGROUND
        return TrainingSet(self.depth, lut[self.labels], self.focal)

    def ground_truth(self) -> np.ndarray:
        """Scene-class labels with the forearm folded into background."""
        out = self.labels.copy()
        out[out == ARM_LABEL] = BACKGROUND
        return out


def sample_training_pose(scene, kinematic, viewpoint, rng, cfg: SynthConfig):
    """Rejection-sample a hand pose with an object between thumb and another finger."""
    for attempt in range(1, cfg.max_attempts_per_sample + 1):
        pose = sample_hand_pose(kinematic, viewpoint, rng, cfg)
        pose, _ = place_object_between_fingers(scene, kinematic, pose, rng)
        if not intersects(scene, kinematic, pose, cfg.intersection_tolerance_mm):
            return pose, attempt
    raise ConfigError("object placement rejected on every attempt; geometry is degenerate")


def generate_training_set(count: int, seed: int, scene: SceneModel, kinematic: KinematicModel,
                          config: SynthConfig | None = None, viewpoint: str | None = None) -> LabeledFrames:
    """Render ``count`` labelled frames; ``viewpoint=None`` cycles the four buckets."""
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    cfg = SynthConfig() if config is None else config
    intr = cfg.intrinsics
    depth = np.zeros((count, intr.height, intr.width), dtype=np.uint16)
    labels = np.zeros((count, intr.height, intr.width), dtype=np.uint8)
    poses = np.zeros((count, N_POSE))
    vps = []
    attempts = 0
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        vp = VIEWPOINTS[i % 4] if viewpoint is None else viewpoint
        pose, n_try = sample_training_pose(scene, kinematic, vp, rng, cfg)
        attempts += n_try
        frame = render_frame(scene, kinematic, pose, intr, cfg, rng=rng)
        d = np.where(frame.object_mask, 0.0, frame.depth)
        depth[i] = np.clip(np.rint(d), 0, 65535).astype(np.uint16)
        labels[i] = np.where(frame.object_mask, BACKGROUND, frame.labels)
        poses[i] = pose
        vps.append(vp)
    rejection = 1.0 - count / attempts
    if rejection > 0.99:
        raise ConfigError(f"rejection rate {rejection:.3f} exceeds 99%")
    return LabeledFrames(depth, labels, poses, vps, intr.fx, rejection)


# --- sequences ----------------------------------------------------------------------


@dataclass
class SyntheticSequence:
    frames: list[RenderedFrame]
    poses: np.ndarray  # (T, 32) ground truth
    landmarks: np.ndarray  # (T, 8, 3): five fingertips then three object landmarks
    visible: np.ndarray  # (T, 8) bool
    intrinsics: Intrinsics

    def __len__(self):
        return len(self.frames)

    @property
    def fingertips(self) -> np.ndarray:
        return self.landmarks[:, :5]

    @property
    def object_landmarks(self) -> np.ndarray:
        return self.landmarks[:, 5:]


def interpolate_keyframes(keyframes, length: int, times=None) -> np.ndarray:
    """Per-DOF cubic spline through keyframes sampled at ``length`` evenly spaced frames."""
    kf = np.asarray(keyframes, dtype=float)
    if kf.ndim != 2 or kf.shape[1] != N_POSE or len(kf) < 2:
        raise InvalidInputError("need at least two 32-DOF keyframes")
    t = np.linspace(0.0, length - 1, len(kf)) if times is None else np.asarray(times, float)
    spline = CubicSpline(t, kf, axis=0, bc_type="natural")
    return spline(np.arange(length, dtype=float))


def landmark_visibility(scene, kinematic, pose, frame: RenderedFrame, intr: Intrinsics) -> np.ndarray:
    """Fingertip visible when its occlusion-map factor is at least 0.5; object landmark
    visible when no hand pixel covers its projection."""
    posed = pose_scene(scene, kinematic, pose)
    f = compute_visibility(posed, intr, "f_hat", scene.n_hand)
    vis_tips = f[scene.fingertips] >= 0.5
    lm = posed_landmarks(scene, kinematic, pose)[5:]
    vis_obj = np.zeros(len(lm), dtype=bool)
    for i, (u, v) in enumerate(np.rint(project(lm, intr)).astype(int)):
        if 0 <= u < intr.width and 0 <= v < intr.height:
            vis_obj[i] = frame.labels[v, u] in (OBJECT, BACKGROUND)
    return np.concatenate([vis_tips, vis_obj])


def generate_sequence(trajectory, scene: SceneModel, kinematic: KinematicModel, length: int,
                      intrinsics: Intrinsics = DEFAULT_INTRINSICS, config: SynthConfig | None = None,
                      seed: int | None = None, include_arm: bool = False, times=None) -> SyntheticSequence:
    """Render a keyframed trajectory; noise only when ``seed`` is given."""
    cfg = SynthConfig(intrinsics=intrinsics, include_arm=include_arm) if config is None else config
    poses = interpolate_keyframes(trajectory, length, times)
    frames, landmarks, visible = [], [], []
    for i, pose in enumerate(poses):
        rng = None if seed is None else np.random.default_rng([seed, i])
        frame = render_frame(scene, kinematic, pose, intrinsics, cfg, rng=rng, include_arm=include_arm)
        frames.append(frame)
        landmarks.append(posed_landmarks(scene, kinematic, pose))
        visible.append(landmark_visibility(scene, kinematic, pose, frame, intrinsics))
    return SyntheticSequence(frames, poses, np.array(landmarks), np.array(visible), intrinsics)


# --- trajectory presets ----------------------------------------------------------------


def base_pose(wrist=(0.0, 70.0, 450.0)) -> np.ndarray:
    pose = np.zeros(N_POSE)
    pose[HAND_T] = wrist
    pose[HAND_R] = FINGERS_UP
    pose[ARTICULATION] = np.deg2rad(np.tile([15.0, 0.0, 15.0, 10.0], 5))
    return pose


def _object_in_hand_frame(kinematic, pose, offset_hand_frame) -> np.ndarray:
    """World position of a point given in the hand (wrist) frame."""
    chain = forward_kinematics(kinematic, pose)
    return transform_points(kinematic, chain, [0], np.asarray(offset_hand_frame, float)[None])[0]


def constant_trajectory(scene, kinematic, object_offset=(10.0, 150.0, -45.0)) -> np.ndarray:
    pose = base_pose()
    pose[OBJECT_T] = _object_in_hand_frame(kinematic, pose, object_offset)
    pose[OBJECT_R] = np.array([0.2, 0.3, 0.1])
    return np.stack([pose, pose])


def _rigid_move(pose, rotvec, translation, pivot) -> np.ndarray:
    """Apply one world-frame rigid motion to both hand and object."""
    out = pose.copy()
    R = exp_so3(rotvec)
    for t_sl, r_sl in ((HAND_T, HAND_R), (OBJECT_T, OBJECT_R)):
        out[t_sl] = R @ (pose[t_sl] - pivot) + pivot + translation
        out[r_sl] = unwrap_rotvec(compose_rotvec(rotvec, pose[r_sl]), pose[r_sl])
    return out


def grasp_trajectory(scene, kinematic, object_offset=(28.0, 128.0, -40.0)) -> np.ndarray:
    """Open hand closes thumb and fingers onto the object, then carries it."""
    open_ = base_pose()
    open_[ARTICULATION] = np.deg2rad(np.tile([5.0, 0.0, 5.0, 5.0], 5))
    closed = open_.copy()
    flex = np.array([[25, 5, 20, 15], [40, 0, 35, 25], [40, 0, 35, 25], [35, 0, 30, 20], [30, 0, 25, 20]], float)
    closed[ARTICULATION] = np.deg2rad(flex.ravel())
    target = _object_in_hand_frame(kinematic, closed, object_offset)
    for p in (open_, closed):
        p[OBJECT_T] = target
        p[OBJECT_R] = np.array([0.0, 0.0, np.pi / 2])
    pivot = closed[HAND_T].copy()
    carried = _rigid_move(closed, np.deg2rad([0.0, 20.0, 10.0]), np.array([40.0, -30.0, 30.0]), pivot)
    return np.stack([open_, closed, closed, carried])


def occlusion_trajectory(scene, kinematic, sweep=(-150.0, 150.0), depth_gap=70.0) -> np.ndarray:
    """Object sweeps across the fingers between the camera and the hand."""
    start = base_pose()
    mid = start.copy()
    mid[ARTICULATION] = np.deg2rad(np.tile([25.0, 0.0, 20.0, 15.0], 5))
    end = start.copy()
    fingers = _object_in_hand_frame(kinematic, start, (0.0, 120.0, 0.0))
    kf = []
    for p, x in ((start, sweep[0]), (mid, 0.0), (end, sweep[1])):
        p = p.copy()
        p[OBJECT_T] = fingers + np.array([x, 0.0, -depth_gap])
        p[OBJECT_R] = np.array([0.0, 0.0, 0.0])
        kf.append(p)
    return np.stack(kf)
