"""Two-proposal pose optimisation, contact bookkeeping and the per-frame tracking loop."""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .classify import ForestBank, HsvRange, classify_pixels, segment_object_hsv, select_viewpoint
from .depth import EPS_CLUSTER, ColorFrame, DepthFrame, attach_labels, data_mixtures, quadtree_cluster
from .energy import (
    EnergyWeights,
    FrameData,
    Objective,
    TemporalState,
    TermSwitches,
    TouchConstraint,
    TouchConstraintSet,
)
from .errors import InvalidInputError, NonFiniteError
from .kinematics import HAND_R, HAND_T, N_POSE, OBJECT_R, OBJECT_T, KinematicModel, check_pose
from .scene import BACKGROUND, SceneModel, compute_visibility, pose_scene, posed_landmarks

ROTATION_SCALE = 0.05  # rad, initial step for every angular DOF
TRANSLATION_SCALE = 5.0  # mm
MAX_HALVINGS = 10
GROWTH = 1.2
MIN_STEP = 1e-12


def step_scales() -> np.ndarray:
    """Diagonal preconditioner: translation DOFs move in mm, the rest in radians."""
    s = np.full(N_POSE, ROTATION_SCALE)
    s[HAND_T] = TRANSLATION_SCALE
    s[OBJECT_T] = TRANSLATION_SCALE
    return s


@dataclass
class DescentResult:
    pose: np.ndarray
    value: float
    initial_value: float
    accepted: int
    history: list = field(default_factory=list)


def descend(objective, init, iterations: int = 10, step: float = 1.0, scales=None,
            return_info: bool = False):
    """Preconditioned gradient descent with an adaptive step length.

    Each iteration moves along the normalised, scaled negative gradient. A move
    that does not lower the value is rejected and the step halved, at most ten
    times; a move accepted on the first try grows the step by 1.2.
    """
    x = np.asarray(init, dtype=float).copy()
    value, grad = objective(x)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise NonFiniteError("objective is not finite at the initial pose")
    D = step_scales() if scales is None else np.asarray(scales, float)
    if D.shape != x.shape:
        D = np.ones_like(x) if scales is None else np.broadcast_to(D, x.shape)
    initial = value
    history = [value]
    accepted = 0
    s = float(step)
    for _ in range(iterations):
        direction = -D * D * grad
        norm = np.linalg.norm(direction / D)
        if norm == 0.0 or not np.isfinite(norm):
            break
        direction /= norm
        moved = False
        for attempt in range(MAX_HALVINGS + 1):
            trial = x + s * direction
            try:
                v_new, g_new = objective(trial)
            except NonFiniteError:
                v_new, g_new = np.inf, None
            if v_new < value:
                x, value, grad = trial, v_new, g_new
                moved = True
                if attempt == 0:
                    s *= GROWTH
                break
            if attempt < MAX_HALVINGS:
                s *= 0.5
            if s < MIN_STEP:
                break
        if not moved:
            break
        accepted += 1
        history.append(value)
    if return_info:
        return DescentResult(x, value, initial, accepted, history)
    return x


def select_proposal(x0, x1, e_val_fn, lam: float = 1.003):
    """Label proposal ``x1`` wins when its validation energy is below lam times that of ``x0``."""
    e0, e1 = float(e_val_fn(x0)), float(e_val_fn(x1))
    return (x1, 1) if e1 < lam * e0 else (x0, 0)


def choose(e0: float, e1: float, lam: float = 1.003) -> int:
    """Index of the winning proposal from the two validation energies."""
    return 1 if e1 < lam * e0 else 0


def update_contacts(pose, scene: SceneModel, kinematic: KinematicModel,
                    contacts: TouchConstraintSet) -> TouchConstraintSet:
    """Release stretched constraints, then engage free fingertips touching the object."""
    posed = pose_scene(scene, kinematic, pose)
    return update_contacts_from_means(posed.means, posed.sigmas, scene.fingertips, scene.n_hand, contacts)


def update_contacts_from_means(means, sigmas, fingertips, n_hand: int,
                               contacts: TouchConstraintSet) -> TouchConstraintSet:
    means = np.asarray(means, float)
    sigmas = np.asarray(sigmas, float)
    obj_m, obj_s = means[n_hand:], sigmas[n_hand:]
    kept = []
    for c in contacts.constraints:
        d = np.linalg.norm(means[c.k] - obj_m[c.l])
        if d <= contacts.release_threshold(c):
            kept.append(c)
    engaged = {c.k for c in kept}
    for k in fingertips:
        k = int(k)
        if k in engaged or len(obj_m) == 0:
            continue
        d = np.linalg.norm(obj_m - means[k], axis=1)
        touching = d < sigmas[k] + obj_s
        if touching.any():
            l = int(np.flatnonzero(touching)[np.argmin(d[touching])])
            kept.append(TouchConstraint(k, l, float(sigmas[k] + obj_s[l])))
    return TouchConstraintSet(tuple(sorted(kept, key=lambda c: c.k)), contacts.release_factor)


# --- tracking loop -------------------------------------------------------------------


@dataclass(frozen=True)
class TrackerConfig:
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    switches: TermSwitches = field(default_factory=TermSwitches)
    iterations: int = 10
    initial_step: float = 1.0
    eps_cluster: float = EPS_CLUSTER
    release_factor: float = 1.5
    object_hsv: HsvRange = field(default_factory=lambda: HsvRange((90.0, 150.0), (0.4, 1.0), (0.2, 1.0)))
    parallel: bool = False
    min_leaves: int = 1


@dataclass
class TrackerState:
    pose: np.ndarray
    temporal: TemporalState
    contacts: TouchConstraintSet
    viewpoint: str
    visibility: np.ndarray  # f for all model Gaussians
    f_hat: np.ndarray
    frame_index: int = 0

    @property
    def pose_old(self) -> np.ndarray:
        return self.pose

    def snapshot(self) -> "TrackerState":
        return replace(self, pose=self.pose.copy(), visibility=self.visibility.copy(), f_hat=self.f_hat.copy(),
                       temporal=TemporalState(self.temporal.previous_pose.copy(), self.temporal.velocity.copy(),
                                              self.temporal.f_hat.copy()))


@dataclass
class FrameDiagnostics:
    frame_index: int
    proposal: int
    energies: dict
    e_val: tuple
    timings_ms: dict
    n_leaves: int
    viewpoint: str
    n_contacts: int
    warning: str | None = None


def initial_state(pose, scene: SceneModel, kinematic: KinematicModel, intrinsics,
                  config: TrackerConfig = TrackerConfig()) -> TrackerState:
    pose = check_pose(pose)
    posed = pose_scene(scene, kinematic, pose)
    f = compute_visibility(posed, intrinsics, "f")
    f_hat = f[:scene.n_hand].copy()
    return TrackerState(pose.copy(), TemporalState(pose.copy(), np.zeros(N_POSE), f_hat.copy()),
                        TouchConstraintSet((), config.release_factor),
                        select_viewpoint(pose, kinematic), f, f_hat, 0)


class Tracker:
    """Binds the static inputs (models, forests, camera) to a stream of frames."""

    def __init__(self, scene: SceneModel, kinematic: KinematicModel, forests: ForestBank | None,
                 config: TrackerConfig = TrackerConfig(), label_fn=None):
        if forests is None and label_fn is None:
            raise InvalidInputError("need forests or an explicit labelling function")
        self.scene = scene
        self.kinematic = kinematic
        self.forests = forests
        self.config = config
        self.label_fn = label_fn
        self._pool = ThreadPoolExecutor(2) if config.parallel else None

    def start(self, pose, intrinsics) -> TrackerState:
        return initial_state(pose, self.scene, self.kinematic, intrinsics, self.config)

    def track(self, state: TrackerState, color: ColorFrame, depth: DepthFrame):
        return track_frame(state, color, depth, self)


def _labels(tracker: Tracker, depth_hat: DepthFrame, object_mask, viewpoint):
    if tracker.label_fn is not None:
        return tracker.label_fn(depth_hat, object_mask, viewpoint)
    bank = tracker.forests
    return classify_pixels(bank.layer1, bank.for_viewpoint(viewpoint), depth_hat, object_mask)


def track_frame(state: TrackerState, color: ColorFrame, depth: DepthFrame, tracker: Tracker):
    """One frame of the pipeline; returns (pose, new state, diagnostics)."""
    cfg = tracker.config
    scene, kin = tracker.scene, tracker.kinematic
    timings = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = (now - clock) * 1e3
        clock = now

    object_mask, depth_hat = segment_object_hsv(color, depth, cfg.object_hsv)
    object_mask &= depth.valid
    lap("segment")
    viewpoint = select_viewpoint(state.pose, kin)
    lap("viewpoint")
    hist = _labels(tracker, depth_hat, object_mask, viewpoint)
    lap("classify")
    fg = depth.valid & (np.argmax(hist, axis=2) != BACKGROUND)
    leaves = quadtree_cluster(depth, fg, cfg.eps_cluster)
    attach_labels(leaves, hist)
    data_h, data_o = data_mixtures(leaves)
    lap("cluster")
    n_data = len(data_h) + len(data_o)
    if n_data < cfg.min_leaves:
        diag = FrameDiagnostics(state.frame_index + 1, -1, {}, (np.nan, np.nan), timings, 0, viewpoint,
                                len(state.contacts), warning="no foreground leaves")
        warnings.warn("degenerate frame: no foreground leaves; keeping previous pose", RuntimeWarning)
        new_state = state.snapshot()
        new_state.frame_index += 1
        return state.pose.copy(), new_state, diag

    # visibility of the previous solution weights the alignment term; the commit step of
    # the last frame already rasterised exactly that pose
    visibility = state.visibility
    if len(visibility) != scene.n_total:
        visibility = compute_visibility(pose_scene(scene, kin, state.pose), depth.intrinsics, "f")
    temporal = TemporalState(state.temporal.previous_pose, state.temporal.velocity, visibility[:scene.n_hand])
    objective = Objective(FrameData(data_h, data_o), scene, kin, temporal, state.contacts, cfg.weights,
                          cfg.switches, visibility)
    lap("visibility")

    def run(fn):
        return descend(fn, state.pose, cfg.iterations, cfg.initial_step, return_info=True)

    if tracker._pool is not None:
        fa = tracker._pool.submit(run, objective.align)
        fl = tracker._pool.submit(run, objective.label)
        r0, r1 = fa.result(), fl.result()
    else:
        r0, r1 = run(objective.align), run(objective.label)
    lap("optimize")
    e0, e1 = objective.val(r0.pose), objective.val(r1.pose)
    pick = choose(e0, e1, cfg.weights.lam)
    pose = (r0, r1)[pick].pose.copy()
    lap("select")

    contacts = update_contacts(pose, scene, kin, state.contacts)
    posed = pose_scene(scene, kin, pose)
    f_new = compute_visibility(posed, depth.intrinsics, "f")
    new_state = TrackerState(
        pose=pose,
        temporal=TemporalState(pose.copy(), pose - state.pose, f_new[:scene.n_hand].copy()),
        contacts=contacts,
        viewpoint=viewpoint,
        visibility=f_new,
        f_hat=f_new[:scene.n_hand].copy(),
        frame_index=state.frame_index + 1,
    )
    lap("commit")
    energies = {k: v for k, (v, _) in objective.terms(pose).items()}
    timings["total"] = sum(timings.values())
    diag = FrameDiagnostics(new_state.frame_index, pick, energies, (e0, e1), timings, n_data, viewpoint,
                            len(contacts))
    return pose, new_state, diag


def track_sequence(tracker: Tracker, frames, init_pose, intrinsics):
    """Track an iterable of (ColorFrame, DepthFrame); returns poses, landmarks, diagnostics."""
    state = tracker.start(init_pose, intrinsics)
    poses, landmarks, diags = [], [], []
    for color, depth in frames:
        pose, state, diag = track_frame(state, color, depth, tracker)
        poses.append(pose)
        landmarks.append(posed_landmarks(tracker.scene, tracker.kinematic, pose))
        diags.append(diag)
    return np.array(poses), np.array(landmarks), diags
