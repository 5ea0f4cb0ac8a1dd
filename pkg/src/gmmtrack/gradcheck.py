"""Central finite-difference check of every analytic energy gradient on random states."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energy import (
    FrameData,
    Objective,
    TemporalState,
    TouchConstraint,
    TouchConstraintSet,
)
from .kinematics import ARTICULATION, HAND_R, HAND_T, N_POSE, OBJECT_R, OBJECT_T, KinematicModel
from .scene import GaussianMixture, SceneModel, pose_scene

CHECKED = ("e_a", "e_s", "e_p", "e_t", "e_c", "e_o", "e_align", "e_label")


@dataclass
class GradcheckResult:
    term: str
    worst_relative: float
    states: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_relative < self.tolerance


def numeric_gradient(fn, x, step: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = step
        g[k] = (fn(x + e) - fn(x - e)) / (2 * step)
    return g


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    diff = np.linalg.norm(np.asarray(analytic) - np.asarray(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return 0.0 if diff < floor else float(diff / floor)
    return float(diff / scale)


def random_state(scene: SceneModel, kinematic: KinematicModel, rng: np.random.Generator) -> Objective:
    """Random pose with a perturbed copy of the posed model as data, plus random temporal state,
    visibility, labels and contacts, so that every term is active."""
    pose = np.zeros(N_POSE)
    pose[HAND_T] = rng.normal(0, 30, 3) + [0, 60, 450]
    pose[HAND_R] = rng.normal(0, 0.4, 3) + [0, 0, np.pi]
    lo, hi = kinematic.lower, kinematic.upper
    # some articulation DOFs outside their limits so the limit prior is non-zero
    pose[ARTICULATION] = rng.uniform(lo - 0.2, hi + 0.2)
    posed = pose_scene(scene, kinematic, pose)
    nh = scene.n_hand
    tip_anchor = posed.means[scene.fingertips[1]]
    pose[OBJECT_T] = tip_anchor + rng.normal(0, 10, 3)
    pose[OBJECT_R] = rng.normal(0, 1.0, 3)
    posed = pose_scene(scene, kinematic, pose)

    def noisy(sub, n_extra, labels):
        means = np.concatenate([sub.means + rng.normal(0, 8, sub.means.shape),
                                sub.means[rng.integers(0, len(sub), n_extra)] + rng.normal(0, 15, (n_extra, 3))])
        sig = rng.uniform(3, 10, len(means))
        return GaussianMixture(means, sig, labels=labels(len(means)), probs=rng.uniform(0.3, 1.0, len(means)))

    data_h = noisy(posed.subset(np.arange(nh)), 20, lambda n: rng.integers(0, 6, n))
    data_o = noisy(posed.subset(np.arange(nh, scene.n_total)), 5, lambda n: np.full(n, 6))
    velocity = rng.normal(0, 0.02, N_POSE)
    previous = pose + rng.normal(0, 0.05, N_POSE)
    f_hat = rng.uniform(0, 1, nh)
    state = TemporalState(previous, velocity, f_hat)
    contacts = TouchConstraintSet(tuple(
        TouchConstraint(int(k), int(rng.integers(0, scene.n_object)), float(rng.uniform(10, 25)))
        for k in scene.fingertips[rng.permutation(5)[:3]]))
    visibility = rng.uniform(0.2, 1.0, scene.n_total)
    return Objective(FrameData(data_h, data_o), scene, kinematic, state, contacts, visibility=visibility), pose


def run_gradcheck(scene: SceneModel, kinematic: KinematicModel, states: int = 100, seed: int = 0,
                  step: float = 1e-5, tolerance: float = 1e-4, floor: float = 1e-8,
                  terms=CHECKED) -> list[GradcheckResult]:
    rng = np.random.default_rng(seed)
    worst = {t: 0.0 for t in terms}
    singles = [t for t in terms if t not in ("e_align", "e_label")]

    def values(obj, x):
        out = {t: v for t, (v, _) in obj.terms(x, singles, enabled_only=False).items()}
        if "e_align" in terms:
            out["e_align"] = obj.align(x)[0]
        if "e_label" in terms:
            out["e_label"] = obj.label(x)[0]
        return out

    for _ in range(states):
        obj, pose = random_state(scene, kinematic, rng)
        # evaluate around a pose nudged off the data so no term sits at an exact stationary point
        pose = pose + rng.normal(0, 0.01, N_POSE)
        analytic = {t: g for t, (_, g) in obj.terms(pose, singles, enabled_only=False).items()}
        if "e_align" in terms:
            analytic["e_align"] = obj.align(pose)[1]
        if "e_label" in terms:
            analytic["e_label"] = obj.label(pose)[1]
        numeric = {t: np.zeros(N_POSE) for t in terms}
        for k in range(N_POSE):
            e = np.zeros(N_POSE)
            e[k] = step
            plus, minus = values(obj, pose + e), values(obj, pose - e)
            for t in terms:
                numeric[t][k] = (plus[t] - minus[t]) / (2 * step)
        for t in terms:
            worst[t] = max(worst[t], relative_error(analytic[t], numeric[t], floor))
    return [GradcheckResult(t, worst[t], states, tolerance) for t in terms]


