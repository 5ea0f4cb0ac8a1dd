"""Tracking energies with closed-form values and analytic pose gradients.

All distances are millimetres, so the alignment term carries units of mm^3 and
dominates the regularisers at the stock weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import InvalidInputError, NonFiniteError
from .kinematics import ARTICULATION, N_POSE, KinematicModel, check_pose, forward_kinematics
from .scene import GaussianMixture, SceneModel, posed_means_jacobian


@dataclass(frozen=True)
class EnergyWeights:
    w_p: float = 0.1
    w_t: float = 0.1
    w_s: float = 3e-7
    w_c: float = 5e-7
    w_o: float = 1.0
    lam: float = 1.003
    r_max: float = 300.0

    def __post_init__(self):
        if min(self.w_p, self.w_t, self.w_s, self.w_c, self.w_o, self.r_max) < 0:
            raise InvalidInputError("energy weights must be non-negative")
        if self.lam < 1:
            raise InvalidInputError("lambda must be >= 1")


@dataclass(frozen=True)
class TermSwitches:
    """Ablation switches; a disabled term contributes nothing to any composite."""

    e_a: bool = True
    e_s: bool = True
    e_p: bool = True
    e_t: bool = True
    e_c: bool = True
    e_o: bool = True

    @classmethod
    def data_only(cls) -> "TermSwitches":
        return cls(e_a=True, e_s=False, e_p=False, e_t=False, e_c=False, e_o=False)


@dataclass
class TemporalState:
    previous_pose: np.ndarray
    velocity: np.ndarray = None
    f_hat: np.ndarray = None

    def __post_init__(self):
        self.previous_pose = np.asarray(self.previous_pose, dtype=float)
        if self.velocity is None:
            self.velocity = np.zeros(N_POSE)

    @property
    def pose_old(self) -> np.ndarray:
        return self.previous_pose


@dataclass(frozen=True)
class TouchConstraint:
    k: int  # fingertip Gaussian, index into the hand mixture
    l: int  # object Gaussian, index into the object mixture
    t_d: float

    def __post_init__(self):
        if not self.t_d > 0:
            raise InvalidInputError("target distance must be positive")


@dataclass(frozen=True)
class TouchConstraintSet:
    constraints: tuple[TouchConstraint, ...] = ()
    release_factor: float = 1.5

    def __post_init__(self):
        ks = [c.k for c in self.constraints]
        if len(ks) != len(set(ks)):
            raise InvalidInputError("at most one active constraint per fingertip")

    def __len__(self):
        return len(self.constraints)

    def release_threshold(self, c: TouchConstraint) -> float:
        return self.release_factor * c.t_d


# --- Gaussian overlap -----------------------------------------------------------


def gaussian_overlap(mu_i, sigma_i, mu_j, sigma_j):
    """Integral over R^3 of the product of two unnormalised isotropic Gaussians."""
    sigma_i = np.asarray(sigma_i, dtype=float)
    sigma_j = np.asarray(sigma_j, dtype=float)
    if np.any(sigma_i <= 0) or np.any(sigma_j <= 0):
        raise InvalidInputError("standard deviations must be positive")
    d2 = np.sum((np.asarray(mu_i, float) - np.asarray(mu_j, float)) ** 2, axis=-1)
    s2 = sigma_i ** 2 + sigma_j ** 2
    return (2 * np.pi * sigma_i ** 2 * sigma_j ** 2 / s2) ** 1.5 * np.exp(-d2 / (2 * s2))


def _overlaps(ma, sa, mb, sb):
    """Pairwise overlaps O (na, nb), differences a - b and summed variances."""
    diff = ma[:, None, :] - mb[None, :, :]
    s2 = sa[:, None] ** 2 + sb[None, :] ** 2
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    pref = (2 * np.pi * (sa[:, None] ** 2) * (sb[None, :] ** 2) / s2) ** 1.5
    return pref * np.exp(-d2 / (2 * s2)), diff, s2


def _self_overlap(means, sigmas, weights) -> float:
    if len(means) == 0:
        return 0.0
    O, _, _ = _overlaps(means, sigmas, means, sigmas)
    return float(weights @ O @ weights)


def _channel(data: GaussianMixture, means, sigmas, weights, data_self: float | None = None):
    """One channel of the L2 density distance; returns value and d value / d model means."""
    dd = _self_overlap(data.means, data.sigmas, data.weights) if data_self is None else data_self
    grad = np.zeros_like(means)
    if len(means) == 0:
        return dd, grad
    value = dd
    if len(data):
        O, diff, s2 = _overlaps(data.means, data.sigmas, means, sigmas)  # diff = d - m
        Ow = O * data.weights[:, None] * weights[None, :]
        value -= 2.0 * Ow.sum()
        grad -= 2.0 * np.einsum("ji,jik->ik", Ow / s2, diff)
    O, diff, s2 = _overlaps(means, sigmas, means, sigmas)  # diff = m_i - m_i'
    Ow = O * weights[:, None] * weights[None, :]
    value += Ow.sum()
    # d O(m_i, m_i') / d m_i = -O (m_i - m_i') / s2, counted twice by symmetry
    grad -= 2.0 * np.einsum("ij,ijk->ik", Ow / s2, diff)
    return value, grad


def alignment_energy(data_hand: GaussianMixture, data_object: GaussianMixture,
                     model_hand: GaussianMixture, model_object: GaussianMixture):
    """Channel-separated L2 distance between data and model densities.

    Returns ``(value, d/d hand means, d/d object means)``.
    """
    if len(model_hand) + len(model_object) == 0:
        raise InvalidInputError("model mixture is empty")
    vh, gh = _channel(data_hand, model_hand.means, model_hand.sigmas, model_hand.weights)
    vo, go = _channel(data_object, model_object.means, model_object.sigmas, model_object.weights)
    return vh + vo, gh, go


def semantic_energy(model_means, model_labels, model_probs, data: GaussianMixture, r_max: float):
    """Label-gated attraction between model and data means; value and d/d model means."""
    if len(model_means) == 0 or len(data) == 0:
        return 0.0, np.zeros_like(model_means)
    diff = model_means[:, None, :] - data.means[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    active = (model_labels[:, None] == data.labels[None, :]) & (d <= r_max)
    p = model_probs[:, None] * data.probs[None, :]
    alpha = np.where(active, (1.0 - d / r_max) * p, 0.0)
    value = float((alpha * d * d).sum())
    # d/dm [p (d^2 - d^3 / r)] = p (2 - 3 d / r) (m - x)
    coef = np.where(active, p * (2.0 - 3.0 * d / r_max), 0.0)
    grad = np.einsum("ij,ijk->ik", coef, diff)
    return value, grad


# --- frame data and posed model --------------------------------------------------


@dataclass
class FrameData:
    """Data mixtures of one frame with the pose-independent self terms cached."""

    hand: GaussianMixture
    object: GaussianMixture
    _self_terms: tuple = field(default=None, repr=False)

    @property
    def self_terms(self) -> tuple[float, float]:
        if self._self_terms is None:
            self._self_terms = (_self_overlap(self.hand.means, self.hand.sigmas, self.hand.weights),
                                _self_overlap(self.object.means, self.object.sigmas, self.object.weights))
        return self._self_terms

    @property
    def all(self) -> GaussianMixture:
        return GaussianMixture.concat(self.hand, self.object)

    def __len__(self):
        return len(self.hand) + len(self.object)


@dataclass
class PosedModel:
    means: np.ndarray  # (N_s, 3)
    jacobian: np.ndarray  # (N_s, 3, 32)
    sigmas: np.ndarray
    labels: np.ndarray
    n_hand: int

    @classmethod
    def evaluate(cls, scene: SceneModel, kinematic: KinematicModel, pose) -> "PosedModel":
        chain = forward_kinematics(kinematic, pose)
        means, J = posed_means_jacobian(scene, kinematic, chain)
        return cls(means, J, scene.sigmas, scene.labels, scene.n_hand)

    def pull_back(self, grad_means: np.ndarray) -> np.ndarray:
        return np.einsum("ni,nik->k", grad_means, self.jacobian)


def _e_a(posed: PosedModel, frame: FrameData, visibility: np.ndarray):
    nh = posed.n_hand
    w = np.asarray(visibility, dtype=float)
    if len(posed.means) == 0:
        raise InvalidInputError("model mixture is empty")
    dh, do = frame.self_terms
    vh, gh = _channel(frame.hand, posed.means[:nh], posed.sigmas[:nh], w[:nh], dh)
    vo, go = _channel(frame.object, posed.means[nh:], posed.sigmas[nh:], w[nh:], do)
    return vh + vo, posed.pull_back(np.concatenate([gh, go]))


def _e_s(posed: PosedModel, frame: FrameData, r_max: float):
    v, g = semantic_energy(posed.means, posed.labels, np.ones(len(posed.means)), frame.all, r_max)
    return v, posed.pull_back(g)


def e_p(pose, kinematic: KinematicModel):
    """Squared violation of the articulation joint limits."""
    pose = np.asarray(pose, dtype=float)
    x = pose[ARTICULATION]
    lo, hi = kinematic.lower, kinematic.upper
    r = np.where(x < lo, x - lo, np.where(x > hi, x - hi, 0.0))
    g = np.zeros(N_POSE)
    g[ARTICULATION] = 2.0 * r
    return float(r @ r), g


def e_t(pose, state: TemporalState):
    """Deviation from constant-velocity extrapolation of the previous solutions."""
    r = (np.asarray(pose, float) - state.previous_pose) - state.velocity
    return float(r @ r), 2.0 * r


def _e_c(posed: PosedModel, contacts: TouchConstraintSet):
    g = np.zeros(N_POSE)
    value = 0.0
    nh = posed.n_hand
    n_obj = len(posed.means) - nh
    for c in contacts.constraints:
        if not (0 <= c.k < nh and 0 <= c.l < n_obj):
            raise InvalidInputError(f"dangling touch constraint {c}")
        li = nh + c.l
        delta = posed.means[c.k] - posed.means[li]
        q = float(delta @ delta) - c.t_d ** 2
        value += q * q
        g += 4.0 * q * delta @ (posed.jacobian[c.k] - posed.jacobian[li])
    return value, g


def occlusion_coefficients(scene: SceneModel, kinematic: KinematicModel, f_hat) -> np.ndarray:
    """Per-DOF weight sum_i (1 - f_hat_i) over Gaussians whose influence set holds the DOF."""
    f_hat = np.asarray(f_hat, dtype=float)
    return (1.0 - f_hat) @ scene.influence_matrix(kinematic)


def e_o(pose, state: TemporalState, scene: SceneModel, kinematic: KinematicModel):
    """Occlusion prior pinning occluded articulation DOFs to the previous solution."""
    f_hat = np.ones(scene.n_hand) if state.f_hat is None else state.f_hat
    c = occlusion_coefficients(scene, kinematic, f_hat)
    r = np.asarray(pose, float) - state.pose_old
    return float(c @ (r * r)), 2.0 * c * r


def e_a(pose, frame: FrameData, scene: SceneModel, kinematic: KinematicModel, visibility=None):
    posed = PosedModel.evaluate(scene, kinematic, pose)
    vis = np.ones(scene.n_total) if visibility is None else visibility
    return _e_a(posed, frame, vis)


def e_s(pose, frame: FrameData, scene: SceneModel, kinematic: KinematicModel, r_max: float = 300.0):
    return _e_s(PosedModel.evaluate(scene, kinematic, pose), frame, r_max)


def e_c(pose, contacts: TouchConstraintSet, scene: SceneModel, kinematic: KinematicModel):
    return _e_c(PosedModel.evaluate(scene, kinematic, pose), contacts)


# --- composites ------------------------------------------------------------------


TERMS = ("e_a", "e_s", "e_p", "e_t", "e_c", "e_o")
ALIGN_TERMS = ("e_a", "e_p", "e_t", "e_c", "e_o")
LABEL_TERMS = ("e_a", "e_s", "e_p")
VAL_TERMS = ("e_a", "e_p")


@dataclass
class Objective:
    """Binds one frame's inputs so composites can be evaluated as functions of pose."""

    frame: FrameData
    scene: SceneModel
    kinematic: KinematicModel
    state: TemporalState
    contacts: TouchConstraintSet = field(default_factory=TouchConstraintSet)
    weights: EnergyWeights = field(default_factory=EnergyWeights)
    switches: TermSwitches = field(default_factory=TermSwitches)
    visibility: np.ndarray = None

    def __post_init__(self):
        if self.visibility is None:
            self.visibility = np.ones(self.scene.n_total)

    def weight_of(self, term: str) -> float:
        w = self.weights
        return {"e_a": 1.0, "e_s": w.w_s, "e_p": w.w_p, "e_t": w.w_t, "e_c": w.w_c, "e_o": w.w_o}[term]

    def terms(self, pose, names=TERMS, enabled_only: bool = True) -> dict:
        """Unweighted ``{term: (value, gradient)}`` for the requested terms."""
        pose = check_pose(pose)
        names = [n for n in names if getattr(self.switches, n) or not enabled_only]
        out = {}
        posed = None
        if {"e_a", "e_s", "e_c"} & set(names):
            posed = PosedModel.evaluate(self.scene, self.kinematic, pose)
        for n in names:
            if n == "e_a":
                out[n] = _e_a(posed, self.frame, self.visibility)
            elif n == "e_s":
                out[n] = _e_s(posed, self.frame, self.weights.r_max)
            elif n == "e_p":
                out[n] = e_p(pose, self.kinematic)
            elif n == "e_t":
                out[n] = e_t(pose, self.state)
            elif n == "e_c":
                out[n] = _e_c(posed, self.contacts)
            elif n == "e_o":
                out[n] = e_o(pose, self.state, self.scene, self.kinematic)
        return out

    def combine(self, pose, names):
        value, grad = 0.0, np.zeros(N_POSE)
        for n, (v, g) in self.terms(pose, names).items():
            w = self.weight_of(n)
            value += w * v
            grad += w * g
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise NonFiniteError(f"non-finite energy while evaluating {names}")
        return value, grad

    def align(self, pose):
        return self.combine(pose, ALIGN_TERMS)

    def label(self, pose):
        return self.combine(pose, LABEL_TERMS)

    def val(self, pose) -> float:
        return self.combine(pose, VAL_TERMS)[0]


def e_align(pose, objective: Objective):
    return objective.align(pose)


def e_label(pose, objective: Objective):
    return objective.label(pose)


def e_val(pose, objective: Objective) -> float:
    return objective.val(pose)


def weights_from_dict(d: dict) -> EnergyWeights:
    names = {f.name for f in fields(EnergyWeights)}
    unknown = set(d) - names
    if unknown:
        raise InvalidInputError(f"unknown weight keys: {sorted(unknown)}")
    return EnergyWeights(**d)
