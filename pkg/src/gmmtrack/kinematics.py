"""Hand skeleton, rigid object transform and their analytic derivatives.

Pose vector layout (32 entries, millimetres and radians)::

    0:3    hand translation (world frame)
    3:6    hand rotation, axis-angle about the wrist
    6:26   articulation angles, 4 per finger (base flex, base abduct, mid flex, distal flex)
    26:29  object translation (world frame)
    29:32  object rotation, axis-angle about the object origin

A point q fixed to hand bone b maps to ``t + R(w) @ (B_b @ q)`` where ``B_b`` is the
bone transform in the hand frame; object points map to ``t_o + R(w_o) @ q``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numba
import numpy as np

from .errors import InvalidInputError

N_POSE = 32
N_HAND = 26
N_OBJECT = 6
N_ARTICULATION = 20

HAND_T = slice(0, 3)
HAND_R = slice(3, 6)
ARTICULATION = slice(6, 26)
OBJECT_T = slice(26, 29)
OBJECT_R = slice(29, 32)

MODEL_SCHEMA = "gmmtrack-hand"
MODEL_VERSION = 1


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix; works on (..., 3) stacks."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for an axis-angle vector."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < 1e-12:
        # second order Taylor expansion keeps the map smooth at zero
        return np.eye(3) + K + 0.5 * K @ K
    theta = np.sqrt(theta2)
    return np.eye(3) + (np.sin(theta) / theta) * K + ((1.0 - np.cos(theta)) / theta2) * K @ K


def left_jacobian_so3(w: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3): exp(w + d) ~= exp(J_l(w) d) exp(w)."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < 1e-10:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    theta = np.sqrt(theta2)
    a = (1.0 - np.cos(theta)) / theta2
    b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + a * K + b * K @ K


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    return exp_so3(np.asarray(axis, dtype=float) * angle)


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int
    offset: np.ndarray
    rest_rotation: np.ndarray
    dofs: tuple[int, ...] = ()
    axes: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


@dataclass(frozen=True)
class KinematicModel:
    """Articulated hand skeleton plus the implicit rigid object frame.

    ``lower``/``upper`` hold joint limits (radians) for the 20 articulation DOFs,
    ordered like pose entries 6..25. ``arm_spheres`` is only used by the renderer.
    """

    joints: tuple[Joint, ...]
    lower: np.ndarray
    upper: np.ndarray
    arm_spheres: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        dofs = sorted(d for j in self.joints for d in j.dofs)
        if dofs != list(range(6, N_HAND)):
            raise InvalidInputError("joints must drive each articulation DOF 6..25 exactly once")
        for i, j in enumerate(self.joints):
            if not (j.parent < i) or (i > 0 and j.parent < 0):
                raise InvalidInputError(f"joint {j.name!r} breaks topological order")
        if np.any(self.lower > self.upper):
            raise InvalidInputError("joint limits require lower <= upper")
        ancestors = np.zeros((len(self.joints) + 1, N_POSE), dtype=bool)
        for i, j in enumerate(self.joints):
            if j.parent >= 0:
                ancestors[i] = ancestors[j.parent]
            ancestors[i, list(j.dofs)] = True
        object.__setattr__(self, "_ancestors", ancestors)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def object_bone(self) -> int:
        """Pseudo bone index addressing the rigid object frame."""
        return len(self.joints)

    def joint_index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise InvalidInputError(f"unknown joint {name!r}")

    def path_dofs(self, bone: int) -> np.ndarray:
        """Articulation DOFs on the path root -> bone (global DOFs excluded)."""
        self._check_bone(bone)
        return np.flatnonzero(self._ancestors[bone])

    def ancestor_mask(self, bones: np.ndarray) -> np.ndarray:
        return self._ancestors[np.asarray(bones)]

    def _check_bone(self, bone: int):
        if not 0 <= int(bone) <= self.n_joints:
            raise InvalidInputError(f"bone index {bone} out of range")


@dataclass(frozen=True)
class ChainState:
    """Result of forward kinematics at one pose."""

    bones: np.ndarray  # (J, 4, 4) world transforms of the hand bones
    object_transform: np.ndarray  # (4, 4)
    hand_rotation: np.ndarray
    hand_translation: np.ndarray
    hand_left_jacobian: np.ndarray
    object_left_jacobian: np.ndarray
    dof_axes: np.ndarray  # (32, 3) world rotation axes (articulation rows only)
    dof_origins: np.ndarray  # (32, 3)

    def transform_of(self, bone: int) -> np.ndarray:
        if bone == len(self.bones):
            return self.object_transform
        return self.bones[bone]


def check_pose(pose) -> np.ndarray:
    pose = np.asarray(pose, dtype=float)
    if pose.shape != (N_POSE,):
        raise InvalidInputError(f"pose must have {N_POSE} entries, got shape {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise InvalidInputError("pose contains non-finite entries")
    return pose


def rigid(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def _joint_tables(model: KinematicModel):
    """Flat per-joint arrays for the compiled chain walk, cached on the model."""
    tables = model.__dict__.get("_tables")
    if tables is None:
        n = model.n_joints
        slots = max([len(j.dofs) for j in model.joints] + [1])
        parents = np.array([j.parent for j in model.joints], dtype=np.int64)
        rest = np.array([j.rest_rotation for j in model.joints], dtype=float).reshape(n, 3, 3)
        offsets = np.array([j.offset for j in model.joints], dtype=float).reshape(n, 3)
        dof = np.full((n, slots), -1, dtype=np.int64)
        axes = np.zeros((n, slots, 3))
        norms = np.ones((n, slots))
        K = np.zeros((n, slots, 3, 3))
        for i, j in enumerate(model.joints):
            for s, (d, a) in enumerate(zip(j.dofs, j.axes)):
                a = np.asarray(a, dtype=float)
                dof[i, s], axes[i, s], norms[i, s] = d, a, np.linalg.norm(a)
                K[i, s] = skew(a / norms[i, s])
        tables = (parents, rest, offsets, dof, axes, norms, K, K @ K)
        object.__setattr__(model, "_tables", tables)
    return tables


@numba.njit(cache=True)
def _chain_nb(pose, R_g, t_g, parents, rest, offsets, dof, axes, norms, K, KK):
    n, slots = dof.shape
    rot = np.empty((n, 3, 3))
    trans = np.empty((n, 3))
    wa = np.zeros((pose.shape[0], 3))
    wo = np.zeros((pose.shape[0], 3))
    R = np.empty((3, 3))
    E = np.empty((3, 3))
    tmp = np.empty((3, 3))
    for i in range(n):
        p = parents[i]
        Rp = R_g if p < 0 else rot[p]
        tp = t_g if p < 0 else trans[p]
        for a in range(3):
            trans[i, a] = tp[a]
            for b in range(3):
                trans[i, a] += Rp[a, b] * offsets[i, b]
                acc = 0.0
                for c in range(3):
                    acc += Rp[a, c] * rest[i, c, b]
                R[a, b] = acc
        for s in range(slots):
            d = dof[i, s]
            if d < 0:
                continue
            for a in range(3):
                wo[d, a] = trans[i, a]
                acc = 0.0
                for b in range(3):
                    acc += R[a, b] * axes[i, s, b]
                wa[d, a] = acc
            theta = pose[d] * norms[i, s]
            sn, cs = np.sin(theta), 1.0 - np.cos(theta)
            for a in range(3):
                for b in range(3):
                    E[a, b] = (1.0 if a == b else 0.0) + sn * K[i, s, a, b] + cs * KK[i, s, a, b]
            for a in range(3):
                for b in range(3):
                    acc = 0.0
                    for c in range(3):
                        acc += R[a, c] * E[c, b]
                    tmp[a, b] = acc
            R[:, :] = tmp
        rot[i] = R
    return rot, trans, wa, wo


def forward_kinematics(model: KinematicModel, pose) -> ChainState:
    pose = check_pose(pose)
    R_g = exp_so3(pose[HAND_R])
    t_g = pose[HAND_T]
    n = model.n_joints
    rot, trans, axes, origins = _chain_nb(pose, R_g, np.ascontiguousarray(t_g), *_joint_tables(model))
    bones = np.zeros((n, 4, 4))
    bones[:, :3, :3] = rot
    bones[:, :3, 3] = trans
    bones[:, 3, 3] = 1.0
    R_o = exp_so3(pose[OBJECT_R])
    return ChainState(
        bones=bones,
        object_transform=rigid(R_o, pose[OBJECT_T]),
        hand_rotation=R_g,
        hand_translation=t_g.copy(),
        hand_left_jacobian=left_jacobian_so3(pose[HAND_R]),
        object_left_jacobian=left_jacobian_so3(pose[OBJECT_R]),
        dof_axes=axes,
        dof_origins=origins,
    )


def transform_points(model: KinematicModel, chain: ChainState, bones, local_points) -> np.ndarray:
    bones = np.asarray(bones, dtype=int)
    local_points = np.asarray(local_points, dtype=float).reshape(-1, 3)
    T = np.concatenate([chain.bones, chain.object_transform[None]], axis=0)[bones]
    return np.einsum("nij,nj->ni", T[:, :3, :3], local_points) + T[:, :3, 3]


def points_jacobian(model: KinematicModel, chain: ChainState, bones, local_points):
    """World positions (N, 3) and derivatives (N, 3, 32) of bone-attached points."""
    bones = np.asarray(bones, dtype=int).reshape(-1)
    if bones.size and (bones.min() < 0 or bones.max() > model.n_joints):
        raise InvalidInputError("bone index out of range")
    world = transform_points(model, chain, bones, local_points)
    J = np.zeros((len(bones), 3, N_POSE))
    is_obj = bones == model.object_bone
    hand = ~is_obj
    if hand.any():
        p = world[hand]
        J[hand, :, 0:3] = np.eye(3)
        J[hand, :, 3:6] = -skew(p - chain.hand_translation) @ chain.hand_left_jacobian
        mask = model.ancestor_mask(bones[hand])[:, 6:26]
        # d p / d theta_k = a_k x (p - o_k) for revolute joints upstream of the bone
        lever = p[:, None, :] - chain.dof_origins[None, 6:26, :]
        cols = np.cross(np.broadcast_to(chain.dof_axes[None, 6:26, :], lever.shape), lever)
        cols *= mask[..., None]
        J[hand, :, 6:26] = np.swapaxes(cols, 1, 2)
    if is_obj.any():
        p = world[is_obj]
        t_o = chain.object_transform[:3, 3]
        J[is_obj, :, 26:29] = np.eye(3)
        J[is_obj, :, 29:32] = -skew(p - t_o) @ chain.object_left_jacobian
    return world, J


def point_jacobian(model: KinematicModel, pose, bone: int, point) -> np.ndarray:
    """3x32 derivative of a single bone-local point's world position."""
    model._check_bone(bone)
    chain = forward_kinematics(model, pose)
    _, J = points_jacobian(model, chain, [bone], np.asarray(point, dtype=float)[None])
    return J[0]


def rest_pose() -> np.ndarray:
    return np.zeros(N_POSE)


def clamp_to_limits(model: KinematicModel, pose) -> np.ndarray:
    pose = np.array(pose, dtype=float)
    pose[ARTICULATION] = np.clip(pose[ARTICULATION], model.lower, model.upper)
    return pose


# --- model-definition files -------------------------------------------------


def _parse_joints(doc: dict):
    names: dict[str, int] = {}
    joints = []
    lower = np.zeros(N_ARTICULATION)
    upper = np.zeros(N_ARTICULATION)
    for i, j in enumerate(doc["joints"]):
        parent = j.get("parent")
        if parent is None:
            parent_idx = -1
        elif parent in names:
            parent_idx = names[parent]
        else:
            raise InvalidInputError(f"joint {j['name']!r}: parent {parent!r} must be declared first")
        dofs, axes = [], []
        for d in j.get("dofs", []):
            idx = int(d["index"])
            if not 6 <= idx < N_HAND:
                raise InvalidInputError(f"joint {j['name']!r}: DOF index {idx} outside 6..25")
            axis = np.asarray(d["axis"], dtype=float)
            axis /= np.linalg.norm(axis)
            lo, hi = np.deg2rad(d["limits_deg"])
            lower[idx - 6], upper[idx - 6] = lo, hi
            dofs.append(idx)
            axes.append(axis)
        joints.append(Joint(
            name=j["name"],
            parent=parent_idx,
            offset=np.asarray(j["offset"], dtype=float),
            rest_rotation=exp_so3(np.deg2rad(j.get("rest_rotation_deg", [0, 0, 0]))),
            dofs=tuple(dofs),
            axes=np.asarray(axes, dtype=float).reshape(-1, 3),
        ))
        names[j["name"]] = i
    return joints, lower, upper


def load_model_document(path=None) -> dict:
    if path is None:
        text = resources.files("gmmtrack.data").joinpath("hand_default.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    if doc.get("schema") != MODEL_SCHEMA or doc.get("version") != MODEL_VERSION:
        raise InvalidInputError(
            f"unsupported model file: expected schema {MODEL_SCHEMA!r} version {MODEL_VERSION}")
    return doc


def kinematic_model_from_document(doc: dict) -> KinematicModel:
    joints, lower, upper = _parse_joints(doc)
    arm = np.array([[*s["center"], s["radius"]] for s in doc.get("arm_spheres", [])],
                   dtype=float).reshape(-1, 4)
    return KinematicModel(joints=tuple(joints), lower=lower, upper=upper, arm_spheres=arm)


def load_kinematic_model(path=None) -> KinematicModel:
    """Load a hand model file; ``None`` gives the bundled adult-hand profile."""
    return kinematic_model_from_document(load_model_document(path))
