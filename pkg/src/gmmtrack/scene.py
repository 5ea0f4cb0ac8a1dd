"""Gaussian mixtures for the hand and object, posing, and occlusion-based visibility."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from .errors import InvalidInputError
from .kinematics import (
    ChainState,
    KinematicModel,
    forward_kinematics,
    load_model_document,
    points_jacobian,
    transform_points,
)

LABELS = ("thumb", "index", "middle", "ring", "little", "palm", "object", "background")
N_LABELS = len(LABELS)
PALM = LABELS.index("palm")
OBJECT = LABELS.index("object")
BACKGROUND = LABELS.index("background")
N_HAND_GAUSSIANS = 30

OCCLUSION_RASTER = (160, 120)


@dataclass
class GaussianMixture:
    """K unnormalised isotropic Gaussians with semantic annotations."""

    means: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray = None
    labels: np.ndarray = None
    probs: np.ndarray = None
    visibility: np.ndarray = None

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 3)
        k = len(self.means)
        self.sigmas = np.asarray(self.sigmas, dtype=float).reshape(k)
        if np.any(~(self.sigmas > 0)):
            raise InvalidInputError("standard deviations must be positive")
        self.weights = np.ones(k) if self.weights is None else np.asarray(self.weights, float).reshape(k)
        self.labels = (np.full(k, BACKGROUND, dtype=np.int64) if self.labels is None
                       else np.asarray(self.labels, dtype=np.int64).reshape(k))
        self.probs = np.ones(k) if self.probs is None else np.asarray(self.probs, float).reshape(k)
        self.visibility = (np.ones(k) if self.visibility is None
                           else np.asarray(self.visibility, float).reshape(k))

    def __len__(self):
        return len(self.means)

    def subset(self, index) -> "GaussianMixture":
        return GaussianMixture(self.means[index], self.sigmas[index], self.weights[index],
                               self.labels[index], self.probs[index], self.visibility[index])

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        d2 = ((x[:, None, :] - self.means[None]) ** 2).sum(-1)
        return (self.weights * np.exp(-d2 / (2 * self.sigmas ** 2))).sum(-1)

    @staticmethod
    def concat(*parts: "GaussianMixture") -> "GaussianMixture":
        return GaussianMixture(
            np.concatenate([p.means for p in parts]).reshape(-1, 3),
            np.concatenate([p.sigmas for p in parts]),
            np.concatenate([p.weights for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.probs for p in parts]),
            np.concatenate([p.visibility for p in parts]),
        )


@dataclass(frozen=True)
class SceneModel:
    """Rigged hand Gaussians followed by rigid object Gaussians (model order)."""

    hand_bones: np.ndarray
    hand_offsets: np.ndarray
    hand_sigmas: np.ndarray
    hand_labels: np.ndarray
    fingertips: np.ndarray
    object_means: np.ndarray
    object_sigmas: np.ndarray
    object_landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        if not 1 <= len(self.object_means) <= 256:
            raise InvalidInputError("object mixture must hold between 1 and 256 Gaussians")
        if len(self.fingertips) != 5:
            raise InvalidInputError("exactly five fingertip Gaussians are required")

    @property
    def n_hand(self) -> int:
        return len(self.hand_bones)

    @property
    def n_object(self) -> int:
        return len(self.object_means)

    @property
    def n_total(self) -> int:
        return self.n_hand + self.n_object

    @property
    def sigmas(self) -> np.ndarray:
        return np.concatenate([self.hand_sigmas, self.object_sigmas])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([self.hand_labels, np.full(self.n_object, OBJECT)])

    def bones(self, kinematic: KinematicModel) -> np.ndarray:
        return np.concatenate([self.hand_bones, np.full(self.n_object, kinematic.object_bone)])

    def local_points(self) -> np.ndarray:
        return np.concatenate([self.hand_offsets, self.object_means])

    def influence_sets(self, kinematic: KinematicModel) -> list[np.ndarray]:
        """Articulation DOFs influencing each hand Gaussian (global DOFs excluded)."""
        return [kinematic.path_dofs(b) for b in self.hand_bones]

    def influence_matrix(self, kinematic: KinematicModel) -> np.ndarray:
        """(N_h, 32) indicator of the influence sets."""
        return kinematic.ancestor_mask(self.hand_bones).astype(float)

    def with_object(self, mixture: GaussianMixture, landmarks=None) -> "SceneModel":
        return replace(self, object_means=mixture.means.copy(), object_sigmas=mixture.sigmas.copy(),
                       object_landmarks=(self.object_landmarks if landmarks is None
                                         else np.asarray(landmarks, float).reshape(-1, 3)))


def hand_scene_model(kinematic: KinematicModel, doc: dict | None = None,
                     object_mixture: GaussianMixture | None = None,
                     object_landmarks=None) -> SceneModel:
    """Build the hand rigging from a model-definition document."""
    doc = load_model_document() if doc is None else doc
    gs = doc["gaussians"]
    if len(gs) != N_HAND_GAUSSIANS:
        raise InvalidInputError(f"hand model needs {N_HAND_GAUSSIANS} Gaussians, file has {len(gs)}")
    bones = np.array([kinematic.joint_index(g["bone"]) for g in gs])
    offsets = np.array([g["offset"] for g in gs], dtype=float)
    sigmas = np.array([g["thickness"] / 2.0 for g in gs], dtype=float)
    labels = np.array([LABELS.index(g["label"]) for g in gs])
    tips = np.array([i for i, g in enumerate(gs) if g.get("fingertip", False)])
    if object_mixture is None:
        object_mixture = GaussianMixture(np.zeros((1, 3)), [10.0])
    return SceneModel(bones, offsets, sigmas, labels, tips, object_mixture.means.copy(),
                      object_mixture.sigmas.copy(),
                      np.zeros((0, 3)) if object_landmarks is None
                      else np.asarray(object_landmarks, float).reshape(-1, 3))


# --- posing -------------------------------------------------------------------


def pose_scene(model: SceneModel, kinematic: KinematicModel, pose, chain: ChainState | None = None,
               ) -> GaussianMixture:
    """Posed scene mixture in world coordinates (hand Gaussians first)."""
    chain = forward_kinematics(kinematic, pose) if chain is None else chain
    means = transform_points(kinematic, chain, model.bones(kinematic), model.local_points())
    return GaussianMixture(means, model.sigmas, labels=model.labels)


def posed_means_jacobian(model: SceneModel, kinematic: KinematicModel, chain: ChainState):
    return points_jacobian(kinematic, chain, model.bones(kinematic), model.local_points())


def posed_landmarks(model: SceneModel, kinematic: KinematicModel, pose, chain=None) -> np.ndarray:
    """Five fingertip means followed by the object landmarks, world frame."""
    chain = forward_kinematics(kinematic, pose) if chain is None else chain
    tips = transform_points(kinematic, chain, model.hand_bones[model.fingertips],
                            model.hand_offsets[model.fingertips])
    obj = transform_points(kinematic, chain, np.full(len(model.object_landmarks), kinematic.object_bone),
                           model.object_landmarks)
    return np.concatenate([tips, obj])


# --- visibility ---------------------------------------------------------------


def compute_visibility(posed: GaussianMixture, intrinsics, which: str = "f", n_hand: int | None = None,
                       raster=OCCLUSION_RASTER) -> np.ndarray:
    """Fraction of each Gaussian's projected disc that wins the occlusion z-test.

    ``which="f"`` returns factors for all Gaussians; ``"f_hat"`` returns the hand
    subset (first ``n_hand``), with the object still acting as occluder.
    """
    if intrinsics.width <= 0 or intrinsics.height <= 0 or raster[0] <= 0 or raster[1] <= 0:
        raise InvalidInputError("image size must be positive")
    if intrinsics.fx <= 0 or intrinsics.fy <= 0:
        raise InvalidInputError("focal lengths must be positive")
    if which not in ("f", "f_hat"):
        raise InvalidInputError("which must be 'f' or 'f_hat'")
    W, H = raster
    sx, sy = W / intrinsics.width, H / intrinsics.height
    fx, fy = intrinsics.fx * sx, intrinsics.fy * sy
    cx, cy = (intrinsics.cx + 0.5) * sx - 0.5, (intrinsics.cy + 0.5) * sy - 0.5

    zbuf = np.full((H, W), np.inf)
    owner = np.full((H, W), -1, dtype=np.int64)
    covered = np.zeros(len(posed), dtype=np.int64)
    for i, (mu, s) in enumerate(zip(posed.means, posed.sigmas)):
        z = mu[2]
        if z <= 1e-6:
            continue
        u0, v0 = fx * mu[0] / z + cx, fy * mu[1] / z + cy
        ru, rv = fx * s / z, fy * s / z
        umin, umax = max(int(np.floor(u0 - ru)), 0), min(int(np.ceil(u0 + ru)), W - 1)
        vmin, vmax = max(int(np.floor(v0 - rv)), 0), min(int(np.ceil(v0 + rv)), H - 1)
        if umin > umax or vmin > vmax:
            continue
        uu, vv = np.meshgrid(np.arange(umin, umax + 1), np.arange(vmin, vmax + 1))
        rho2 = ((uu - u0) / ru) ** 2 + ((vv - v0) / rv) ** 2
        inside = rho2 <= 1.0
        # sub-pixel discs still claim the pixel holding their centre
        cu, cv = int(np.rint(u0)), int(np.rint(v0))
        if umin <= cu <= umax and vmin <= cv <= vmax:
            inside[cv - vmin, cu - umin] = True
        if not inside.any():
            continue
        depth = z - s * np.sqrt(np.clip(1.0 - rho2, 0.0, None))
        covered[i] = inside.sum()
        sub_z = zbuf[vmin:vmax + 1, umin:umax + 1]
        sub_o = owner[vmin:vmax + 1, umin:umax + 1]
        win = inside & (depth < sub_z)
        sub_z[win] = depth[win]
        sub_o[win] = i
    won = np.bincount(owner[owner >= 0], minlength=len(posed))
    f = np.where(covered > 0, won / np.maximum(covered, 1), 0.0)
    if which == "f_hat":
        n = len(posed) if n_hand is None else n_hand
        return f[:n]
    return f


# --- object fitting -----------------------------------------------------------


@dataclass(frozen=True)
class VoxelGrid:
    occupancy: np.ndarray  # bool (nx, ny, nz)
    voxel_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))  # centre of voxel (0, 0, 0)

    def centers(self) -> np.ndarray:
        idx = np.argwhere(self.occupancy)
        return np.asarray(self.origin, float) + idx * self.voxel_size

    @property
    def volume(self) -> float:
        return float(self.occupancy.sum()) * self.voxel_size ** 3


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray


def box_grid(size, voxel: float = 2.0, center=(0.0, 0.0, 0.0)) -> VoxelGrid:
    """Filled axis-aligned box as a voxel grid centred on ``center``."""
    size = np.asarray(size, dtype=float)
    n = np.maximum(np.rint(size / voxel).astype(int), 1)
    origin = np.asarray(center, float) - size / 2 + voxel / 2
    return VoxelGrid(np.ones(tuple(n), dtype=bool), voxel, origin)


def box_mesh(size, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    hx, hy, hz = np.asarray(size, float) / 2
    c = np.asarray(center, float)
    v = np.array([[x, y, z] for x in (-hx, hx) for y in (-hy, hy) for z in (-hz, hz)]) + c
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return TriangleMesh(v, f)


def box_corners(size, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Three corners of a box sharing no face diagonal, used as object landmarks."""
    h = np.asarray(size, float) / 2
    return np.asarray(center, float) + np.array([[-1, -1, -1], [1, 1, -1], [1, -1, 1]]) * h


def voxelize_mesh(mesh: TriangleMesh, voxel_size: float) -> VoxelGrid:
    """Solid voxelisation by even-odd ray parity along +x through voxel centres."""
    v = np.asarray(mesh.vertices, dtype=float)
    f = np.asarray(mesh.faces, dtype=int)
    if len(v) == 0 or len(f) == 0:
        raise InvalidInputError("empty mesh")
    lo, hi = v.min(0), v.max(0)
    n = np.maximum(np.ceil((hi - lo) / voxel_size - 1e-9).astype(int), 1)
    origin = lo + voxel_size / 2
    ys = origin[1] + np.arange(n[1]) * voxel_size
    zs = origin[2] + np.arange(n[2]) * voxel_size
    xs = origin[0] + np.arange(n[0]) * voxel_size
    crossings = [[[] for _ in range(n[2])] for _ in range(n[1])]
    tri = v[f]
    for a, b, c in tri:
        ymin, ymax = min(a[1], b[1], c[1]), max(a[1], b[1], c[1])
        zmin, zmax = min(a[2], b[2], c[2]), max(a[2], b[2], c[2])
        jy = np.flatnonzero((ys >= ymin) & (ys < ymax))
        jz = np.flatnonzero((zs >= zmin) & (zs < zmax))
        if len(jy) == 0 or len(jz) == 0:
            continue
        Y, Z = np.meshgrid(ys[jy], zs[jz], indexing="ij")
        # barycentric test in the (y, z) projection
        d = (b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2])
        if abs(d) < 1e-12:
            continue
        l1 = ((Y - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (Z - a[2])) / d
        l2 = ((b[1] - a[1]) * (Z - a[2]) - (Y - a[1]) * (b[2] - a[2])) / d
        l0 = 1 - l1 - l2
        hit = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        X = l0 * a[0] + l1 * b[0] + l2 * c[0]
        for (iy, iz) in np.argwhere(hit):
            crossings[jy[iy]][jz[iz]].append(X[iy, iz])
    occ = np.zeros(tuple(n), dtype=bool)
    for iy in range(n[1]):
        for iz in range(n[2]):
            xs_hit = np.unique(np.round(crossings[iy][iz], 9))
            for k in range(0, len(xs_hit) - 1, 2):
                occ[(xs >= xs_hit[k]) & (xs < xs_hit[k + 1]), iy, iz] = True
    if not occ.any():
        raise InvalidInputError("mesh encloses no voxel centres")
    return VoxelGrid(occ, voxel_size, origin)


def load_obj(path) -> TriangleMesh:
    """Minimal Wavefront OBJ reader (``v`` and ``f`` records, polygons fanned)."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                faces += [[idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1)]
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{lineno}: cannot parse {line!r}") from exc
    return TriangleMesh(np.array(verts, float).reshape(-1, 3), np.array(faces, int).reshape(-1, 3))


def load_occupancy(path) -> VoxelGrid:
    data = np.load(path)
    return VoxelGrid(data["occupancy"].astype(bool), float(data["voxel_size"]),
                     np.asarray(data["origin"], float))


def fit_object_gaussians(geometry, count: int, seed: int = 0, samples: int = 20000,
                         restarts: int = 20, voxel_size: float = 2.0) -> GaussianMixture:
    """Fit ``count`` isotropic Gaussians to a solid by k-means on interior samples.

    Each sigma is the larger of the cluster's RMS spread and the radius of the
    sphere with the cluster's share of the volume.
    """
    if count < 1:
        raise InvalidInputError("count must be at least 1")
    grid = voxelize_mesh(geometry, voxel_size) if isinstance(geometry, TriangleMesh) else geometry
    centers = grid.centers()
    if len(centers) == 0:
        raise InvalidInputError("geometry has no occupied volume")
    if count > len(centers):
        raise InvalidInputError(f"count {count} exceeds the {len(centers)} occupied voxels")
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, len(centers), size=samples)
    pts = centers[pick] + rng.uniform(-0.5, 0.5, size=(samples, 3)) * grid.voxel_size

    best = None
    for _ in range(restarts):
        code, lab = kmeans2(pts, count, minit="++", seed=rng)
        if np.bincount(lab, minlength=count).min() == 0:
            continue
        distortion = ((pts - code[lab]) ** 2).sum()
        if best is None or distortion < best[0]:
            best = (distortion, code, lab)
    if best is None:
        raise InvalidInputError("k-means produced empty clusters on every restart")
    _, code, lab = best
    sizes = np.bincount(lab, minlength=count)
    rms = np.sqrt(np.bincount(lab, ((pts - code[lab]) ** 2).sum(1), minlength=count) / sizes)
    r_eq = np.cbrt(3.0 * grid.volume * (sizes / samples) / (4.0 * np.pi))
    sigmas = np.maximum(rms, r_eq)
    return GaussianMixture(code, sigmas, labels=np.full(count, OBJECT))
