"""RGB-D frames to data-side Gaussian mixtures via bottom-up quadtree clustering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .scene import BACKGROUND, N_LABELS, OBJECT, GaussianMixture

EPS_CLUSTER = 30.0  # mm, standard-deviation threshold for merging
MAX_BLOCK = 8  # 2**(4 - 1) pixels per side
MAX_DEPTH_MM = 10000.0
# leaf means are pushed this many backprojected quad side lengths along the viewing ray;
# half a side (one leaf standard deviation) sits closer to the volumetric model centres
DISPLACEMENT_FACTOR = 0.5


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def scaled(self, width: int, height: int) -> "Intrinsics":
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5,
                          (self.cy + 0.5) * sy - 0.5, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass
class DepthFrame:
    depth: np.ndarray  # (H, W) millimetres, 0 = no measurement
    intrinsics: Intrinsics
    timestamp: float = 0.0

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2 or self.depth.size == 0:
            raise InvalidInputError("depth must be a non-empty 2D array")
        h, w = self.depth.shape
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise InvalidInputError(f"depth is {w}x{h} but intrinsics say "
                                    f"{self.intrinsics.width}x{self.intrinsics.height}")
        if np.any(self.depth < 0) or np.any(self.depth > MAX_DEPTH_MM) or not np.all(np.isfinite(self.depth)):
            raise InvalidInputError("depth values must lie in [0, 10000] mm")

    @property
    def shape(self):
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


@dataclass
class ColorFrame:
    rgb: np.ndarray  # (H, W, 3) uint8
    timestamp: float = 0.0

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise InvalidInputError("color frame must be HxWx3")

    @property
    def shape(self):
        return self.rgb.shape[:2]


def backproject(u, v, depth, intr: Intrinsics) -> np.ndarray:
    """Pinhole backprojection to camera coordinates (mm, +z into the scene)."""
    u, v, depth = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float))
    if np.any(depth <= 0):
        raise InvalidInputError("depth must be positive to backproject")
    x = (u - intr.cx) * depth / intr.fx
    y = (v - intr.cy) * depth / intr.fy
    return np.stack([x, y, depth], axis=-1)


def project(points, intr: Intrinsics) -> np.ndarray:
    """Camera-frame points (..., 3) to pixel coordinates (..., 2)."""
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    return np.stack([intr.fx * p[..., 0] / z + intr.cx, intr.fy * p[..., 1] / z + intr.cy], axis=-1)


@dataclass(frozen=True)
class QuadLeaf:
    rect: tuple  # (u0, v0, width, height) in pixels, clipped to the image
    depth_mean: float
    depth_var: float
    pixel_count: int
    mean: np.ndarray
    sigma: float
    label: int
    prob: float


@dataclass
class QuadLeaves:
    """Struct-of-arrays view of the quadtree leaves of one frame."""

    rects: np.ndarray  # (N, 4) int
    depth_mean: np.ndarray
    depth_var: np.ndarray
    pixel_count: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray
    owner: np.ndarray  # (H, W) leaf index per masked pixel, -1 elsewhere
    labels: np.ndarray = None
    probs: np.ndarray = None

    def __post_init__(self):
        n = len(self.rects)
        if self.labels is None:
            self.labels = np.full(n, BACKGROUND, dtype=np.int64)
        if self.probs is None:
            self.probs = np.zeros(n)

    def __len__(self):
        return len(self.rects)

    def __getitem__(self, i) -> QuadLeaf:
        return QuadLeaf(tuple(int(x) for x in self.rects[i]), float(self.depth_mean[i]),
                        float(self.depth_var[i]), int(self.pixel_count[i]), self.means[i],
                        float(self.sigmas[i]), int(self.labels[i]), float(self.probs[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def _block_sums(a: np.ndarray, s: int) -> np.ndarray:
    h, w = a.shape
    return a.reshape(h // s, s, w // s, s).sum(axis=(1, 3))


def quadtree_cluster(frame: DepthFrame, mask: np.ndarray | None = None, eps_cluster: float = EPS_CLUSTER,
                     displacement: float = DISPLACEMENT_FACTOR) -> QuadLeaves:
    """Merge masked pixels bottom-up into blocks of at most 8x8 with depth std < eps."""
    depth = frame.depth
    H, W = depth.shape
    if mask is not None and np.shape(mask) != depth.shape:
        raise InvalidInputError("mask and depth shapes differ")
    m = frame.valid if mask is None else (np.asarray(mask, dtype=bool) & frame.valid)
    Hp, Wp = -(-H // MAX_BLOCK) * MAX_BLOCK, -(-W // MAX_BLOCK) * MAX_BLOCK
    mp = np.zeros((Hp, Wp), dtype=bool)
    mp[:H, :W] = m
    dp = np.zeros((Hp, Wp))
    dp[:H, :W] = np.where(m, depth, 0.0)
    vv, uu = np.mgrid[0:Hp, 0:Wp].astype(float)

    levels = [1, 2, 4, 8]
    stats = {}
    merged = {}
    for s in levels:
        cnt = _block_sums(mp.astype(np.int64), s)
        sd = _block_sums(dp, s)
        sd2 = _block_sums(dp * dp, s)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(cnt > 0, sd / np.maximum(cnt, 1), 0.0)
            var = np.where(cnt > 0, np.maximum(sd2 / np.maximum(cnt, 1) - mean ** 2, 0.0), 0.0)
        stats[s] = (cnt, mean, var)
        ok = (cnt >= 1) & ((cnt < 2) | (var < eps_cluster ** 2))
        if s > 1:
            ccnt = stats[s // 2][0]
            child_ok = merged[s // 2] | (ccnt == 0)
            h, w = child_ok.shape
            ok &= child_ok.reshape(h // 2, 2, w // 2, 2).all(axis=(1, 3))
        merged[s] = ok

    rect_list, dmean, dvar, counts, centroid = [], [], [], [], []
    owner = -np.ones((Hp, Wp), dtype=np.int64)
    su = {s: _block_sums(np.where(mp, uu, 0.0), s) for s in levels}
    sv = {s: _block_sums(np.where(mp, vv, 0.0), s) for s in levels}
    for s in reversed(levels):
        leaf = merged[s].copy()
        if s < MAX_BLOCK:
            parent = merged[2 * s].repeat(2, axis=0).repeat(2, axis=1)
            leaf &= ~parent
        by, bx = np.nonzero(leaf)
        if len(by) == 0:
            continue
        cnt, mean, var = stats[s]
        start = len(rect_list)
        for k, (y, x) in enumerate(zip(by, bx)):
            u0, v0 = x * s, y * s
            rect_list.append((u0, v0, min(s, W - u0), min(s, H - v0)))
            block = owner[v0:v0 + s, u0:u0 + s]
            block[mp[v0:v0 + s, u0:u0 + s]] = start + k
        dmean.append(mean[by, bx])
        dvar.append(var[by, bx])
        counts.append(cnt[by, bx])
        centroid.append(np.stack([su[s][by, bx] / cnt[by, bx], sv[s][by, bx] / cnt[by, bx],
                                  np.full(len(by), float(s))], axis=1))

    intr = frame.intrinsics
    if not rect_list:
        return QuadLeaves(np.zeros((0, 4), int), np.zeros(0), np.zeros(0), np.zeros(0, int),
                          np.zeros((0, 3)), np.zeros(0), owner[:H, :W])
    dmean = np.concatenate(dmean)
    cen = np.concatenate(centroid)
    side_mm = cen[:, 2] * dmean / intr.fx
    base = backproject(cen[:, 0], cen[:, 1], dmean, intr)
    ray = base / np.linalg.norm(base, axis=1, keepdims=True)
    means = base + displacement * side_mm[:, None] * ray
    return QuadLeaves(np.array(rect_list, dtype=int), dmean, np.concatenate(dvar),
                      np.concatenate(counts).astype(int), means, side_mm / 2.0, owner[:H, :W])


def attach_labels(leaves: QuadLeaves, histograms: np.ndarray) -> QuadLeaves:
    """Sum per-pixel class histograms over each leaf; ties go to the lower class index."""
    hist = np.asarray(histograms, dtype=float)
    if hist.shape[:2] != leaves.owner.shape:
        raise InvalidInputError("histogram image does not match the depth frame")
    own = leaves.owner.ravel()
    sel = own >= 0
    flat = hist.reshape(-1, hist.shape[2])[sel]
    n = len(leaves)
    sums = np.zeros((n, hist.shape[2]))
    for c in range(hist.shape[2]):
        sums[:, c] = np.bincount(own[sel], weights=flat[:, c], minlength=n)
    total = sums.sum(1)
    labels = np.argmax(sums, axis=1)
    probs = np.where(total > 0, sums[np.arange(n), labels] / np.where(total > 0, total, 1), 0.0)
    leaves.labels = labels.astype(np.int64)
    leaves.probs = probs
    return leaves


def data_mixtures(leaves: QuadLeaves) -> tuple[GaussianMixture, GaussianMixture]:
    """Split labelled leaves into the hand and object data mixtures (unit weights).

    Leaves whose dominant class is background are dropped.
    """
    keep = leaves.labels != BACKGROUND
    obj = keep & (leaves.labels == OBJECT)
    hand = keep & ~obj

    def mix(sel):
        return GaussianMixture(leaves.means[sel], leaves.sigmas[sel], np.ones(sel.sum()),
                               leaves.labels[sel], leaves.probs[sel])

    return mix(hand), mix(obj)


def one_hot_histograms(labels: np.ndarray, n_classes: int = N_LABELS) -> np.ndarray:
    return np.eye(n_classes)[np.asarray(labels)]
