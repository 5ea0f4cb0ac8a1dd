"""Object segmentation by colour, viewpoint selection and two-layer per-pixel forests."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from matplotlib.colors import rgb_to_hsv

from .depth import ColorFrame, DepthFrame
from .errors import InvalidInputError
from .kinematics import HAND_R, KinematicModel, check_pose, exp_so3, forward_kinematics
from .scene import BACKGROUND, N_LABELS, OBJECT

BACKGROUND_DEPTH = 10000.0  # value read by probes that leave the image or hit no measurement

# layer-1 classes
HAND, ARM, LAYER1_BACKGROUND = 0, 1, 2
N_LAYER1 = 3
# layer-2 classes: the six hand-part scene labels then background
N_LAYER2 = 7
LAYER2_BACKGROUND = 6

VIEWPOINTS = ("front", "back", "thumb", "little")
# canonical direction of each viewpoint in the palm (root) frame
_VIEW_AXES = np.array([[0, 0, -1], [0, 0, 1], [1, 0, 0], [-1, 0, 0]], dtype=float)

UNARY, BINARY = 0, 1
LEAF = -1


# --- colour segmentation ------------------------------------------------------


@dataclass(frozen=True)
class HsvRange:
    """Hue in degrees (lo > hi wraps through 0), saturation and value in [0, 1]."""

    hue: tuple[float, float]
    saturation: tuple[float, float] = (0.0, 1.0)
    value: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        s0, s1 = self.saturation
        v0, v1 = self.value
        if not (0 <= s0 <= s1 <= 1 and 0 <= v0 <= v1 <= 1):
            raise InvalidInputError("saturation/value intervals must be non-empty within [0, 1]")
        h0, h1 = (h % 360.0 for h in self.hue)
        object.__setattr__(self, "hue", (h0, h1))

    def contains(self, hsv: np.ndarray) -> np.ndarray:
        h = hsv[..., 0] * 360.0
        h0, h1 = self.hue
        hue_ok = (h >= h0) & (h <= h1) if h0 <= h1 else (h >= h0) | (h <= h1)
        s, v = hsv[..., 1], hsv[..., 2]
        return (hue_ok & (s >= self.saturation[0]) & (s <= self.saturation[1])
                & (v >= self.value[0]) & (v <= self.value[1]))


def segment_object_hsv(color: ColorFrame, depth: DepthFrame, hsv_range: HsvRange):
    """Object mask from colour and the depth map with object pixels invalidated."""
    if color.shape != depth.shape:
        raise InvalidInputError("colour and depth frames are not congruent")
    # colour is only consulted where depth exists
    valid = depth.valid
    mask = np.zeros(depth.shape, dtype=bool)
    if valid.any():
        hsv = rgb_to_hsv(color.rgb[valid].astype(np.float64) / 255.0)
        mask[valid] = hsv_range.contains(hsv)
    hat = np.where(mask, 0.0, depth.depth)
    return mask, DepthFrame(hat, depth.intrinsics, depth.timestamp)


# --- depth-difference features -------------------------------------------------


def _probe(depth: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = depth.shape
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    out = np.full(u.shape, BACKGROUND_DEPTH)
    val = depth[v[inside], u[inside]].astype(np.float64)
    out[inside] = np.where(val > 0, val, BACKGROUND_DEPTH)
    return out


def feature_values(depth: np.ndarray, u, v, d, offsets: np.ndarray, kinds: np.ndarray,
                   scale: float = 1.0) -> np.ndarray:
    """Vectorised features; ``offsets`` are (n, 4) pixel-metres, one row per pixel."""
    k = scale * 1000.0 / np.where(d > 0, d, np.inf)
    p1 = _probe(depth, u + np.rint(offsets[:, 0] * k).astype(np.int64),
                v + np.rint(offsets[:, 1] * k).astype(np.int64))
    p2 = _probe(depth, u + np.rint(offsets[:, 2] * k).astype(np.int64),
                v + np.rint(offsets[:, 3] * k).astype(np.int64))
    return np.where(kinds == UNARY, p1 - d, p1 - p2)


def depth_difference_feature(depth: np.ndarray, pixel, offsets, kind: str = "unary",
                             scale: float = 1.0) -> float:
    """Single depth-difference feature at ``pixel = (u, v)``.

    Offsets are in pixel-metres and get divided by the centre depth in metres.
    Returns NaN when the centre pixel has no depth.
    """
    depth = np.asarray(depth)
    u, v = int(pixel[0]), int(pixel[1])
    d = float(depth[v, u])
    if d <= 0:
        return float("nan")
    off = np.zeros(4)
    flat = np.asarray(offsets, dtype=float).ravel()
    off[:len(flat)] = flat
    kinds = np.array([UNARY if kind == "unary" else BINARY])
    return float(feature_values(depth, np.array([u]), np.array([v]), np.array([d]), off[None], kinds,
                                scale)[0])


# --- forests --------------------------------------------------------------------


@dataclass
class Tree:
    kind: np.ndarray  # int8, LEAF for leaves
    offsets: np.ndarray  # float32 (n, 4)
    threshold: np.ndarray  # float32
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    hist: np.ndarray  # float32 (n, C); rows of internal nodes are unused

    def __len__(self):
        return len(self.kind)

    def depth(self) -> int:
        depth = np.zeros(len(self), dtype=int)
        for i in range(len(self)):
            if self.kind[i] != LEAF:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())


@dataclass
class DecisionForest:
    trees: list[Tree]
    n_classes: int
    max_depth: int
    focal: float  # focal length (px) of the training images; offsets scale with it
    layer: int = 1
    viewpoint: str | None = None
    _packed: tuple = field(default=None, repr=False, compare=False)

    def predict_proba(self, depth: np.ndarray, u: np.ndarray, v: np.ndarray, focal: float | None = None,
                      ) -> np.ndarray:
        """Average leaf histogram over trees for pixels (u, v) with valid depth."""
        u = np.ascontiguousarray(u, dtype=np.int64)
        v = np.ascontiguousarray(v, dtype=np.int64)
        scale = 1.0 if focal is None else focal / self.focal
        if self._packed is None:
            self._packed = _pack(self.trees)
        kind, off, thr, left, right, hist, roots = self._packed
        out = _predict_nb(np.ascontiguousarray(depth, dtype=np.float64), u, v, float(scale), kind, off, thr,
                          left, right, hist, roots)
        return out / len(self.trees)

    def predict_proba_reference(self, depth, u, v, focal=None) -> np.ndarray:
        """Vectorised numpy traversal; same result as :meth:`predict_proba`."""
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        d = depth[v, u].astype(np.float64)
        scale = 1.0 if focal is None else focal / self.focal
        out = np.zeros((len(u), self.n_classes))
        for tree in self.trees:
            node = np.zeros(len(u), dtype=np.int64)
            active = np.flatnonzero(tree.kind[node] != LEAF)
            while len(active):
                nd = node[active]
                f = feature_values(depth, u[active], v[active], d[active], tree.offsets[nd],
                                   tree.kind[nd], scale)
                go_left = f < tree.threshold[nd]
                node[active] = np.where(go_left, tree.left[nd], tree.right[nd])
                active = active[tree.kind[node[active]] != LEAF]
            out += tree.hist[node]
        return out / len(self.trees)

    def save(self, path):
        Path(path).write_bytes(serialize_forest(self))

    @classmethod
    def load(cls, path) -> "DecisionForest":
        return deserialize_forest(Path(path).read_bytes())


def _pack(trees: list[Tree]):
    """Concatenate trees into flat arrays with child indices rebased."""
    sizes = [len(t) for t in trees]
    roots = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    left = np.concatenate([np.where(t.left >= 0, t.left + r, -1) for t, r in zip(trees, roots)])
    right = np.concatenate([np.where(t.right >= 0, t.right + r, -1) for t, r in zip(trees, roots)])
    return (np.concatenate([t.kind for t in trees]).astype(np.int64),
            np.concatenate([t.offsets for t in trees]).astype(np.float64),
            np.concatenate([t.threshold for t in trees]).astype(np.float64),
            left.astype(np.int64), right.astype(np.int64),
            np.concatenate([t.hist for t in trees]).astype(np.float64), roots)


@numba.njit(cache=True)
def _probe_f(img, u, v):
    h, w = img.shape
    if u < 0 or u >= w or v < 0 or v >= h:
        return BACKGROUND_DEPTH
    val = img[v, u]
    if val <= 0:
        return BACKGROUND_DEPTH
    return val


@numba.njit(cache=True)
def _predict_nb(depth, us, vs, scale, kind, off, thr, left, right, hist, roots):
    n = len(us)
    out = np.zeros((n, hist.shape[1]))
    for i in range(n):
        u, v = us[i], vs[i]
        d = depth[v, u]
        k = scale * 1000.0 / d if d > 0 else 0.0
        for r in roots:
            node = r
            while kind[node] != LEAF:
                p1 = _probe_f(depth, u + int(np.rint(off[node, 0] * k)), v + int(np.rint(off[node, 1] * k)))
                if kind[node] == UNARY:
                    f = p1 - d
                else:
                    f = p1 - _probe_f(depth, u + int(np.rint(off[node, 2] * k)),
                                      v + int(np.rint(off[node, 3] * k)))
                node = left[node] if f < thr[node] else right[node]
            out[i] += hist[node]
    return out


@dataclass
class TrainingSet:
    """Depth images (object pixels already removed) with per-pixel class ids.

    ``labels`` uses 255 for pixels that must not be sampled.
    """

    depth: np.ndarray  # (N, H, W) uint16 mm
    labels: np.ndarray  # (N, H, W) uint8
    focal: float

    def __len__(self):
        return len(self.depth)


@dataclass(frozen=True)
class ForestParams:
    trees: int = 3
    pixels_per_image: int = 2000
    candidate_offsets: int = 100
    thresholds: int = 40
    max_depth: int = 19
    min_gain: float = 1e-4
    offset_range: float = 60.0  # pixel-metres
    min_samples_split: int = 2


@numba.njit(cache=True)
def _probe_nb(img, u, v):
    h, w = img.shape
    if u < 0 or u >= w or v < 0 or v >= h:
        return BACKGROUND_DEPTH
    val = img[v, u]
    if val == 0:
        return BACKGROUND_DEPTH
    return float(val)


@numba.njit(cache=True)
def _feature_nb(images, s_img, s_u, s_v, s_d, off, kind):
    img = images[s_img]
    k = 1000.0 / s_d
    p1 = _probe_nb(img, s_u + int(np.rint(off[0] * k)), s_v + int(np.rint(off[1] * k)))
    if kind == 0:
        return p1 - s_d
    p2 = _probe_nb(img, s_u + int(np.rint(off[2] * k)), s_v + int(np.rint(off[3] * k)))
    return p1 - p2


@numba.njit(cache=True)
def _entropy(counts, total):
    h = 0.0
    if total <= 0:
        return 0.0
    for c in counts:
        if c > 0:
            p = c / total
            h -= p * np.log(p)
    return h


@numba.njit(cache=True)
def _best_split(images, s_img, s_u, s_v, s_d, s_y, idx, start, end, offsets, kinds, thr_unit,
                n_classes):
    n = end - start
    n_feat, n_thr = thr_unit.shape
    vals = np.empty(n)
    parent = np.zeros(n_classes)
    for i in range(start, end):
        parent[s_y[idx[i]]] += 1
    h_parent = _entropy(parent, n)
    best_gain, best_f, best_t = -1.0, -1, 0.0
    hist = np.zeros((n_thr + 1, n_classes))
    left = np.zeros(n_classes)
    right = np.zeros(n_classes)
    thr = np.empty(n_thr)
    for f in range(n_feat):
        lo, hi = np.inf, -np.inf
        for i in range(n):
            s = idx[start + i]
            x = _feature_nb(images, s_img[s], s_u[s], s_v[s], s_d[s], offsets[f], kinds[f])
            vals[i] = x
            lo = min(lo, x)
            hi = max(hi, x)
        if hi <= lo:
            continue
        for t in range(n_thr):
            thr[t] = lo + thr_unit[f, t] * (hi - lo)
        thr.sort()
        hist[:, :] = 0.0
        for i in range(n):
            # bin b = number of thresholds <= value; value goes left of threshold t iff b <= t
            b = np.searchsorted(thr, vals[i], side="right")
            hist[b, s_y[idx[start + i]]] += 1
        left[:] = 0.0
        for t in range(n_thr):
            left += hist[t]
            nl = left.sum()
            nr = n - nl
            if nl == 0 or nr == 0:
                continue
            right[:] = parent - left
            gain = h_parent - (nl / n) * _entropy(left, nl) - (nr / n) * _entropy(right, nr)
            if gain > best_gain:
                best_gain, best_f, best_t = gain, f, thr[t]
    return best_f, best_t, best_gain


@numba.njit(cache=True)
def _partition(images, s_img, s_u, s_v, s_d, idx, start, end, off, kind, threshold):
    """Stable in-place partition of idx[start:end]; returns the split point."""
    n = end - start
    buf = np.empty(n, dtype=idx.dtype)
    go_left = np.empty(n, dtype=np.bool_)
    nl = 0
    for i in range(n):
        s = idx[start + i]
        go_left[i] = _feature_nb(images, s_img[s], s_u[s], s_v[s], s_d[s], off, kind) < threshold
        if go_left[i]:
            nl += 1
    a, b = 0, nl
    for i in range(n):
        if go_left[i]:
            buf[a] = idx[start + i]
            a += 1
        else:
            buf[b] = idx[start + i]
            b += 1
    idx[start:end] = buf
    return start + nl


def _sample_pixels(ts: TrainingSet, images: np.ndarray, per_image: int, rng: np.random.Generator):
    s_img, s_u, s_v, s_y = [], [], [], []
    for i in images:
        lab = ts.labels[i]
        vv, uu = np.nonzero((lab != 255) & (ts.depth[i] > 0))
        if len(vv) == 0:
            continue
        pick = rng.choice(len(vv), size=min(per_image, len(vv)), replace=False)
        pick.sort()
        s_img.append(np.full(len(pick), i, dtype=np.int64))
        s_u.append(uu[pick])
        s_v.append(vv[pick])
        s_y.append(lab[vv[pick], uu[pick]].astype(np.int64))
    if not s_img:
        raise InvalidInputError("training subset holds no labelled pixels")
    s_img = np.concatenate(s_img)
    s_u = np.concatenate(s_u).astype(np.int64)
    s_v = np.concatenate(s_v).astype(np.int64)
    s_d = ts.depth[s_img, s_v, s_u].astype(np.float64)
    return s_img, s_u, s_v, s_d, np.concatenate(s_y)


def _train_tree(ts: TrainingSet, images, n_classes: int, params: ForestParams,
                rng: np.random.Generator) -> Tree:
    s_img, s_u, s_v, s_d, s_y = _sample_pixels(ts, images, params.pixels_per_image, rng)
    if s_y.max() >= n_classes:
        raise InvalidInputError("label id exceeds the forest class count")
    idx = np.arange(len(s_y), dtype=np.int64)
    kinds, offs, thrs, lefts, rights, hists = [], [], [], [], [], []

    def new_node():
        kinds.append(LEAF)
        offs.append(np.zeros(4, np.float32))
        thrs.append(0.0)
        lefts.append(-1)
        rights.append(-1)
        hists.append(np.zeros(n_classes, np.float32))
        return len(kinds) - 1

    stack = [(new_node(), 0, len(idx), 0)]
    while stack:
        node, start, end, depth = stack.pop()
        counts = np.bincount(s_y[idx[start:end]], minlength=n_classes).astype(np.float64)
        hists[node] = (counts / counts.sum()).astype(np.float32)
        if depth >= params.max_depth or end - start < params.min_samples_split or counts.max() == end - start:
            continue
        F = params.candidate_offsets
        off = rng.uniform(-params.offset_range, params.offset_range, size=(F, 4))
        kind = rng.integers(0, 2, size=F).astype(np.int64)
        off[kind == UNARY, 2:] = 0.0
        thr_unit = rng.uniform(0.0, 1.0, size=(F, params.thresholds))
        f, t, gain = _best_split(ts.depth, s_img, s_u, s_v, s_d, s_y, idx, start, end, off, kind,
                                 thr_unit, n_classes)
        if f < 0 or gain < params.min_gain:
            continue
        t32 = np.float32(t)
        off32 = off[f].astype(np.float32)
        # split with the float32 values that get stored, so inference matches training
        mid = _partition(ts.depth, s_img, s_u, s_v, s_d, idx, start, end, off32.astype(np.float64),
                         int(kind[f]), float(t32))
        if mid == start or mid == end:
            continue
        kinds[node] = int(kind[f])
        offs[node] = off32
        thrs[node] = t32
        lnode, rnode = new_node(), new_node()
        lefts[node], rights[node] = lnode, rnode
        stack.append((rnode, mid, end, depth + 1))
        stack.append((lnode, start, mid, depth + 1))
    return Tree(np.array(kinds, np.int8), np.array(offs, np.float32).reshape(-1, 4),
                np.array(thrs, np.float32), np.array(lefts, np.int32), np.array(rights, np.int32),
                np.array(hists, np.float32).reshape(-1, n_classes))


def train_forest(dataset: TrainingSet, n_classes: int, params: ForestParams = ForestParams(),
                 seed: int = 0, layer: int = 1, viewpoint: str | None = None) -> DecisionForest:
    """Greedy information-gain forest; each tree sees a disjoint random image subset."""
    if len(dataset) == 0:
        raise InvalidInputError("empty training set")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    subsets = np.array_split(order, params.trees) if len(dataset) >= params.trees else [order] * params.trees
    seeds = np.random.SeedSequence(seed).spawn(params.trees)
    trees = [_train_tree(dataset, np.sort(sub), n_classes, params, np.random.default_rng(s))
             for sub, s in zip(subsets, seeds)]
    return DecisionForest(trees, n_classes, params.max_depth, dataset.focal, layer, viewpoint)


# --- two-layer inference ----------------------------------------------------------


@dataclass
class ForestBank:
    """Layer-1 hand/arm forest and one layer-2 part forest per viewpoint."""

    layer1: DecisionForest
    layer2: dict[str, DecisionForest] = field(default_factory=dict)

    def for_viewpoint(self, viewpoint: str) -> DecisionForest:
        if viewpoint in self.layer2:
            return self.layer2[viewpoint]
        return self.layer2[sorted(self.layer2)[0]]

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.layer1.save(d / "layer1.forest")
        for vp, f in self.layer2.items():
            f.save(d / f"layer2_{vp}.forest")

    @classmethod
    def load(cls, directory) -> "ForestBank":
        d = Path(directory)
        if not (d / "layer1.forest").exists():
            raise FileNotFoundError(f"no layer1.forest in {d}")
        layer2 = {vp: DecisionForest.load(d / f"layer2_{vp}.forest")
                  for vp in VIEWPOINTS if (d / f"layer2_{vp}.forest").exists()}
        if not layer2:
            raise FileNotFoundError(f"no layer-2 forests in {d}")
        return cls(DecisionForest.load(d / "layer1.forest"), layer2)


def classify_pixels(layer1: DecisionForest, layer2: DecisionForest, depth: DepthFrame,
                    object_mask: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel 8-class histograms (H, W, 8) from the two-layer cascade."""
    H, W = depth.shape
    out = np.zeros((H, W, N_LABELS))
    out[..., BACKGROUND] = 1.0
    vv, uu = np.nonzero(depth.valid)
    if len(vv):
        fx = depth.intrinsics.fx
        p1 = layer1.predict_proba(depth.depth, uu, vv, fx)
        hand = np.argmax(p1, axis=1) == HAND
        if hand.any():
            p2 = layer2.predict_proba(depth.depth, uu[hand], vv[hand], fx)
            hist = np.zeros((len(p2), N_LABELS))
            hist[:, :LAYER2_BACKGROUND] = p2[:, :LAYER2_BACKGROUND]
            hist[:, BACKGROUND] = p2[:, LAYER2_BACKGROUND]
            out[vv[hand], uu[hand]] = hist
    if object_mask is not None:
        m = np.asarray(object_mask, dtype=bool)
        out[m] = 0.0
        out[m, OBJECT] = 1.0
    return out


def select_viewpoint(previous_pose, kinematic: KinematicModel) -> str:
    """Viewpoint whose palm-frame direction points most directly at the camera."""
    pose = check_pose(previous_pose)
    R = exp_so3(pose[HAND_R])
    wrist = forward_kinematics(kinematic, pose).bones[0][:3, 3]
    n = np.linalg.norm(wrist)
    to_camera = -wrist / n if n > 1e-9 else np.array([0.0, 0.0, -1.0])
    scores = (_VIEW_AXES @ R.T) @ to_camera
    return VIEWPOINTS[int(np.argmax(np.round(scores, 12)))]


# --- serialisation ------------------------------------------------------------------

_MAGIC = b"GMFR"
_VERSION = 1
_HEADER = struct.Struct("<4sHHHBBHd")


def serialize_forest(forest: DecisionForest) -> bytes:
    vp = 255 if forest.viewpoint is None else VIEWPOINTS.index(forest.viewpoint)
    parts = [_HEADER.pack(_MAGIC, _VERSION, forest.n_classes, len(forest.trees), forest.layer, vp,
                          forest.max_depth, float(forest.focal))]
    for t in forest.trees:
        parts.append(struct.pack("<I", len(t)))
        parts += [t.kind.astype("<i1").tobytes(), t.offsets.astype("<f4").tobytes(),
                  t.threshold.astype("<f4").tobytes(), t.left.astype("<i4").tobytes(),
                  t.right.astype("<i4").tobytes(), t.hist.astype("<f4").tobytes()]
    return b"".join(parts)


def deserialize_forest(buf: bytes) -> DecisionForest:
    if len(buf) < _HEADER.size:
        raise InvalidInputError("forest file truncated")
    magic, version, n_classes, n_trees, layer, vp, max_depth, focal = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC or version != _VERSION:
        raise InvalidInputError("not a forest file or unsupported version")
    pos = _HEADER.size
    trees = []

    def take(dtype, count):
        nonlocal pos
        a = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).copy()
        pos += a.nbytes
        return a

    try:
        for _ in range(n_trees):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            trees.append(Tree(take("<i1", n), take("<f4", 4 * n).reshape(n, 4), take("<f4", n),
                              take("<i4", n), take("<i4", n), take("<f4", n * n_classes).reshape(n, n_classes)))
    except (ValueError, struct.error) as exc:
        raise InvalidInputError("forest file truncated") from exc
    return DecisionForest(trees, n_classes, max_depth, focal, layer,
                          None if vp == 255 else VIEWPOINTS[vp])
