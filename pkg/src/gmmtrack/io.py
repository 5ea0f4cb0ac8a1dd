"""On-disk formats: depth/colour PNGs, intrinsics, sequence manifests, trajectories."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .depth import ColorFrame, DepthFrame, Intrinsics
from .errors import InvalidInputError
from .kinematics import N_POSE

MANIFEST_SCHEMA = "gmmtrack-sequence"


def write_depth_png(path, depth_mm: np.ndarray):
    d = np.clip(np.rint(np.asarray(depth_mm, float)), 0, 65535).astype(np.uint16)
    Image.fromarray(d).save(path)


def read_depth_png(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise InvalidInputError(f"{path}: depth image must be single channel")
    return arr.astype(np.float64)


def write_color_png(path, rgb: np.ndarray):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)


def read_color_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def write_intrinsics(path, intr: Intrinsics):
    Path(path).write_text(json.dumps(intr.to_dict(), indent=2))


def read_intrinsics(path) -> Intrinsics:
    try:
        d = json.loads(Path(path).read_text())
        return Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                          int(d["width"]), int(d["height"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise InvalidInputError(f"{path}: bad intrinsics file ({exc})") from None


@dataclass
class SequenceManifest:
    """Ordered list of registered (colour, depth) frame files with shared intrinsics."""

    root: Path
    intrinsics: Intrinsics
    frames: list[tuple[str, str]]
    timestamps: list[float]
    annotations: str | None = None
    init_pose: np.ndarray | None = None

    def __len__(self):
        return len(self.frames)

    def load(self, i: int) -> tuple[ColorFrame, DepthFrame]:
        c, d = self.frames[i]
        t = self.timestamps[i]
        return (ColorFrame(read_color_png(self.root / c), t),
                DepthFrame(read_depth_png(self.root / d), self.intrinsics, t))

    def __iter__(self):
        return (self.load(i) for i in range(len(self)))

    def save(self, path):
        doc = {"schema": MANIFEST_SCHEMA, "version": 1, "intrinsics": self.intrinsics.to_dict(),
               "frames": [{"color": c, "depth": d, "timestamp": t}
                          for (c, d), t in zip(self.frames, self.timestamps)]}
        if self.annotations:
            doc["annotations"] = self.annotations
        if self.init_pose is not None:
            doc["init_pose"] = [float(x) for x in self.init_pose]
        Path(path).write_text(json.dumps(doc, indent=1))


def load_manifest(path) -> SequenceManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: {exc}") from None
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise InvalidInputError(f"{path}: not a sequence manifest")
    try:
        i = doc["intrinsics"]
        intr = Intrinsics(float(i["fx"]), float(i["fy"]), float(i["cx"]), float(i["cy"]),
                          int(i["width"]), int(i["height"]))
        frames = [(f["color"], f["depth"]) for f in doc["frames"]]
        stamps = [float(f.get("timestamp", k)) for k, f in enumerate(doc["frames"])]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"{path}: malformed manifest ({exc})") from None
    init = doc.get("init_pose")
    if init is not None and len(init) != N_POSE:
        raise InvalidInputError(f"{path}: init_pose must hold {N_POSE} values")
    return SequenceManifest(path.parent, intr, frames, stamps, doc.get("annotations"),
                            None if init is None else np.asarray(init, float))


def write_trajectory(path, poses: np.ndarray, landmarks: np.ndarray | None = None, frames=None):
    """CSV with one row per frame: 32 pose entries, then optional landmark coordinates."""
    poses = np.asarray(poses, float)
    frames = np.arange(len(poses)) if frames is None else frames
    header = ["frame"] + [f"x{i}" for i in range(N_POSE)]
    if landmarks is not None:
        landmarks = np.asarray(landmarks, float)
        header += [f"l{j}_{c}" for j in range(landmarks.shape[1]) for c in "xyz"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, f in enumerate(frames):
            row = [int(f)] + [repr(float(x)) for x in poses[k]]
            if landmarks is not None:
                row += [repr(float(x)) for x in landmarks[k].ravel()]
            w.writerow(row)


def read_trajectory(path):
    """Returns (frames, poses, landmarks or None)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["frame"]:
        raise InvalidInputError(f"{path}: missing trajectory header")
    header = rows[0]
    n_lm = (len(header) - 1 - N_POSE) // 3
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:]]).reshape(-1, len(header))
    except ValueError as exc:
        raise InvalidInputError(f"{path}: {exc}") from None
    frames = data[:, 0].astype(np.int64)
    poses = data[:, 1:1 + N_POSE]
    lms = data[:, 1 + N_POSE:].reshape(len(data), n_lm, 3) if n_lm else None
    return frames, poses, lms
