"""Landmark error with occlusion-aware exclusion, consistency curves and annotation files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

N_FINGERTIPS = 5
N_OBJECT_LANDMARKS = 3
N_LANDMARKS = N_FINGERTIPS + N_OBJECT_LANDMARKS
LANDMARK_NAMES = ("thumb", "index", "middle", "ring", "little", "corner0", "corner1", "corner2")


class AnnotationParseError(InvalidInputError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass
class AnnotationSet:
    frames: np.ndarray  # (T,) strictly increasing frame indices
    positions: np.ndarray  # (T, 8, 3) mm; rows of invisible landmarks are ignored
    visible: np.ndarray  # (T, 8) bool

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=float)
        self.visible = np.asarray(self.visible, dtype=bool)
        T = len(self.frames)
        if self.positions.shape != (T, N_LANDMARKS, 3) or self.visible.shape != (T, N_LANDMARKS):
            raise InvalidInputError("annotations need (T, 8, 3) positions and (T, 8) visibility")
        if T > 1 and np.any(np.diff(self.frames) <= 0):
            raise InvalidInputError("annotation frame indices must be strictly increasing")
        if not np.all(np.isfinite(self.positions[self.visible])):
            raise InvalidInputError("visible landmarks need finite positions")

    def __len__(self):
        return len(self.frames)

    @classmethod
    def all_visible(cls, positions, frames=None) -> "AnnotationSet":
        positions = np.asarray(positions, float)
        frames = np.arange(len(positions)) if frames is None else frames
        return cls(frames, positions, np.ones(positions.shape[:2], dtype=bool))


@dataclass
class ErrorReport:
    combined: float
    fingertips: float
    object: float
    per_frame: np.ndarray  # combined error per aligned frame, NaN when nothing is visible
    per_frame_fingertips: np.ndarray
    per_frame_object: np.ndarray
    frames: np.ndarray

    def as_dict(self) -> dict:
        return {"E_combined": self.combined, "E_fingertips": self.fingertips, "E_object": self.object,
                "frames": int(len(self.frames))}


def _frame_means(dist: np.ndarray, vis: np.ndarray) -> np.ndarray:
    n = vis.sum(axis=1)
    total = np.where(vis, dist, 0.0).sum(axis=1)
    return np.where(n > 0, total / np.maximum(n, 1), np.nan)


def _sequence_mean(per_frame: np.ndarray) -> float:
    ok = np.isfinite(per_frame)
    return float(per_frame[ok].mean()) if ok.any() else float("nan")


def average_error(predicted, truth: AnnotationSet, predicted_frames=None) -> ErrorReport:
    """Mean Euclidean landmark error over visible landmarks, then over frames.

    ``predicted`` is (T, 8, 3); frames are matched by index when
    ``predicted_frames`` is given, otherwise positionally from frame 0.
    """
    pred = np.asarray(predicted, dtype=float)
    if pred.ndim != 3 or pred.shape[1:] != (N_LANDMARKS, 3):
        raise InvalidInputError("predictions must be (T, 8, 3)")
    pf = np.arange(len(pred)) if predicted_frames is None else np.asarray(predicted_frames, np.int64)
    common, ip, it = np.intersect1d(pf, truth.frames, return_indices=True)
    if len(common) == 0:
        raise InvalidInputError("predictions and annotations share no frames")
    p, t, vis = pred[ip], truth.positions[it], truth.visible[it]
    dist = np.linalg.norm(p - t, axis=-1)
    dist = np.where(vis, dist, 0.0)
    tips, obj = slice(0, N_FINGERTIPS), slice(N_FINGERTIPS, N_LANDMARKS)
    per_all = _frame_means(dist, vis)
    per_tip = _frame_means(dist[:, tips], vis[:, tips])
    per_obj = _frame_means(dist[:, obj], vis[:, obj])
    return ErrorReport(_sequence_mean(per_all), _sequence_mean(per_tip), _sequence_mean(per_obj),
                       per_all, per_tip, per_obj, common)


def consistency_curve(errors, thresholds=None) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of frames whose error is strictly below each threshold (default 0..50 mm)."""
    e = np.asarray(errors, dtype=float)
    e = e[np.isfinite(e)]
    th = np.arange(0.0, 51.0) if thresholds is None else np.asarray(thresholds, dtype=float)
    if len(e) == 0:
        return th, np.zeros(len(th))
    frac = (e[None, :] < th[:, None]).mean(axis=1)
    return th, frac


# --- files ------------------------------------------------------------------------------

_HEADER = ["frame"] + [f"{n}_{c}" for n in LANDMARK_NAMES for c in ("x", "y", "z", "vis")]


def write_annotations(path, ann: AnnotationSet):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_HEADER)
        for f, pos, vis in zip(ann.frames, ann.positions, ann.visible):
            row = [int(f)]
            for p, v in zip(pos, vis):
                row += [repr(float(x)) for x in p] + [int(v)]
            w.writerow(row)


def _parse_native(text: str, path) -> AnnotationSet:
    reader = csv.reader(io.StringIO(text))
    frames, positions, visible = [], [], []
    header_seen = False
    for lineno, row in enumerate(reader, 1):
        if not row or row[0].startswith("#"):
            continue
        if not header_seen:
            if [c.strip() for c in row] != _HEADER:
                raise AnnotationParseError(path, lineno, "header does not match the native annotation schema")
            header_seen = True
            continue
        if len(row) != len(_HEADER):
            raise AnnotationParseError(path, lineno, f"expected {len(_HEADER)} fields, found {len(row)}")
        try:
            frame = int(row[0])
            vals = np.array([float(x) for x in row[1:]]).reshape(N_LANDMARKS, 4)
        except ValueError as exc:
            raise AnnotationParseError(path, lineno, str(exc)) from None
        if not np.all(np.isin(vals[:, 3], (0.0, 1.0))):
            raise AnnotationParseError(path, lineno, "visibility flags must be 0 or 1")
        if frames and frame <= frames[-1]:
            raise AnnotationParseError(path, lineno, "frame indices must be strictly increasing")
        vis = vals[:, 3] == 1.0
        if not np.all(np.isfinite(vals[vis, :3])):
            raise AnnotationParseError(path, lineno, "visible landmark with non-finite position")
        frames.append(frame)
        positions.append(vals[:, :3])
        visible.append(vis)
    if not header_seen:
        raise AnnotationParseError(path, 1, "empty annotation file")
    return AnnotationSet(np.array(frames, np.int64), np.array(positions).reshape(-1, N_LANDMARKS, 3),
                         np.array(visible, bool).reshape(-1, N_LANDMARKS))


def load_annotations(path, format: str = "native") -> AnnotationSet:
    """Read an annotation file; ``format`` is ``"native"`` or ``"external"``."""
    path = Path(path)
    text = path.read_text()
    if format == "native":
        return _parse_native(text, path)
    if format == "external":
        from .external import parse_external_annotations

        return parse_external_annotations(text, path)
    raise InvalidInputError(f"unknown annotation format {format!r}")


def write_error_csv(path, report: ErrorReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "error_combined", "error_fingertips", "error_object"])
        for row in zip(report.frames, report.per_frame, report.per_frame_fingertips, report.per_frame_object):
            w.writerow([int(row[0])] + [f"{x:.6f}" for x in row[1:]])


def write_curve_csv(path, thresholds, fractions):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold_mm", "fraction"])
        for t, f in zip(thresholds, fractions):
            w.writerow([f"{t:g}", f"{f:.6f}"])
