"""Adapter for third-party benchmark annotations.

The benchmark's published layout is one whitespace-separated text row per
annotated frame: the frame index, then u v d triples (pixel column, pixel row,
depth in mm) for the five fingertips in thumb-to-little order followed by three
cuboid corners. Unannotated (occluded) points are written as ``-1 -1 -1`` or
carry a zero depth. Pixel coordinates need the sequence intrinsics to become
3D points, so they travel in a leading ``# intrinsics fx fy cx cy`` comment.

All field mapping for that layout lives in this file.
"""

from __future__ import annotations

import numpy as np

from .depth import Intrinsics, backproject
from .evaluation import N_LANDMARKS, AnnotationParseError, AnnotationSet


def parse_external_annotations(text: str, path="<external>", intrinsics: Intrinsics | None = None) -> AnnotationSet:
    frames, positions, visible = [], [], []
    intr = intrinsics
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "#":
            if len(parts) == 6 and parts[1] == "intrinsics":
                try:
                    fx, fy, cx, cy = (float(x) for x in parts[2:])
                except ValueError:
                    raise AnnotationParseError(path, lineno, "bad intrinsics comment") from None
                intr = Intrinsics(fx, fy, cx, cy, 1, 1)
            continue
        if intr is None:
            raise AnnotationParseError(path, lineno, "intrinsics must precede the first record")
        if len(parts) != 1 + 3 * N_LANDMARKS:
            raise AnnotationParseError(path, lineno, f"expected {1 + 3 * N_LANDMARKS} fields, found {len(parts)}")
        try:
            frame = int(parts[0])
            uvd = np.array([float(x) for x in parts[1:]]).reshape(N_LANDMARKS, 3)
        except ValueError as exc:
            raise AnnotationParseError(path, lineno, str(exc)) from None
        if frames and frame <= frames[-1]:
            raise AnnotationParseError(path, lineno, "frame indices must be strictly increasing")
        vis = (uvd[:, 2] > 0) & (uvd[:, 0] >= 0) & (uvd[:, 1] >= 0)
        pos = np.full((N_LANDMARKS, 3), np.nan)
        if vis.any():
            pos[vis] = backproject(uvd[vis, 0], uvd[vis, 1], uvd[vis, 2], intr)
        frames.append(frame)
        positions.append(pos)
        visible.append(vis)
    if not frames:
        raise AnnotationParseError(path, 1, "no annotation records")
    return AnnotationSet(np.array(frames), np.array(positions), np.array(visible))
