"""Facial keypoint sets, structure control images, and keypoint-derived face masks.

The structure control image encodes face geometry as thin colored polylines,
one fixed color per landmark group, rendered on black. It is the geometry
conditioning channel for the structural control encoder, and the same
keypoint machinery produces the face masks used by compositing and metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

# Landmark group vocabulary, 68 points total (standard topology).
GROUP_SLICES: dict[str, tuple[int, int]] = {
    "jaw": (0, 17),
    "left_brow": (17, 22),
    "right_brow": (22, 27),
    "nose": (27, 36),
    "left_eye": (36, 42),
    "right_eye": (42, 48),
    "mouth_outer": (48, 60),
    "mouth_inner": (60, 68),
}

# Closed polylines for ring-like groups, open chains for the rest.
CLOSED_GROUPS = frozenset({"jaw", "left_eye", "right_eye", "mouth_outer", "mouth_inner"})

# Fixed palette of 8 saturated hues, RGB in [0,1]. Distinct by construction.
PALETTE: dict[str, tuple[float, float, float]] = {
    "jaw": (1.0, 0.0, 0.0),
    "left_brow": (0.0, 1.0, 0.0),
    "right_brow": (0.0, 0.0, 1.0),
    "nose": (0.0, 1.0, 1.0),
    "left_eye": (1.0, 1.0, 0.0),
    "right_eye": (1.0, 0.0, 1.0),
    "mouth_outer": (1.0, 0.5, 0.0),
    "mouth_inner": (0.5, 0.0, 1.0),
}


@dataclass
class KeypointSet:
    """Ordered 2D landmarks with named group index ranges.

    points: (N, 2) float array of (x, y) pixel coordinates.
    groups: group label -> (start, stop) index range into ``points``.
    """

    points: np.ndarray
    groups: dict[str, tuple[int, int]] = field(default_factory=lambda: dict(GROUP_SLICES))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("keypoint coordinates must be finite")
        covered = sorted(i for a, b in self.groups.values() for i in range(a, b))
        if covered != list(range(len(self.points))):
            raise ValueError("group index ranges must partition the point list")

    def group_points(self, label: str) -> np.ndarray:
        a, b = self.groups[label]
        return self.points[a:b]

    def transformed(self, matrix: np.ndarray) -> "KeypointSet":
        """Apply a 2x3 affine matrix to all points."""
        m = np.asarray(matrix, dtype=np.float64)
        pts = self.points @ m[:, :2].T + m[:, 2]
        return KeypointSet(pts, dict(self.groups))

    def to_jsonable(self) -> dict:
        return {
            "points": [[float(x), float(y)] for x, y in self.points],
            "groups": {k: [int(a), int(b)] for k, (a, b) in self.groups.items()},
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "KeypointSet":
        return cls(
            np.asarray(obj["points"], dtype=np.float64),
            {k: (int(a), int(b)) for k, (a, b) in obj["groups"].items()},
        )


@dataclass
class StructureImage:
    """Rendered geometry conditioning image plus the palette used."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    palette: dict[str, tuple[float, float, float]]


def render_structure_image(kp: KeypointSet, size: int) -> StructureImage:
    """Render landmark groups as 1-px colored polylines on black.

    Ring-like groups (jaw, eyes, mouth) draw closed; brows and nose draw
    open. Deterministic: fixed palette, fixed draw order.
    """
    pts = kp.points
    if len(pts) and (pts.min() < 0 or pts.max() >= size):
        raise ValueError(f"keypoints must lie within [0, {size})")
    canvas = np.zeros((size, size, 3), dtype=np.uint8)
    for label in kp.groups:
        gp = kp.group_points(label)
        if len(gp) < 2:
            continue
        color = PALETTE.get(label, (1.0, 1.0, 1.0))
        bgr = tuple(int(round(c * 255)) for c in reversed(color))
        poly = np.round(gp).astype(np.int32).reshape(-1, 1, 2)
        cv2.polylines(canvas, [poly], label in CLOSED_GROUPS, bgr, 1, cv2.LINE_8)
    rgb = canvas[:, :, ::-1].astype(np.float32) / 255.0
    return StructureImage(rgb, dict(PALETTE))


def face_polygon(kp: KeypointSet) -> np.ndarray:
    """Face outline: jaw chain closed across the brow line."""
    jaw = kp.group_points("jaw")
    chain = [jaw]
    if "right_brow" in kp.groups:
        chain.append(kp.group_points("right_brow")[::-1])
    if "left_brow" in kp.groups:
        chain.append(kp.group_points("left_brow")[::-1])
    return np.concatenate(chain, axis=0)


def face_mask_from_keypoints(kp: KeypointSet, size: int) -> np.ndarray:
    """Fill the face polygon (jaw closed over the brows) as a 0/1 uint8 raster."""
    if "jaw" not in kp.groups:
        raise ValueError("keypoint set has no jaw group")
    poly = np.round(face_polygon(kp)).astype(np.int32).reshape(-1, 1, 2)
    mask = np.zeros((size, size), dtype=np.uint8)
    cv2.fillPoly(mask, [poly], 1)
    return mask
