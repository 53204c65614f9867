"""Render the structure-control image and the face mask for one face.

The structure image is the geometry-only conditioning channel: colored
1-px polylines of the 68 landmarks on black, one palette color per facial
group. The face mask is the filled face polygon used by compositing and
the background-preservation metric.
"""

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from makeupdiff import render_face, render_structure_image
from makeupdiff.structure import face_mask_from_keypoints

out = Path(tempfile.mkdtemp(prefix="makeupdiff_demo_"))
face = render_face(seed=3, size=64)

structure = render_structure_image(face.keypoints, 64)
mask = face_mask_from_keypoints(face.keypoints, 64)

for name, img in [("face", face.image), ("structure", structure.image),
                  ("mask", np.stack([mask] * 3, axis=-1).astype(float))]:
    arr = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(out / f"{name}.png")

lit = (structure.image.sum(axis=2) > 0).mean()
print(f"wrote face/structure/mask PNGs to {out}")
print(f"structure image is {lit:.1%} lit, rest is black background")
print(f"face mask covers {mask.mean():.1%} of the frame")
print("groups drawn:", sorted(face.keypoints.groups))
