"""Tour of the evaluation metrics and the makeup-attention heatmaps.

Uses an untrained model, so the attention maps are near-uniform; after
training they concentrate on the makeup face tokens (the property the
evaluation suite measures as face-vs-background attention mass).
"""

import numpy as np

from makeupdiff import MakeupStyle, make_pair, render_structure_image
from makeupdiff.denoiser import DenoiserConfig
from makeupdiff.diffusion import DiffusionSchedule
from makeupdiff.encoder import BackboneConfig
from makeupdiff.metrics import (attention_face_mass, attention_maps,
                                embedding_similarity, l2m, ssim, toy_embedder)
from makeupdiff.model import MakeupTransferModel

style = MakeupStyle("demo", [("mouth_outer", (0.9, 0.1, 0.2), "fill", 1.0),
                             ("left_eye", (0.2, 0.2, 0.9), "gradient", 0.8),
                             ("right_eye", (0.2, 0.2, 0.9), "gradient", 0.8)])
pair = make_pair(7, 64, style)

print("SSIM(source, source):", ssim(pair.source.image, pair.source.image))
print("SSIM(source, target):", round(ssim(pair.source.image, pair.target_image), 4))
print("L2-M(target vs source):",
      round(l2m(pair.target_image, pair.source.image, pair.source.face_mask), 4),
      "(zero: makeup never touches the background)")

model = MakeupTransferModel(DenoiserConfig(), BackboneConfig(), seed=0)
emb = toy_embedder(model)
print("embedding cosine, source vs target:",
      round(embedding_similarity(pair.source.image, pair.target_image, emb), 4))

sched = DiffusionSchedule.linear(100)
structure = render_structure_image(pair.source.keypoints, 64).image
maps = attention_maps(model, pair.source.image, structure, pair.target_image,
                      pair.source.face_mask, sched)
print(f"{len(maps)} heatmaps, one per tapped backbone layer, "
      f"each {maps[0].shape}, normalized to [0, 1]")

fm, bm = attention_face_mass(model, pair.source.image, structure,
                             pair.target_image, pair.source.face_mask,
                             pair.source.face_mask, sched)
print(f"attention mass, makeup-face tokens {fm:.5f} vs background {bm:.5f}")
print("face/background gap near zero for an untrained model:",
      bool(abs(fm - bm) < 0.01))
