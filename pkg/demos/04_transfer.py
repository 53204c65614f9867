"""Run makeup transfer with a freshly trained toy model.

Trains briefly, then transfers a held-out pair's makeup back onto its own
source and reports how far the output moved toward the reference inside
the face, and how little it moved outside it.
"""

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from makeupdiff import build_dataset, load_pair
from makeupdiff.diffusion import DiffusionSchedule, SamplerConfig
from makeupdiff.evaluate import face_color_distance
from makeupdiff.inference import transfer
from makeupdiff.metrics import l2m
from makeupdiff.training import TrainConfig, train

root = Path(tempfile.mkdtemp(prefix="makeupdiff_demo_"))
manifest = build_dataset(n_pairs=24, size=64, seed=0, root=root)

cfg = TrainConfig(iterations=200, base_pretrain_iters=200, batch_size=8, seed=0)
model = train(manifest, cfg, root / "checkpoint.pt", log=None)

sched = DiffusionSchedule.linear(cfg.schedule_steps)
pair = load_pair(manifest, len(manifest.entries) - 1)
out = transfer(model, pair.source.image, pair.source.keypoints,
               pair.target_image, SamplerConfig(steps=30, guidance_scale=1.5),
               sched)

mask = pair.source.face_mask
d_out = face_color_distance(out, pair.target_image, mask)
d_src = face_color_distance(pair.source.image, pair.target_image, mask)
print(f"face color distance to reference: output {d_out:.4f}, source {d_src:.4f}")
print(f"transfer ratio (lower is better): {d_out / d_src:.2f}")
print(f"background damage L2-M (0-255 scale): {l2m(out, pair.source.image, mask):.2f}")

arr = (np.clip(out, 0, 1) * 255).round().astype(np.uint8)
Image.fromarray(arr).save(root / "transfer.png")
print(f"wrote {root / 'transfer.png'}")
