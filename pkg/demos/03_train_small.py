"""Train a small transfer model end to end on a toy dataset.

The run is deliberately tiny (16 pairs, 60 base + 60 adapter iterations)
so it finishes in about a minute on a CPU; see the CLI `train` subcommand
for the full-scale recipe. The base U-Net is pretrained first, then frozen
bitwise while the makeup and control adapters train.
"""

import tempfile
from pathlib import Path

from makeupdiff import build_dataset
from makeupdiff.denoiser import DenoiserConfig
from makeupdiff.encoder import BackboneConfig
from makeupdiff.model import MakeupTransferModel, load_checkpoint
from makeupdiff.training import TrainConfig, train

root = Path(tempfile.mkdtemp(prefix="makeupdiff_demo_"))
manifest = build_dataset(n_pairs=16, size=64, seed=0, root=root)

cfg = TrainConfig(iterations=60, base_pretrain_iters=60, batch_size=4, seed=0)
model = MakeupTransferModel(DenoiserConfig(), BackboneConfig(), seed=0)

ckpt = root / "checkpoint.pt"
train(manifest, cfg, ckpt, model=model, log=print)

_, blob = load_checkpoint(ckpt)
hist = blob["loss_history"]
print(f"checkpoint: {ckpt}")
print(f"adapter loss, first vs last: {hist[0]:.4f} -> {hist[-1]:.4f}")
print("parameter groups:", sorted(blob["groups"]))
