"""Ablation harness: retrain or re-infer under a named lesion and score it
with the same report schema as the full configuration."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .data import DatasetManifest
from .denoiser import DenoiserConfig
from .diffusion import DiffusionSchedule, SamplerConfig
from .encoder import BackboneConfig
from .evaluate import MetricReport, run_benchmark
from .model import MakeupTransferModel, load_checkpoint
from .training import TrainConfig, train

ABLATION_SETTINGS = ("no_structure_input", "no_source_aug", "no_decoupling", "no_multilayer")


def lesioned_train_config(setting: str, cfg: TrainConfig) -> TrainConfig:
    if setting == "no_source_aug":
        return dataclasses.replace(cfg, rotation_deg=0.0, scale_range=(1.0, 1.0),
                                   translate_frac=0.0)
    if setting == "no_decoupling":
        # content comes from the makeup target, so the channels are no longer
        # split between geometry and appearance
        return dataclasses.replace(cfg, content_from="target")
    return cfg


def run_ablation(setting: str, manifest: DatasetManifest, holdout, cfg: TrainConfig,
                 sampler: SamplerConfig, work_dir, full_checkpoint=None, log=None
                 ) -> MetricReport:
    """Score one lesion. ``no_structure_input`` re-infers the full checkpoint;
    the other settings retrain."""
    if setting not in ABLATION_SETTINGS:
        raise ValueError(f"unknown ablation setting: {setting!r}")
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    sched = DiffusionSchedule.linear(cfg.schedule_steps)

    if setting == "no_structure_input":
        if full_checkpoint is None:
            raise ValueError("no_structure_input needs the trained full checkpoint")
        model, _ = load_checkpoint(full_checkpoint)
        report = run_benchmark(model, manifest, holdout, sampler, sched,
                               use_structure=False)
    else:
        from .data import load_pair
        size = load_pair(manifest, 0).source.image.shape[0]
        bb = BackboneConfig(image_size=size)
        if setting == "no_multilayer":
            bb = dataclasses.replace(bb, n_tap=1)
        model = MakeupTransferModel(DenoiserConfig(), bb, seed=cfg.seed)
        tcfg = lesioned_train_config(setting, cfg)
        model = train(manifest, tcfg, work_dir / f"{setting}.pt", model=model, log=log)
        report = run_benchmark(model, manifest, holdout, sampler, sched)
    report.config["ablation"] = setting
    return report
