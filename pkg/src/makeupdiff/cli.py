"""Command-line entry point.

Subcommands: build-dataset, train, transfer, evaluate, ablate, viz-attn.
Exit codes: 0 success, 2 invalid arguments, 3 runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as synth
from .ablation import ABLATION_SETTINGS, run_ablation
from .diffusion import DiffusionSchedule, SamplerConfig
from .evaluate import evaluate_triples, run_benchmark
from .inference import transfer as run_transfer
from .metrics import attention_maps
from .model import load_checkpoint
from .structure import KeypointSet, face_mask_from_keypoints, render_structure_image
from .training import TrainConfig, train


def _save_png(path, image):
    arr = (np.clip(image, 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def _load_config(path) -> dict:
    """INI config with [data], [model], [train], [sample] sections."""
    cp = configparser.ConfigParser()
    if path:
        if not Path(path).exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cp.read(path)
    return {s: dict(cp[s]) for s in cp.sections()}


def _train_config(cfg_file: dict, args) -> TrainConfig:
    tc = TrainConfig()
    section = cfg_file.get("train", {})
    for f in dataclasses.fields(TrainConfig):
        if f.name in section:
            raw = section[f.name]
            if f.name == "scale_range":
                val = tuple(float(x) for x in raw.split(","))
            elif f.type.startswith("bool") or isinstance(getattr(tc, f.name), bool):
                val = raw.lower() in ("1", "true", "yes")
            elif isinstance(getattr(tc, f.name), int):
                val = int(raw)
            elif isinstance(getattr(tc, f.name), float):
                val = float(raw)
            else:
                val = raw
            setattr(tc, f.name, val)
    for name in ("learning_rate", "batch_size", "iterations", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(tc, name, v)
    tc.__post_init__()
    return tc


def _sampler_config(cfg_file: dict, args) -> SamplerConfig:
    sc = SamplerConfig()
    section = cfg_file.get("sample", {})
    if "steps" in section:
        sc.steps = int(section["steps"])
    if "guidance_scale" in section:
        sc.guidance_scale = float(section["guidance_scale"])
    if "strength" in section:
        sc.strength = float(section["strength"])
    if getattr(args, "steps", None) is not None:
        sc.steps = args.steps
    if getattr(args, "gs", None) is not None:
        sc.guidance_scale = args.gs
    if getattr(args, "seed", None) is not None:
        sc.seed = args.seed
    return sc


def _load_keypoints(image_path, kp_arg) -> KeypointSet:
    path = Path(kp_arg) if kp_arg else Path(str(image_path) + ".kp.json")
    if not path.exists():
        raise FileNotFoundError(
            f"no keypoints for {image_path}: expected sidecar file {path}")
    obj = json.loads(path.read_text())
    if "keypoints" in obj:
        obj = obj["keypoints"]
    return KeypointSet.from_jsonable(obj)


def cmd_build_dataset(args):
    manifest = synth.build_dataset(args.pairs, args.size, args.seed or 0, args.out)
    if args.structure_images:
        sdir = Path(args.out) / "structure"
        sdir.mkdir(exist_ok=True)
        for entry in manifest.entries:
            pair = synth.load_pair(manifest, manifest.entries.index(entry))
            img = render_structure_image(pair.source.keypoints, args.size).image
            _save_png(sdir / f"{entry[0]}_struct.png", img)
    print(f"wrote {len(manifest.entries)} pairs under {manifest.root}")


def cmd_train(args):
    cfg_file = _load_config(args.config)
    tc = _train_config(cfg_file, args)
    manifest = synth.DatasetManifest.load(args.data)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.pt"
    train(manifest, tc, ckpt, log=print)
    print(f"checkpoint written to {ckpt}")


def cmd_transfer(args):
    cfg_file = _load_config(args.config)
    sc = _sampler_config(cfg_file, args)
    model, blob = load_checkpoint(args.checkpoint)
    sched = DiffusionSchedule.linear(int(blob["train_config"].get("schedule_steps", 100)))
    source = synth.load_png(args.source)
    makeup = synth.load_png(args.makeup)
    kp = _load_keypoints(args.source, args.keypoints)
    out = run_transfer(model, source, kp, makeup, sc, sched,
                       use_structure=not args.no_structure)
    out_path = Path(args.out or "transfer_out.png")
    if out_path.is_dir():
        out_path = out_path / "transfer_out.png"
    _save_png(out_path, out)
    print(f"wrote {out_path}")


def cmd_evaluate(args):
    model, blob = load_checkpoint(args.checkpoint)
    triples_spec = json.loads(Path(args.triples).read_text())
    base = Path(args.triples).parent
    triples = []
    for tr in triples_spec["triples"]:
        kp = KeypointSet.from_jsonable(
            json.loads((base / tr["keypoints"]).read_text()).get("keypoints")
            or json.loads((base / tr["keypoints"]).read_text()))
        src = synth.load_png(base / tr["source"])
        triples.append({
            "source": src,
            "reference": synth.load_png(base / tr["reference"]),
            "output": synth.load_png(base / tr["output"]),
            "keypoints": kp,
            "face_mask": face_mask_from_keypoints(kp, src.shape[0]),
        })
    report = evaluate_triples(model, triples)
    out = Path(args.out or "report.json")
    if out.is_dir():
        out = out / "report.json"
    out.write_text(report.to_json())
    print(report.to_json())


def cmd_ablate(args):
    if args.setting not in ABLATION_SETTINGS:
        raise ValueError(f"unknown setting {args.setting!r}; choose from {ABLATION_SETTINGS}")
    cfg_file = _load_config(args.config)
    tc = _train_config(cfg_file, args)
    sc = _sampler_config(cfg_file, args)
    manifest = synth.DatasetManifest.load(args.data)
    n = len(manifest.entries)
    holdout = list(range(max(0, n - args.holdout), n))
    out = Path(args.out or "ablation")
    report = run_ablation(args.setting, manifest, holdout, tc, sc, out,
                          full_checkpoint=args.checkpoint, log=print)
    path = out / f"{args.setting}_report.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    print(report.to_json())


def cmd_viz_attention(args):
    model, blob = load_checkpoint(args.checkpoint)
    sched = DiffusionSchedule.linear(int(blob["train_config"].get("schedule_steps", 100)))
    source = synth.load_png(args.source)
    makeup = synth.load_png(args.makeup)
    kp = _load_keypoints(args.source, args.keypoints)
    size = source.shape[0]
    structure = render_structure_image(kp, size).image
    mask = face_mask_from_keypoints(kp, size)
    maps = attention_maps(model, source, structure, makeup, mask, sched,
                          layer_index=args.layer)
    out = Path(args.out or "attention")
    out.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(maps):
        big = np.kron(m, np.ones((8, 8)))
        _save_png(out / f"attn_block{args.layer}_layer{k}.png", big[:, :, None].repeat(3, 2))
    print(f"wrote {len(maps)} heatmaps to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="makeupdiff",
                                description="Desk-scale diffusion makeup transfer")
    p.add_argument("--config", default=None, help="INI config file (default: none)")
    p.add_argument("--seed", type=int, default=None, help="global seed override (default: 0)")
    p.add_argument("--out", default=None, help="output directory or file (default: cwd)")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-dataset", help="generate a paired synthetic dataset")
    b.add_argument("--pairs", type=int, default=256, help="number of pairs (default: 256)")
    b.add_argument("--size", type=int, default=64, help="image size in px (default: 64)")
    b.add_argument("--structure-images", action="store_true",
                   help="also save structure renders (default: off)")
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", help="train the transfer model")
    t.add_argument("--data", required=True, help="dataset root with manifest.json")
    t.add_argument("--learning-rate", dest="learning_rate", type=float, default=None,
                   help="learning rate (default: 5e-5)")
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None,
                   help="batch size (default: 16)")
    t.add_argument("--iterations", type=int, default=None, help="iterations (default: 2000)")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("transfer", help="transfer reference makeup onto a source image")
    tr.add_argument("--source", required=True, help="source face PNG")
    tr.add_argument("--makeup", required=True, help="reference makeup PNG")
    tr.add_argument("--checkpoint", required=True, help="trained checkpoint")
    tr.add_argument("--keypoints", default=None,
                    help="keypoint sidecar JSON (default: <source>.kp.json)")
    tr.add_argument("--steps", type=int, default=None, help="DDIM steps (default: 30)")
    tr.add_argument("--gs", type=float, default=None, help="guidance scale (default: 1.5)")
    tr.add_argument("--no-structure", action="store_true",
                    help="drop the structure conditioning (default: off)")
    tr.set_defaults(func=cmd_transfer)

    e = sub.add_parser("evaluate", help="score (source, reference, output) triples")
    e.add_argument("--checkpoint", required=True, help="trained checkpoint (no default)")
    e.add_argument("--triples", required=True,
                   help="JSON manifest of triples (no default)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="retrain/re-infer under a named lesion")
    a.add_argument("--setting", required=True, choices=ABLATION_SETTINGS)
    a.add_argument("--data", required=True)
    a.add_argument("--checkpoint", default=None, help="full checkpoint (for inference lesions)")
    a.add_argument("--holdout", type=int, default=32, help="held-out pair count (default: 32)")
    a.add_argument("--iterations", type=int, default=None)
    a.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    a.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--gs", type=float, default=None)
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("viz-attn", help="render makeup-attention heatmaps")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--source", required=True)
    v.add_argument("--makeup", required=True)
    v.add_argument("--keypoints", default=None)
    v.add_argument("--layer", type=int, default=0, help="U-Net attention block (default: 0)")
    v.set_defaults(func=cmd_viz_attention)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError, OSError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
