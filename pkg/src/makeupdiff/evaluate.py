"""End-to-end evaluation: per-pair metric reports and the desk benchmark."""

from __future__ import annotations

import dataclasses

import numpy as np

from .data import DatasetManifest, load_pair, region_mask
from .diffusion import DiffusionSchedule, SamplerConfig
from .inference import transfer
from .metrics import (MetricReport, attention_face_mass, embedding_similarity,
                      l2m, region_color_distance, ssim, toy_embedder)
from .model import MakeupTransferModel
from .structure import render_structure_image


def face_color_distance(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean per-pixel RGB distance over the face region."""
    sel = mask > 0
    if not sel.any():
        return 0.0
    d = np.asarray(a, dtype=np.float64)[sel] - np.asarray(b, dtype=np.float64)[sel]
    return float(np.linalg.norm(d, axis=1).mean())


def patch_embedder(model: MakeupTransferModel):
    """Second pluggable embedder: mean patch token of the deepest tap."""
    from .encoder import backbone_features, image_to_tensor

    def embed(image):
        layers = backbone_features(image_to_tensor(image), model.dp_encoder.backbone)
        return layers[-1][0, 1:].mean(dim=0).numpy()

    return embed


def evaluate_triples(model: MakeupTransferModel, triples, sched: DiffusionSchedule | None = None
                     ) -> MetricReport:
    """Metric report over (source, reference, output) triples.

    Each triple: dict with image arrays 'source', 'reference', 'output',
    a KeypointSet 'keypoints', and a 0/1 'face_mask'.
    """
    emb_a = toy_embedder(model)
    emb_b = patch_embedder(model)
    report = MetricReport(config={"embedder": "frozen-backbone cls/patch tokens",
                                  "similarity_pairing": "output-vs-reference"})
    for tr in triples:
        src, ref, out = tr["source"], tr["reference"], tr["output"]
        mask = tr["face_mask"]
        kp = tr["keypoints"]
        size = src.shape[0]
        regions = {lab: region_mask(kp, lab, size) for lab in kp.groups}
        rcd = region_color_distance(out, ref, regions)
        finite = [v for v in rcd.values() if v is not None]
        report.add(
            clip_i=embedding_similarity(out, ref, emb_a),
            dino_i=embedding_similarity(out, ref, emb_b),
            ssim=ssim(out, src),
            l2m=l2m(out, src, mask),
            region_color_mean=float(np.mean(finite)) if finite else None,
            face_color_out_vs_ref=face_color_distance(out, ref, mask),
            face_color_src_vs_ref=face_color_distance(src, ref, mask),
        )
    return report


def run_benchmark(model: MakeupTransferModel, manifest: DatasetManifest, indices,
                  sampler: SamplerConfig, sched: DiffusionSchedule,
                  use_structure: bool = True, with_attention: bool = False) -> MetricReport:
    """Transfer each held-out pair's makeup back onto its own source and score it."""
    triples = []
    attn_hits = []
    for j, i in enumerate(indices):
        pair = load_pair(manifest, i)
        cfg = dataclasses.replace(sampler, seed=sampler.seed + j)
        out = transfer(model, pair.source.image, pair.source.keypoints,
                       pair.target_image, cfg, sched, use_structure=use_structure,
                       face_mask=pair.source.face_mask)
        triples.append({
            "source": pair.source.image,
            "reference": pair.target_image,
            "output": out,
            "keypoints": pair.source.keypoints,
            "face_mask": pair.source.face_mask,
        })
        if with_attention:
            size = pair.source.image.shape[0]
            structure = render_structure_image(pair.source.keypoints, size).image
            fm, bm = attention_face_mass(model, pair.source.image, structure,
                                         pair.target_image, pair.source.face_mask,
                                         pair.source.face_mask, sched)
            attn_hits.append(fm > bm)
    report = evaluate_triples(model, triples, sched)
    report.config.update({"steps": sampler.steps, "guidance_scale": sampler.guidance_scale,
                          "use_structure": use_structure})
    if with_attention:
        report.config["attention_face_gt_bg_frac"] = float(np.mean(attn_hits))
    return report


def composite_score(report: MetricReport) -> float:
    """Lower is better: makeup-transfer ratio plus background damage."""
    agg = report.aggregate
    ratio = agg["face_color_out_vs_ref"] / max(agg["face_color_src_vs_ref"], 1e-9)
    return ratio + agg["l2m"]
