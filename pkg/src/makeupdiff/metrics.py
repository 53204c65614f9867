"""Evaluation metrics: embedding cosine similarity, SSIM, background L2,
per-region color distances, and makeup-attention heatmaps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch

from .diffusion import DiffusionSchedule, add_noise, encode_latent
from .encoder import image_to_tensor
from .model import MakeupTransferModel, TransferConditioning


def embedding_similarity(a: np.ndarray, b: np.ndarray, embedder) -> float:
    """Cosine similarity of embedded images; embedder maps image -> 1D vector."""
    va = np.asarray(embedder(a), dtype=np.float64).ravel()
    vb = np.asarray(embedder(b), dtype=np.float64).ravel()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise FloatingPointError("zero-norm embedding")
    return float(va @ vb / (na * nb))


def toy_embedder(model: MakeupTransferModel):
    """Pooled class-token embedder backed by the frozen vision backbone."""

    def embed(image: np.ndarray) -> np.ndarray:
        t = image_to_tensor(image)
        return model.dp_encoder.pooled_embedding(t)[0].numpy()

    return embed


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(ax**2) / (2 * sigma**2))
    k /= k.sum()
    return np.outer(k, k)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM (11-tap, sigma 1.5), channel-averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image smaller than {window}x{window} window")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    kernel = _gaussian_kernel(window)
    half = window // 2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mu_x = cv2.filter2D(x, -1, kernel)[half:-half, half:-half]
        mu_y = cv2.filter2D(y, -1, kernel)[half:-half, half:-half]
        xx = cv2.filter2D(x * x, -1, kernel)[half:-half, half:-half] - mu_x**2
        yy = cv2.filter2D(y * y, -1, kernel)[half:-half, half:-half] - mu_y**2
        xy = cv2.filter2D(x * y, -1, kernel)[half:-half, half:-half] - mu_x * mu_y
        s = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / (
            (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def l2m(generated: np.ndarray, source: np.ndarray, face_mask: np.ndarray) -> float:
    """Mean squared background difference on the 0-255 pixel scale."""
    if generated.shape != source.shape:
        raise ValueError("shape mismatch")
    bg = face_mask == 0
    if not bg.any():
        raise ValueError("mask covers all pixels; no background")
    diff = (np.asarray(generated, dtype=np.float64) - np.asarray(source, dtype=np.float64)) * 255.0
    return float((diff[bg] ** 2).mean())


def region_color_distance(image: np.ndarray, reference: np.ndarray,
                          regions: dict[str, np.ndarray]) -> dict[str, float | None]:
    """Per-region Euclidean distance between mean RGB values.

    Empty regions are reported as None rather than raising.
    """
    out: dict[str, float | None] = {}
    for label, mask in regions.items():
        sel = mask > 0
        if not sel.any():
            out[label] = None
            continue
        mi = np.asarray(image, dtype=np.float64)[sel].mean(axis=0)
        mr = np.asarray(reference, dtype=np.float64)[sel].mean(axis=0)
        out[label] = float(np.linalg.norm(mi - mr))
    return out


@dataclass
class MetricReport:
    records: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, **record):
        self.records.append(record)

    @property
    def aggregate(self) -> dict[str, float]:
        keys = [k for k in (self.records[0] if self.records else {})
                if isinstance(self.records[0][k], (int, float))]
        return {k: float(np.mean([r[k] for r in self.records if r.get(k) is not None]))
                for k in keys}

    def to_json(self) -> str:
        return json.dumps({
            "config": self.config,
            "aggregate": self.aggregate,
            "records": self.records,
        }, indent=2, sort_keys=True)


def _mask_to_grid(mask: np.ndarray, grid: int) -> np.ndarray:
    return cv2.resize(mask.astype(np.float32), (grid, grid),
                      interpolation=cv2.INTER_AREA) > 0.25


def makeup_attention(model: MakeupTransferModel, source: np.ndarray, structure: np.ndarray,
                     makeup: np.ndarray, sched: DiffusionSchedule, t: int = 10,
                     layer_index: int = 0) -> torch.Tensor:
    """Makeup cross-attention weights of one U-Net block: (heads, Nq, Nm)."""
    blocks = model.unet.attention_blocks()
    if not 0 <= layer_index < len(blocks):
        raise ValueError(f"layer index out of range [0, {len(blocks)})")
    tokens = model.encode_makeup(image_to_tensor(makeup))
    x0 = encode_latent(image_to_tensor(source))
    gen = torch.Generator().manual_seed(0)
    x_t = add_noise(x0, torch.randn(x0.shape, generator=gen), torch.tensor([t]), sched)
    cond = TransferConditioning(image_to_tensor(source), image_to_tensor(structure), tokens)
    with torch.no_grad():
        model(x_t, torch.tensor([t]), cond, store_attention=True)
    attn = blocks[layer_index].last_makeup_attention
    return attn[0]  # (heads, Nq, Nm)


def attention_maps(model: MakeupTransferModel, source: np.ndarray, structure: np.ndarray,
                   makeup: np.ndarray, face_mask: np.ndarray, sched: DiffusionSchedule,
                   layer_index: int = 0, t: int = 10) -> list[np.ndarray]:
    """Per-backbone-layer heatmaps of face-query attention over makeup tokens.

    Aggregates attention rows whose query patch lies inside the source face
    mask, splits the makeup-token axis back into its K backbone layers
    (dropping each layer's class token), and normalizes each P x P map to
    [0, 1].
    """
    attn = makeup_attention(model, source, structure, makeup, sched, t, layer_index)
    nq = attn.shape[1]
    grid = int(round(nq**0.5))
    face = _mask_to_grid(face_mask, grid).ravel()
    rows = attn.mean(dim=0)  # average heads -> (Nq, Nm)
    face_rows = rows[torch.as_tensor(face)] if face.any() else rows
    agg = face_rows.mean(dim=0).numpy()  # (Nm,)

    cfg = model.backbone_cfg
    per_layer = cfg.tokens_per_layer
    maps = []
    for k in range(cfg.n_tap):
        chunk = agg[k * per_layer:(k + 1) * per_layer][1:]  # drop class token
        m = chunk.reshape(cfg.patch_grid, cfg.patch_grid)
        lo, hi = m.min(), m.max()
        maps.append((m - lo) / (hi - lo) if hi > lo else np.zeros_like(m))
    return maps


def attention_face_mass(model: MakeupTransferModel, source: np.ndarray, structure: np.ndarray,
                        makeup: np.ndarray, source_mask: np.ndarray, makeup_mask: np.ndarray,
                        sched: DiffusionSchedule, layer_index: int = 0) -> tuple[float, float]:
    """Mean face-query attention on makeup face tokens vs background tokens."""
    attn = makeup_attention(model, source, structure, makeup, sched, 10, layer_index)
    nq = attn.shape[1]
    grid = int(round(nq**0.5))
    face_q = _mask_to_grid(source_mask, grid).ravel()
    rows = attn.mean(dim=0)
    face_rows = rows[torch.as_tensor(face_q)] if face_q.any() else rows
    agg = face_rows.mean(dim=0).numpy()

    cfg = model.backbone_cfg
    mk_face = _mask_to_grid(makeup_mask, cfg.patch_grid).ravel()
    per_layer = cfg.tokens_per_layer
    face_vals, bg_vals = [], []
    for k in range(cfg.n_tap):
        chunk = agg[k * per_layer:(k + 1) * per_layer][1:]
        face_vals.append(chunk[mk_face])
        bg_vals.append(chunk[~mk_face])
    face_mean = float(np.concatenate(face_vals).mean()) if mk_face.any() else 0.0
    bg_mean = float(np.concatenate(bg_vals).mean()) if (~mk_face).any() else 0.0
    return face_mean, bg_mean
