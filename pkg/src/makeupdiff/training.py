"""Augmentations, content-structure-decoupled batch assembly, and training.

Training reconstructs the makeup target while the three conditioning
channels are deliberately decoupled: the content encoder sees the
(non-makeup) source image, the structural encoder sees geometry rendered
from the target's landmarks, and the makeup encoder sees a warped/affined
copy of the target so it cannot leak pixel-aligned content.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .data import DatasetManifest, PairedSample, FaceSample, load_pair
from .denoiser import DenoiserConditioning, DenoiserConfig
from .diffusion import DiffusionSchedule, add_noise, encode_latent
from .encoder import BackboneConfig, image_to_tensor
from .model import MakeupTransferModel, TransferConditioning, save_checkpoint
from .structure import KeypointSet, render_structure_image


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 16
    iterations: int = 2000
    warp_strength: float = 3.0       # makeup-augmentation landmark displacement, px
    rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    translate_frac: float = 0.05
    makeup_drop_prob: float = 0.1    # guidance-anchor conditioning dropout
    base_pretrain_iters: int = 1500
    base_pretrain_lr: float = 2e-4
    # Path to saved base U-Net weights; when set, pretraining is skipped and
    # the weights are loaded instead (the pretrained base is reusable across
    # runs that only vary the adapter phase).
    base_checkpoint: str | None = None
    freeze_backbone: bool = True
    schedule_steps: int = 100
    content_from: str = "source"     # decoupling variant: source | target
    use_structure_in_training: bool = True  # off = no structure encoder (ablation)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.content_from not in ("source", "target"):
            raise ValueError("content_from must be 'source' or 'target'")


@dataclass
class DecoupledBatchItem:
    content_input: np.ndarray           # source image (after synced affine)
    structure_input: np.ndarray         # render of the target's keypoints
    makeup_input: np.ndarray            # augmented target image
    reconstruction_target: np.ndarray   # target image
    # provenance tags, assertable by the decoupling invariant tests
    content_provenance: str = "source"
    structure_provenance: str = "target"
    makeup_provenance: str = "augmented-target"


def makeup_augment(image: np.ndarray, kp: KeypointSet, strength: float, seed: int) -> np.ndarray:
    """Landmark-anchored smooth warp followed by a random affine.

    Strength 0 is the identity. Deterministic in seed.
    """
    if strength < 0:
        raise ValueError("strength must be >= 0")
    if strength == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    h, w = image.shape[:2]

    disp = rng.uniform(-strength, strength, size=(len(kp.points), 2))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sigma = 0.15 * w
    weights = np.zeros((h, w, 1))
    flow = np.zeros((h, w, 2))
    for (px, py), d in zip(kp.points, disp):
        k = np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * sigma**2))
        weights[:, :, 0] += k
        flow += k[:, :, None] * d
    flow /= np.maximum(weights, 1e-8)

    map_x = (xx - flow[:, :, 0]).astype(np.float32)
    map_y = (yy - flow[:, :, 1]).astype(np.float32)
    warped = cv2.remap(image, map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)

    ang = rng.uniform(-10, 10)
    sc = rng.uniform(0.92, 1.08)
    tx, ty = rng.uniform(-0.04, 0.04, size=2) * w
    m = cv2.getRotationMatrix2D((w / 2, h / 2), ang, sc)
    m[:, 2] += (tx, ty)
    return cv2.warpAffine(warped, m, (w, h), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_REFLECT)


def _sample_affine(rng, size, rotation_deg, scale_range, translate_frac) -> np.ndarray:
    ang = rng.uniform(-rotation_deg, rotation_deg)
    sc = rng.uniform(*scale_range)
    tx, ty = rng.uniform(-translate_frac, translate_frac, size=2) * size
    m = cv2.getRotationMatrix2D((size / 2, size / 2), ang, sc)
    m[:, 2] += (tx, ty)
    return m


def _warp_affine_nearest(image, m, size):
    # Nearest-neighbor keeps the non-face compositing identity exact.
    return cv2.warpAffine(image, m, (size, size), flags=cv2.INTER_NEAREST,
                          borderMode=cv2.BORDER_REFLECT)


def apply_affine_to_pair(pair: PairedSample, m: np.ndarray) -> PairedSample:
    """Apply one 2x3 affine identically to source, target, keypoints, and mask."""
    size = pair.source.image.shape[0]
    src = _warp_affine_nearest(pair.source.image, m, size)
    tgt = _warp_affine_nearest(pair.target_image, m, size)
    mask = _warp_affine_nearest(pair.source.face_mask, m, size)
    kp = pair.source.keypoints.transformed(m)
    kp = KeypointSet(np.clip(kp.points, 0, size - 1), dict(kp.groups))
    face = FaceSample(src, kp, mask, pair.source.seed)
    return PairedSample(face, tgt, pair.style)


def source_augment(pair: PairedSample, cfg: TrainConfig, seed: int) -> PairedSample:
    """One randomly sampled affine applied synchronously to the whole pair."""
    if cfg.rotation_deg == 0 and cfg.scale_range == (1.0, 1.0) and cfg.translate_frac == 0:
        return pair
    size = pair.source.image.shape[0]
    rng = np.random.default_rng(seed)
    m = _sample_affine(rng, size, cfg.rotation_deg, cfg.scale_range, cfg.translate_frac)
    return apply_affine_to_pair(pair, m)


def assemble_decoupled_batch(pair: PairedSample, cfg: TrainConfig, seed: int) -> DecoupledBatchItem:
    """Split one pair into the decoupled conditioning channels."""
    aug = source_augment(pair, cfg, seed)
    size = aug.source.image.shape[0]
    # The paired samples share geometry, so the target's landmarks are the
    # source landmarks after the synchronized affine.
    target_kp = aug.source.keypoints
    structure = render_structure_image(target_kp, size).image
    makeup_in = makeup_augment(aug.target_image, target_kp, cfg.warp_strength, seed + 1)
    content = aug.source.image if cfg.content_from == "source" else aug.target_image
    return DecoupledBatchItem(
        content_input=content,
        structure_input=structure,
        makeup_input=makeup_in,
        reconstruction_target=aug.target_image,
        content_provenance=cfg.content_from,
    )


def _stack(images: list[np.ndarray]) -> torch.Tensor:
    return torch.cat([image_to_tensor(im) for im in images], dim=0)


def make_training_batch(manifest: DatasetManifest, indices, cfg: TrainConfig, seed: int):
    items = [assemble_decoupled_batch(load_pair(manifest, i), cfg, seed + 7919 * j)
             for j, i in enumerate(indices)]
    return (
        _stack([it.content_input for it in items]),
        _stack([it.structure_input for it in items]),
        _stack([it.makeup_input for it in items]),
        _stack([it.reconstruction_target for it in items]),
    )


def _sample_timesteps(sched: DiffusionSchedule, n: int,
                      gen: torch.Generator) -> torch.Tensor:
    """Half uniform, half from the band where the conditioning (not x_t
    itself) is the only source of makeup information. Uniform sampling
    alone starves the conditional pathway of gradient, because the
    makeup-specific part of the loss is a few percent of the total and
    concentrated at mid-to-high noise."""
    t_uni = torch.randint(0, sched.T, (n,), generator=gen)
    t_band = torch.randint(int(0.35 * sched.T), int(0.95 * sched.T),
                           (n,), generator=gen)
    pick = torch.rand(n, generator=gen) < 0.5
    return torch.where(pick, t_band, t_uni)


def style_text_tokens(style, text_len: int, text_dim: int) -> torch.Tensor:
    """Fixed caption-style encoding of a makeup recipe list, (text_len, text_dim).

    One token per recipe: one-hot region, RGB, one-hot pattern, opacity.
    Unused rows stay zero. When text_dim is smaller than the raw encoding
    the vector is folded down by summation so tiny test configs still work.
    This is the desk-scale analogue of the captions a pretrained
    text-to-image base was trained on.
    """
    from .data import PATTERN_KINDS, REGION_LABELS

    needed = len(REGION_LABELS) + 3 + len(PATTERN_KINDS) + 1
    out = torch.zeros(text_len, text_dim)
    for row, (region, color, pattern, opacity) in enumerate(style.region_recipes[:text_len]):
        vec = torch.zeros(needed)
        vec[REGION_LABELS.index(region)] = 1.0
        vec[len(REGION_LABELS):len(REGION_LABELS) + 3] = torch.tensor(color)
        vec[len(REGION_LABELS) + 3 + PATTERN_KINDS.index(pattern)] = 1.0
        vec[needed - 1] = opacity
        for i, v in enumerate(vec):
            out[row, i % text_dim] += v
    return out


def pretrain_base(model: MakeupTransferModel, manifest: DatasetManifest, cfg: TrainConfig,
                  sched: DiffusionSchedule, log=None) -> list[float]:
    """Train the bare text-conditioned U-Net as the desk-scale 'pretrained' base.

    Stand-in for loading a pretrained text-to-image model. The base is
    trained caption-conditioned on both halves of each pair: bare source
    faces carry the empty-text embedding and made-up targets carry their
    ground-truth recipe encoding. The frozen base therefore treats the
    empty caption as "no makeup" and already knows how to paint makeup
    from a conditioning sequence before any adapter attaches, just as a
    pretrained text-to-image model already follows its captions.
    """
    if cfg.base_pretrain_iters <= 0:
        return []
    unet = model.unet
    unet.requires_grad_(True)
    opt = torch.optim.Adam(unet.parameters(), lr=cfg.base_pretrain_lr)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    n = len(manifest.entries)
    cache = {}
    for it in range(cfg.base_pretrain_iters):
        idx = rng.integers(0, n, size=cfg.batch_size)
        use_target = rng.random(cfg.batch_size) < 0.5
        imgs, styles = [], []
        for i, tgt in zip(idx, use_target):
            if i not in cache:
                pair = load_pair(manifest, int(i))
                cache[i] = (pair.source.image, pair.target_image, pair.style)
            src, tgt_img, style = cache[int(i)]
            imgs.append(tgt_img if tgt else src)
            styles.append(style if tgt else None)
        x0 = encode_latent(_stack(imgs))
        t = _sample_timesteps(sched, x0.shape[0], gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = add_noise(x0, eps, t, sched)
        empty = unet.empty_text(x0.shape[0])
        text = torch.stack([
            style_text_tokens(s, unet.cfg.text_len, unet.cfg.text_dim)
            if s is not None else empty[j]
            for j, s in enumerate(styles)
        ])
        cond = DenoiserConditioning(text)
        loss = torch.nn.functional.mse_loss(unet(x_t, t, cond), eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.detach().item())
        if log and (it % 100 == 0):
            log(f"pretrain {it}: loss {history[-1]:.4f}")
    unet.requires_grad_(False)
    return history


def save_base_weights(model: MakeupTransferModel, path) -> None:
    """Save the base U-Net weights for reuse via TrainConfig.base_checkpoint."""
    torch.save(model.unet.state_dict(), path)


def train(manifest: DatasetManifest, cfg: TrainConfig, checkpoint_path,
          model: MakeupTransferModel | None = None, log=None) -> MakeupTransferModel:
    """Full training: base pretraining, then adapter optimization of the
    noise-prediction loss over decoupled batches. Frozen groups are verified
    bitwise-unchanged."""
    if not manifest.entries:
        raise ValueError("dataset is empty")
    torch.manual_seed(cfg.seed)
    sched = DiffusionSchedule.linear(cfg.schedule_steps)

    if model is None:
        size = load_pair(manifest, 0).source.image.shape[0]
        model = MakeupTransferModel(DenoiserConfig(), BackboneConfig(image_size=size),
                                    seed=cfg.seed)

    if cfg.base_checkpoint is not None:
        state = torch.load(cfg.base_checkpoint, weights_only=True)
        model.unet.load_state_dict(state)
        pre_history = []
    else:
        pre_history = pretrain_base(model, manifest, cfg, sched, log=log)
    model.warm_start_makeup_branch()  # reuse the text conditioning machinery
    model.attach_control_encoders()   # copy the pretrained encoder weights
    model.set_adapter_training(cfg.freeze_backbone)

    frozen_before = {n: p.detach().clone() for n, p in model.named_parameters()
                     if not p.requires_grad}

    params = [p for _, p in model.trainable_parameters(cfg.freeze_backbone)]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    rng = np.random.default_rng(cfg.seed + 2)
    history = []
    n = len(manifest.entries)
    for it in range(cfg.iterations):
        idx = rng.integers(0, n, size=cfg.batch_size)
        content, structure, makeup_img, target = make_training_batch(
            manifest, [int(i) for i in idx], cfg, seed=cfg.seed * 1000 + it)
        x0 = encode_latent(target)
        makeup_tokens = model.encode_makeup(makeup_img)
        if rng.random() < cfg.makeup_drop_prob:
            makeup_tokens = None
        cond = TransferConditioning(
            content, structure if cfg.use_structure_in_training else None, makeup_tokens)

        t = _sample_timesteps(sched, x0.shape[0], gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = add_noise(x0, eps, t, sched)
        loss = torch.nn.functional.mse_loss(model(x_t, t, cond), eps)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.detach().item())
        if log and (it % 100 == 0):
            log(f"train {it}: loss {history[-1]:.4f}")

    for name, p in model.named_parameters():
        if name in frozen_before and not torch.equal(p.detach(), frozen_before[name]):
            raise RuntimeError(f"frozen parameter changed during training: {name}")

    cfg_echo = asdict(cfg)
    save_checkpoint(checkpoint_path, model,
                    train_config=cfg_echo,
                    loss_history=history)
    blob_extra = Path(str(checkpoint_path) + ".meta.json")
    blob_extra.write_text(json.dumps({
        "pretrain_loss": pre_history[-1] if pre_history else None,
        "final_loss": history[-1] if history else None,
    }))
    model.eval()
    return model
