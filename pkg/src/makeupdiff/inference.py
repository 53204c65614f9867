"""Makeup transfer inference: structure render from the source, makeup
encoding, and guided DDIM sampling."""

from __future__ import annotations

import numpy as np
import torch

from .data import composite_non_face
from .diffusion import (DiffusionSchedule, SamplerConfig, ddim_sample,
                        decode_latent, encode_latent)
from .encoder import image_to_tensor
from .model import MakeupTransferModel, TransferConditioning
from .structure import KeypointSet, face_mask_from_keypoints, render_structure_image


def transfer(model: MakeupTransferModel, source: np.ndarray, source_kp: KeypointSet,
             makeup: np.ndarray, sampler: SamplerConfig, sched: DiffusionSchedule,
             use_structure: bool = True, use_guidance: bool = True,
             face_mask: np.ndarray | None = None) -> np.ndarray:
    """Transfer the reference makeup onto the source image.

    At inference both the content image and the structure render come from
    the source. The makeup is applied as a latent difference edit: two
    trajectories are sampled from the same noised source latent, one with
    the makeup tokens (classifier-free guided) and one without, and their
    difference is added to the clean source latent. The shared trajectory
    noise and the model's reconstruction bias cancel in the difference, so
    only the makeup edit reaches the output; at guidance scale 0 the edit
    is exactly zero. The source's codec residual (detail lost by the
    pooling codec) is added back, and non-face pixels are composited from
    the source. ``face_mask`` overrides the keypoint-derived mask used for
    compositing. Deterministic given the sampler seed.
    """
    size = source.shape[0]
    structure = render_structure_image(source_kp, size).image if use_structure else None
    tokens = model.encode_makeup(image_to_tensor(makeup))
    cond = TransferConditioning(
        content_image=image_to_tensor(source),
        structure_image=image_to_tensor(structure) if structure is not None else None,
        makeup_tokens=tokens,
    )
    anchor = cond.without_makeup()
    shape = (1, 3, size // 2, size // 2)
    init = encode_latent(image_to_tensor(source))
    lat_makeup = ddim_sample(model, cond, sampler, sched, shape,
                             uncond=anchor if use_guidance else None,
                             init_latent=init, return_latent=True)
    lat_anchor = ddim_sample(model, anchor, sampler, sched, shape,
                             init_latent=init, return_latent=True)
    out = decode_latent(init + (lat_makeup - lat_anchor))
    generated = out[0].permute(1, 2, 0).numpy()
    src_tensor = image_to_tensor(source)
    codec_rec = decode_latent(encode_latent(src_tensor))[0].permute(1, 2, 0).numpy()
    detail = source.astype(generated.dtype) - codec_rec
    generated = np.clip(generated + detail, 0.0, 1.0)
    if face_mask is None:
        face_mask = face_mask_from_keypoints(source_kp, size)
    return composite_non_face(source.astype(generated.dtype), generated, face_mask)
