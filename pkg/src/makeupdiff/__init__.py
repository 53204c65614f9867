"""Desk-scale diffusion makeup transfer.

A small, fully trainable implementation of makeup transfer by diffusion:
a detail-preserving makeup encoder with multi-layer token taps, makeup
cross-attention sharing queries with text cross-attention, dual
content/structure control encoders gated by zero convolutions,
content-structure decoupled training on procedurally generated face pairs,
and the matching evaluation metrics.
"""

from .data import (DatasetManifest, FaceSample, MakeupStyle, PairedSample,
                   apply_makeup, build_dataset, composite_non_face,
                   generate_style_catalog, load_pair, make_pair, render_face)
from .denoiser import ConditionalUNet, DenoiserConditioning, DenoiserConfig
from .diffusion import (DiffusionSchedule, SamplerConfig, add_noise, cfg_combine,
                        ddim_sample, decode_latent, encode_latent, training_loss)
from .encoder import (BackboneConfig, MakeupEncoder, SelfAttentionMapper,
                      assemble_embeddings, backbone_features)
from .evaluate import run_benchmark, composite_score, face_color_distance
from .inference import transfer
from .metrics import (MetricReport, attention_maps, embedding_similarity, l2m,
                      region_color_distance, ssim)
from .model import (MakeupTransferModel, TransferConditioning, load_checkpoint,
                    save_checkpoint)
from .structure import (KeypointSet, StructureImage, face_mask_from_keypoints,
                        render_structure_image)
from .training import (DecoupledBatchItem, TrainConfig, assemble_decoupled_batch,
                       makeup_augment, source_augment, train)

__version__ = "0.1.0"
