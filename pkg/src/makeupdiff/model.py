"""Full makeup-transfer model: base U-Net + makeup encoder + two control encoders.

Wires the pieces together behind a single epsilon-prediction callable and
owns the checkpoint layout: parameters are serialized under the named groups
``dp_encoder.backbone``, ``dp_encoder.mapper``, ``unet.base``,
``unet.makeup_attn``, ``control.content``, ``control.structure``.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import torch
import torch.nn as nn

from .control import ControlEncoder, control_encode
from .denoiser import ConditionalUNet, DenoiserConditioning, DenoiserConfig, is_makeup_param
from .encoder import BackboneConfig, MakeupEncoder


@dataclass
class TransferConditioning:
    """High-level conditioning: raw images plus makeup tokens.

    Control residuals are recomputed per call because they depend on the
    current noisy latent and timestep.
    """

    content_image: torch.Tensor | None = None    # (B, 3, H, W) source image
    structure_image: torch.Tensor | None = None  # (B, 3, H, W) keypoint-line render
    makeup_tokens: torch.Tensor | None = None    # (B, N, d)
    text_tokens: torch.Tensor | None = None      # defaults to the empty-text embedding

    def without_makeup(self) -> "TransferConditioning":
        """Guidance anchor: drop makeup, keep content/structure."""
        return TransferConditioning(self.content_image, self.structure_image, None, self.text_tokens)


class MakeupTransferModel(nn.Module):
    def __init__(self, denoiser_cfg: DenoiserConfig, backbone_cfg: BackboneConfig, seed: int = 0):
        super().__init__()
        if backbone_cfg.embed_dim != denoiser_cfg.makeup_dim:
            raise ValueError("backbone embed_dim must match denoiser makeup_dim")
        self.denoiser_cfg = denoiser_cfg
        self.backbone_cfg = backbone_cfg
        self.unet = ConditionalUNet(denoiser_cfg, seed=seed)
        self.dp_encoder = MakeupEncoder(backbone_cfg, seed=seed + 1)
        self.attach_control_encoders()

    def attach_control_encoders(self):
        """(Re)copy the control encoders from the current base weights."""
        torch.manual_seed(0)
        gain = self.denoiser_cfg.control_gain
        self.content_ctrl = ControlEncoder(self.unet, gain=gain)
        self.structure_ctrl = ControlEncoder(self.unet, gain=gain)

    def warm_start_makeup_branch(self):
        """Initialize the makeup key/value projections from the text branch.

        The pretrained base already follows its conditioning sequence
        through the text projections; copying them into the first text_dim
        input columns of the makeup projections (rest zeroed) means the
        adapter phase only has to learn makeup tokens that mimic the text
        interface, not the conditioning machinery itself. The makeup output
        projection stays zero, so the branch is still an exact no-op until
        trained.
        """
        td = self.denoiser_cfg.text_dim
        with torch.no_grad():
            for blk in self.unet.attention_blocks():
                for km, kt in ((blk.to_k_m, blk.to_k_t), (blk.to_v_m, blk.to_v_t)):
                    km.weight.zero_()
                    km.weight[:, :td] = kt.weight

    def encode_makeup(self, image: torch.Tensor) -> torch.Tensor:
        return self.dp_encoder(image)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: TransferConditioning,
                store_attention: bool = False) -> torch.Tensor:
        text = cond.text_tokens
        if text is None:
            text = self.unet.empty_text(x_t.shape[0], dtype=x_t.dtype)
        content_res = None
        if cond.content_image is not None:
            content_res = control_encode(self.content_ctrl, cond.content_image, x_t, t, self.unet)
        structure_res = None
        if cond.structure_image is not None:
            structure_res = control_encode(self.structure_ctrl, cond.structure_image, x_t, t, self.unet)
        dc = DenoiserConditioning(text, cond.makeup_tokens, content_res, structure_res)
        return self.unet(x_t, t, dc, store_attention=store_attention)

    # -- parameter groups -------------------------------------------------

    def grouped_state_dict(self) -> dict[str, dict[str, torch.Tensor]]:
        groups: dict[str, dict[str, torch.Tensor]] = {
            "dp_encoder.backbone": {}, "dp_encoder.mapper": {},
            "unet.base": {}, "unet.makeup_attn": {},
            "control.content": {}, "control.structure": {},
        }
        for name, p in self.state_dict().items():
            groups[self._group_of(name)][name] = p.detach().clone()
        return groups

    @staticmethod
    def _group_of(name: str) -> str:
        if name.startswith("unet."):
            return "unet.makeup_attn" if is_makeup_param(name) else "unet.base"
        if name.startswith("dp_encoder.backbone."):
            return "dp_encoder.backbone"
        if name.startswith("dp_encoder.mapper."):
            return "dp_encoder.mapper"
        if name.startswith("content_ctrl."):
            return "control.content"
        if name.startswith("structure_ctrl."):
            return "control.structure"
        raise KeyError(f"unmapped parameter: {name}")

    def load_grouped_state_dict(self, groups: dict[str, dict[str, torch.Tensor]]):
        flat = {k: v for g in groups.values() for k, v in g.items()}
        self.load_state_dict(flat)

    def trainable_parameters(self, freeze_backbone: bool = True):
        """Adapter parameters: mapper, makeup cross-attention, both controls."""
        params = []
        for name, p in self.named_parameters():
            group = self._group_of(name)
            if group == "unet.base":
                continue
            if group == "dp_encoder.backbone" and freeze_backbone:
                continue
            params.append((name, p))
        return params

    def set_adapter_training(self, freeze_backbone: bool = True):
        """requires_grad True only on the trainable adapter groups."""
        trainable = {n for n, _ in self.trainable_parameters(freeze_backbone)}
        for name, p in self.named_parameters():
            p.requires_grad_(name in trainable)


def save_checkpoint(path, model: MakeupTransferModel, train_config: dict | None = None,
                    loss_history: list[float] | None = None):
    torch.save({
        "format_version": 1,
        "denoiser_cfg": asdict(model.denoiser_cfg),
        "backbone_cfg": asdict(model.backbone_cfg),
        "groups": model.grouped_state_dict(),
        "train_config": train_config or {},
        "loss_history": loss_history or [],
    }, path)


def load_checkpoint(path) -> tuple[MakeupTransferModel, dict]:
    blob = torch.load(path, weights_only=False)
    model = MakeupTransferModel(
        DenoiserConfig(**blob["denoiser_cfg"]),
        BackboneConfig(**blob["backbone_cfg"]),
    )
    model.load_grouped_state_dict(blob["groups"])
    model.eval()
    return model, blob
