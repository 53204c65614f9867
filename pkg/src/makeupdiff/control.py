"""Content and structural control encoders.

Each encoder is a trainable copy of the base U-Net's encoder half (stem,
down blocks, mid) plus a hint stack that maps the conditioning image to the
latent grid and zero-convolution gates at every tap point. With all gates at
their initial zeros the encoder contributes exactly nothing, so attaching it
leaves the base model's behavior untouched.
"""

from __future__ import annotations

import copy

import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import ConditionalUNet, run_encoder


def _zero_conv(ch_in, ch_out):
    conv = nn.Conv2d(ch_in, ch_out, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class HintStem(nn.Module):
    """Strided conv pyramid: conditioning image -> latent-resolution features."""

    def __init__(self, width: int, downsamples: int = 1):
        super().__init__()
        layers = [nn.Conv2d(3, width, 3, padding=1), nn.SiLU()]
        for _ in range(downsamples):
            layers += [nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU()]
        self.stack = nn.Sequential(*layers)
        self.gate = _zero_conv(width, width)

    def forward(self, cond_image):
        return self.gate(self.stack(cond_image))


class ControlEncoder(nn.Module):
    """One ControlNet-style encoder producing per-tap additive residuals."""

    def __init__(self, base: ConditionalUNet, hint_downsamples: int = 1,
                 gain: float = 10.0):
        super().__init__()
        cfg = base.cfg
        # Fixed multiplier behind the zero convolutions: residuals stay exactly
        # zero at init, but small gate updates reach useful strength at a low
        # learning rate.
        self.gain = gain
        self.conv_in = copy.deepcopy(base.conv_in)
        self.down_blocks = copy.deepcopy(base.down_blocks)
        self.mid = copy.deepcopy(base.mid)
        self.hint = HintStem(cfg.widths[0], hint_downsamples)
        mid_ch = cfg.widths[-1]
        self.gates = nn.ModuleList(
            [_zero_conv(c, c) for c in base.skip_channels] + [_zero_conv(mid_ch, mid_ch)]
        )

    def forward(self, cond_image: torch.Tensor, x_t: torch.Tensor, temb: torch.Tensor,
                text: torch.Tensor) -> list[torch.Tensor]:
        hint = self.gain * self.hint(cond_image)
        if hint.shape[-2:] != x_t.shape[-2:]:
            raise ValueError(
                f"hint grid {tuple(hint.shape[-2:])} incompatible with latent {tuple(x_t.shape[-2:])}"
            )
        h, skips = run_encoder(self.conv_in, self.down_blocks, self.mid,
                               x_t, temb, text, makeup=None, hint=hint)
        return [self.gain * gate(f) for gate, f in zip(self.gates, skips + [h])]


def control_encode(encoder: ControlEncoder, cond_image: torch.Tensor, x_t: torch.Tensor,
                   t: torch.Tensor, base: ConditionalUNet) -> list[torch.Tensor]:
    """Residuals for one conditioning image, using the empty-text embedding."""
    temb = base.time_embedding(t, x_t.dtype)
    text = base.empty_text(x_t.shape[0], dtype=x_t.dtype)
    return encoder(cond_image, x_t, temb, text)
