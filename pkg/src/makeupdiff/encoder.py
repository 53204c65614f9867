"""Detail-preserving makeup encoder.

A frozen patch-embedding vision transformer is tapped at K intermediate
layers; the per-layer token sequences (P*P patch tokens + 1 class token) are
concatenated along the sequence axis and refined by one trainable
self-attention layer whose output keeps the input shape. The result is the
makeup token sequence consumed by the makeup cross-attention branches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class BackboneConfig:
    patch_grid: int = 4     # P patches per side
    embed_dim: int = 64     # token dim d
    n_layers: int = 4       # transformer depth L
    n_tap: int = 4          # K tapped layers
    n_heads: int = 4
    image_size: int = 64

    def __post_init__(self):
        if self.n_tap > self.n_layers:
            raise ValueError("n_tap must be <= n_layers")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must divide by n_heads")

    @property
    def tokens_per_layer(self) -> int:
        return self.patch_grid**2 + 1

    @property
    def total_tokens(self) -> int:
        return self.tokens_per_layer * self.n_tap

    def tap_indices(self) -> list[int]:
        """Indices of tapped layers: the last K when L > K."""
        return list(range(self.n_layers - self.n_tap, self.n_layers))


class _EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer."""

    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class VisionBackbone(nn.Module):
    """Small ViT feature extractor. Frozen by default (no grads)."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        p = cfg.image_size // cfg.patch_grid
        if p * cfg.patch_grid != cfg.image_size:
            raise ValueError("image_size must divide by patch_grid")
        self.patch_embed = nn.Conv2d(3, cfg.embed_dim, kernel_size=p, stride=p)
        self.cls_token = nn.Parameter(torch.randn(1, 1, cfg.embed_dim) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(1, cfg.tokens_per_layer, cfg.embed_dim) * 0.02)
        self.layers = nn.ModuleList(
            _EncoderLayer(cfg.embed_dim, cfg.n_heads) for _ in range(cfg.n_layers)
        )
        self.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        """image: (B, 3, H, W) -> K sequences, each (B, P*P+1, d)."""
        cfg = self.cfg
        if image.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ValueError(
                f"backbone expects {cfg.image_size}x{cfg.image_size} input, got {tuple(image.shape[-2:])}"
            )
        x = self.patch_embed(image).flatten(2).transpose(1, 2)  # (B, P*P, d)
        cls = self.cls_token.expand(x.shape[0], -1, -1).to(x.dtype)
        x = torch.cat([cls, x], dim=1) + self.pos_embed.to(x.dtype)
        taps = set(self.cfg.tap_indices())
        out = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in taps:
                out.append(x)
        return out


def backbone_features(image: torch.Tensor, backbone: VisionBackbone) -> list[torch.Tensor]:
    """Tap K token sequences from the frozen backbone."""
    with torch.no_grad():
        return backbone(image)


def assemble_embeddings(layers: list[torch.Tensor]) -> torch.Tensor:
    """Concatenate K equal-shape token sequences along the sequence axis.

    Layer order is preserved: token i of layer k lands at index k*n + i.
    """
    if not layers:
        raise ValueError("need at least one layer sequence")
    shape0 = layers[0].shape
    for t in layers[1:]:
        if t.shape != shape0:
            raise ValueError("ragged layer shapes")
    return torch.cat(layers, dim=-2)


class SelfAttentionMapper(nn.Module):
    """Trainable self-attention refinement of the concatenated tokens.

    Standard QKV + output projection with a residual add; output shape
    equals input shape. Attention weights from the last forward pass are
    kept for inspection.
    """

    def __init__(self, dim: int, heads: int = 4, seed: int = 0):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must divide by heads")
        torch.manual_seed(seed)
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)
        self.last_attention: torch.Tensor | None = None

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(raw).all():
            raise FloatingPointError("non-finite makeup token input")
        b, n, d = raw.shape
        h = self.heads

        def split(t):
            return t.view(b, n, h, d // h).transpose(1, 2)

        q, k, v = split(self.to_q(raw)), split(self.to_k(raw)), split(self.to_v(raw))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return raw + self.to_out(out)


class MakeupEncoder(nn.Module):
    """Backbone taps -> sequence concat -> self-attention mapping."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.backbone = VisionBackbone(cfg, seed=seed)
        self.mapper = SelfAttentionMapper(cfg.embed_dim, heads=cfg.n_heads, seed=seed + 1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) image -> (B, (P*P+1)*K, d) makeup tokens."""
        layers = backbone_features(image, self.backbone)
        raw = assemble_embeddings(layers)
        return self.mapper(raw.to(next(self.mapper.parameters()).dtype))

    def pooled_embedding(self, image: torch.Tensor) -> torch.Tensor:
        """Class token of the deepest tapped layer; used as the toy image embedder."""
        layers = backbone_features(image, self.backbone)
        return layers[-1][:, 0]


def image_to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) [0,1] array -> (1, 3, H, W) tensor."""
    t = torch.as_tensor(image, dtype=dtype).permute(2, 0, 1).unsqueeze(0)
    return t
