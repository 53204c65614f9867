"""Text-conditioned diffusion U-Net with an added makeup cross-attention branch.

Every transformer block keeps its text cross-attention and adds a makeup
cross-attention that consumes the makeup token sequence as keys/values while
sharing the block's projected query tensor. The makeup output projection is
zero-initialized, so a freshly built branch is an exact no-op. Content and
structure control residuals are injected additively into the skip features
and the mid block output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class DenoiserConfig:
    in_channels: int = 3
    base_width: int = 16
    channel_mult: tuple[int, ...] = (1, 2)
    blocks_per_level: int = 1
    n_heads: int = 4
    text_dim: int = 32
    makeup_dim: int = 64
    text_vocab: int = 8
    text_len: int = 4
    attention_levels: tuple[int, ...] = (1,)  # levels whose blocks carry attention
    # Fixed multiplier behind the zero-initialized makeup output projection.
    # Keeps the branch an exact no-op at init while letting small weight
    # updates produce usable conditioning strength at a low learning rate.
    makeup_gain: float = 10.0
    # Same role for the control encoders' zero-initialized gates and hint.
    control_gain: float = 10.0

    def __post_init__(self):
        for m in self.channel_mult:
            if (self.base_width * m) % self.n_heads:
                raise ValueError("level widths must divide by head count")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.channel_mult]

    @property
    def time_dim(self) -> int:
        return self.base_width * 4


@dataclass
class DenoiserConditioning:
    """Conditioning bundle: text tokens, makeup tokens, control residuals."""

    text_tokens: torch.Tensor | None            # (B, L, text_dim); required
    makeup: torch.Tensor | None = None          # (B, N, makeup_dim)
    content_residuals: list[torch.Tensor] | None = None
    structure_residuals: list[torch.Tensor] | None = None


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class DualCrossAttention(nn.Module):
    """Text cross-attention plus makeup cross-attention on a shared query.

    The makeup branch reuses the projected query tensor of the text branch
    (not a recomputation) and its output projection starts at exactly zero.
    """

    def __init__(self, dim, text_dim, makeup_dim, heads, makeup_gain=1.0):
        super().__init__()
        self.heads = heads
        self.makeup_gain = makeup_gain
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k_t = nn.Linear(text_dim, dim, bias=False)
        self.to_v_t = nn.Linear(text_dim, dim, bias=False)
        self.to_out_t = nn.Linear(dim, dim)
        self.to_k_m = nn.Linear(makeup_dim, dim, bias=False)
        self.to_v_m = nn.Linear(makeup_dim, dim, bias=False)
        self.to_out_m = nn.Linear(dim, dim)
        nn.init.zeros_(self.to_out_m.weight)
        nn.init.zeros_(self.to_out_m.bias)
        self.last_makeup_attention: torch.Tensor | None = None

    def _attend(self, q, k, v):
        b, n, d = q.shape
        h = self.heads
        hd = d // h

        def split(t):
            return t.view(b, -1, h, hd).transpose(1, 2)

        attn = torch.softmax(split(q) @ split(k).transpose(-1, -2) / math.sqrt(hd), dim=-1)
        out = (attn @ split(v)).transpose(1, 2).reshape(b, n, d)
        return out, attn

    def forward(self, x, text, makeup, store_attention=False):
        q = self.to_q(x)  # shared by both branches
        t_out, _ = self._attend(q, self.to_k_t(text), self.to_v_t(text))
        out = self.to_out_t(t_out)
        if makeup is not None:
            m_out, m_attn = self._attend(q, self.to_k_m(makeup), self.to_v_m(makeup))
            if store_attention:
                self.last_makeup_attention = m_attn.detach()
            out = out + self.makeup_gain * self.to_out_m(m_out)
        return out


def sincos_2d(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2D sinusoidal position encoding, (h*w, dim), row-major tokens.

    Gives attention queries an explicit notion of where on the feature grid
    they sit, which a shallow conv stack only encodes weakly.
    """
    quarter = dim // 4
    freqs = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=dtype) / max(1, quarter))
    ys = torch.arange(h, dtype=dtype)[:, None] * freqs[None]
    xs = torch.arange(w, dtype=dtype)[:, None] * freqs[None]
    ye = torch.cat([torch.sin(ys), torch.cos(ys)], dim=-1)   # (h, dim/2)
    xe = torch.cat([torch.sin(xs), torch.cos(xs)], dim=-1)   # (w, dim/2)
    pe = torch.cat([
        ye[:, None, :].expand(h, w, 2 * quarter),
        xe[None, :, :].expand(h, w, 2 * quarter),
    ], dim=-1).reshape(h * w, 4 * quarter)
    if pe.shape[-1] < dim:
        pe = F.pad(pe, (0, dim - pe.shape[-1]))
    return pe


class TransformerBlock(nn.Module):
    """Spatial tokens -> dual cross-attention -> feed-forward -> spatial."""

    def __init__(self, dim, text_dim, makeup_dim, heads, makeup_gain=1.0):
        super().__init__()
        self.norm_in = _norm(dim)
        self.proj_in = nn.Conv2d(dim, dim, 1)
        self.ln1 = nn.LayerNorm(dim)
        self.attn = DualCrossAttention(dim, text_dim, makeup_dim, heads, makeup_gain)
        self.ln2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.proj_out = nn.Conv2d(dim, dim, 1)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)

    def forward(self, x, text, makeup, store_attention=False):
        b, c, hh, ww = x.shape
        h = self.proj_in(self.norm_in(x))
        tokens = h.flatten(2).transpose(1, 2)
        tokens = tokens + sincos_2d(hh, ww, c, dtype=tokens.dtype).to(tokens.device)
        tokens = tokens + self.attn(self.ln1(tokens), text, makeup, store_attention)
        tokens = tokens + self.ff(self.ln2(tokens))
        h = tokens.transpose(1, 2).reshape(b, c, hh, ww)
        return x + self.proj_out(h)


class ResAttn(nn.Module):
    """ResBlock optionally followed by a transformer block."""

    def __init__(self, in_ch, out_ch, cfg: DenoiserConfig, with_attention=True):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, cfg.time_dim)
        self.attn = (TransformerBlock(out_ch, cfg.text_dim, cfg.makeup_dim, cfg.n_heads,
                                      cfg.makeup_gain)
                     if with_attention else None)

    def forward(self, x, temb, text, makeup, store_attention=False):
        h = self.res(x, temb)
        if self.attn is None:
            return h
        return self.attn(h, text, makeup, store_attention)


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def run_encoder(conv_in, down_blocks, mid, x, temb, text, makeup,
                hint=None, store_attention=False):
    """Shared encoder traversal for the base U-Net and its control copies.

    Returns (mid output, list of skip features). ``hint`` is added to the
    stem output when present (control encoders only).
    """
    h = conv_in(x)
    if hint is not None:
        h = h + hint
    skips = [h]
    for block in down_blocks:
        if isinstance(block, Downsample):
            h = block(h)
        else:
            h = block(h, temb, text, makeup, store_attention)
        skips.append(h)
    for block in mid:
        if isinstance(block, ResAttn):
            h = block(h, temb, text, makeup, store_attention)
        else:
            h = block(h, temb)
    return h, skips


class ConditionalUNet(nn.Module):
    """Denoiser epsilon(x_t, t, text, makeup, control residuals)."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        widths = cfg.widths

        self.text_embed = nn.Embedding(cfg.text_vocab, cfg.text_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_width, cfg.time_dim), nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim),
        )
        self.conv_in = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        ch = widths[0]
        self.skip_channels = [ch]
        for li, w in enumerate(widths):
            for _ in range(cfg.blocks_per_level):
                self.down_blocks.append(ResAttn(ch, w, cfg, li in cfg.attention_levels))
                ch = w
                self.skip_channels.append(ch)
            if li < len(widths) - 1:
                self.down_blocks.append(Downsample(ch))
                self.skip_channels.append(ch)

        self.mid = nn.ModuleList([
            ResBlock(ch, ch, cfg.time_dim),
            ResAttn(ch, ch, cfg),
            ResBlock(ch, ch, cfg.time_dim),
        ])

        self.up_blocks = nn.ModuleList()
        skip_stack = list(self.skip_channels)
        for li, w in reversed(list(enumerate(widths))):
            n_up = cfg.blocks_per_level + (1 if li < len(widths) - 1 else 1)
            for _ in range(n_up):
                sc = skip_stack.pop()
                self.up_blocks.append(ResAttn(ch + sc, w, cfg, li in cfg.attention_levels))
                ch = w
            if li > 0:
                self.up_blocks.append(Upsample(ch))

        self.norm_out = _norm(ch)
        self.conv_out = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    @property
    def n_residual_taps(self) -> int:
        """Number of control residuals: one per skip plus one for mid."""
        return len(self.skip_channels) + 1

    def empty_text(self, batch: int, dtype=None, device=None) -> torch.Tensor:
        """Embedding of the empty-text token sequence."""
        ids = torch.zeros(batch, self.cfg.text_len, dtype=torch.long, device=device)
        emb = self.text_embed(ids)
        return emb.to(dtype) if dtype is not None else emb

    def time_embedding(self, t: torch.Tensor, dtype) -> torch.Tensor:
        temb = timestep_embedding(t, self.cfg.base_width, dtype=dtype)
        return self.time_mlp(temb)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor,
                cond: DenoiserConditioning, store_attention=False) -> torch.Tensor:
        if cond.text_tokens is None:
            raise ValueError("text_tokens is required; pass the empty-text embedding explicitly")
        temb = self.time_embedding(t, x_t.dtype)
        text, makeup = cond.text_tokens, cond.makeup

        h, skips = run_encoder(self.conv_in, self.down_blocks, self.mid,
                               x_t, temb, text, makeup, store_attention=store_attention)

        residuals = None
        for rs in (cond.content_residuals, cond.structure_residuals):
            if rs is not None:
                if len(rs) != self.n_residual_taps:
                    raise ValueError("control residual count mismatch")
                residuals = rs if residuals is None else [a + b for a, b in zip(residuals, rs)]
        if residuals is not None:
            skips = [s + r for s, r in zip(skips, residuals[:-1])]
            h = h + residuals[-1]

        for block in self.up_blocks:
            if isinstance(block, Upsample):
                h = block(h)
            else:
                h = block(torch.cat([h, skips.pop()], dim=1), temb, text, makeup, store_attention)
        return self.conv_out(F.silu(self.norm_out(h)))

    def attention_blocks(self) -> list[DualCrossAttention]:
        """Dual cross-attention modules in traversal order."""
        mods = []
        for block in list(self.down_blocks) + list(self.mid) + list(self.up_blocks):
            if isinstance(block, ResAttn) and block.attn is not None:
                mods.append(block.attn.attn)
        return mods


MAKEUP_PARAM_KEYS = (".to_k_m", ".to_v_m", ".to_out_m")


def is_makeup_param(name: str) -> bool:
    return any(k in name for k in MAKEUP_PARAM_KEYS)
