"""Noise schedule, forward noising, training loss, guidance, and DDIM sampling.

The pixel-latent codec is a fixed 2x average pool (and nearest unpool), a
deliberately learning-free stand-in for a VAE that keeps the latent-space
plumbing intact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .denoiser import DenoiserConditioning


@dataclass
class DiffusionSchedule:
    betas: np.ndarray
    alphas_cumprod: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if np.any(self.betas < 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie in [0, 1)")
        self.alphas_cumprod = np.cumprod(1.0 - self.betas)
        if np.any(np.diff(self.alphas_cumprod) > 0):
            raise ValueError("alphas_cumprod must be non-increasing")

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def linear(cls, T: int = 100, beta_start: float | None = None,
               beta_end: float | None = None):
        """Linear beta schedule with T-independent total noise.

        Defaults scale the classic 1e-4..0.02 thousand-step ramp by 1000/T
        so the terminal signal-to-noise ratio stays near zero at any T;
        without the rescale a short schedule leaves x_T mostly signal.
        """
        if beta_start is None:
            beta_start = 0.1 / T
        if beta_end is None:
            beta_end = min(20.0 / T, 0.999)
        return cls(np.linspace(beta_start, beta_end, T))

    def acp(self, t, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.alphas_cumprod, dtype=dtype)[t]


@dataclass
class SamplerConfig:
    steps: int = 30
    guidance_scale: float = 1.5
    eta: float = 0.0
    seed: int = 0
    # Fraction of the schedule traversed when sampling image-to-image: the
    # chain starts from the init latent noised to round((T-1)*strength).
    strength: float = 1.0

    def validate(self, sched: DiffusionSchedule):
        if self.steps < 1 or self.steps > sched.T:
            raise ValueError(f"steps must be in [1, {sched.T}]")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if not 0.0 < self.strength <= 1.0:
            raise ValueError("strength must be in (0, 1]")


def encode_latent(image: torch.Tensor) -> torch.Tensor:
    """(B, 3, H, W) image in [0,1] -> (B, 3, H/2, W/2) latent in [-1,1]."""
    return F.avg_pool2d(image * 2.0 - 1.0, 2)


def decode_latent(latent: torch.Tensor) -> torch.Tensor:
    """Inverse of encode_latent up to pooling loss; output clamped to [0,1]."""
    img = F.interpolate(latent, scale_factor=2, mode="nearest")
    return ((img + 1.0) / 2.0).clamp(0.0, 1.0)


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t, sched: DiffusionSchedule) -> torch.Tensor:
    """x_t = sqrt(acp_t) x0 + sqrt(1 - acp_t) eps."""
    t = torch.as_tensor(t)
    if torch.any(t >= sched.T) or torch.any(t < 0):
        raise ValueError(f"timestep out of range [0, {sched.T})")
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shape mismatch")
    acp = sched.acp(t, x0.dtype)
    while acp.dim() < x0.dim():
        acp = acp.unsqueeze(-1)
    return torch.sqrt(acp) * x0 + torch.sqrt(1.0 - acp) * eps


def training_loss(x0: torch.Tensor, cond: DenoiserConditioning, sched: DiffusionSchedule,
                  model, generator: torch.Generator | None = None) -> torch.Tensor:
    """Noise-prediction MSE at a uniformly sampled timestep."""
    b = x0.shape[0]
    t = torch.randint(0, sched.T, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = add_noise(x0, eps, t, sched)
    pred = model(x_t, t, cond)
    return F.mse_loss(pred, eps)


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, gs: float) -> torch.Tensor:
    """eps_uncond + gs * (eps_cond - eps_uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("shape mismatch")
    if gs == 0.0:  # exact endpoints, no float round-trip
        return eps_uncond
    if gs == 1.0:
        return eps_cond
    return eps_uncond + gs * (eps_cond - eps_uncond)


def ddim_timesteps(sched: DiffusionSchedule, steps: int,
                   strength: float = 1.0) -> list[int]:
    """Evenly spaced timestep subsequence, descending, ending at 0."""
    t_max = int(round((sched.T - 1) * strength))
    ts = np.linspace(0, t_max, steps).round().astype(int)
    return sorted(set(ts.tolist()), reverse=True)


def ddim_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int | None,
              sched: DiffusionSchedule) -> torch.Tensor:
    """One deterministic DDIM update from t to t_prev (None = final)."""
    acp_t = float(sched.alphas_cumprod[t])
    x0_pred = (x_t - np.sqrt(1.0 - acp_t) * eps_hat) / np.sqrt(acp_t)
    if t_prev is None:
        return x0_pred
    acp_p = float(sched.alphas_cumprod[t_prev])
    return np.sqrt(acp_p) * x0_pred + np.sqrt(1.0 - acp_p) * eps_hat


def ddim_sample(model, cond: DenoiserConditioning, sampler: SamplerConfig,
                sched: DiffusionSchedule, shape: tuple[int, ...],
                uncond: DenoiserConditioning | None = None,
                init_latent: torch.Tensor | None = None,
                return_latent: bool = False,
                callback=None) -> torch.Tensor:
    """Deterministic DDIM sampling with classifier-free guidance.

    ``uncond`` is the makeup-free conditioning used as the guidance anchor;
    it keeps the content/structure residuals and drops only the makeup
    tokens. When omitted, guidance is disabled. ``init_latent`` anchors the
    trajectory image-to-image style: the chain starts from that latent
    noised to the first timestep instead of from pure noise. Returns the
    decoded image in [0, 1], or the final latent when ``return_latent``.
    """
    sampler.validate(sched)
    gen = torch.Generator().manual_seed(sampler.seed)
    ts = ddim_timesteps(sched, sampler.steps, sampler.strength)
    if init_latent is None:
        x = torch.randn(shape, generator=gen)
    else:
        if tuple(init_latent.shape) != tuple(shape):
            raise ValueError("init_latent shape mismatch")
        eps0 = torch.randn(shape, generator=gen)
        x = add_noise(init_latent, eps0, torch.tensor([ts[0]]), sched)
    with torch.no_grad():
        for i, t in enumerate(ts):
            tt = torch.full((shape[0],), t, dtype=torch.long)
            eps = model(x, tt, cond)
            if uncond is not None:
                eps_u = model(x, tt, uncond)
                eps = cfg_combine(eps_u, eps, sampler.guidance_scale)
            t_prev = ts[i + 1] if i + 1 < len(ts) else None
            x = ddim_step(x, eps, t, t_prev, sched)
            if callback is not None:
                callback(i, t, x)
    if return_latent:
        return x
    return decode_latent(x)
