"""DDPM noise schedule, conditional MLP denoiser and classifier-free guidance.

The denoiser predicts the noise added to a single next-latent vector,
conditioned on a backbone feature via adaptive layer norm. Sampling is
plain ancestral DDPM with the small-variance posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def cosine_alphabar(steps: int, s: float = 0.008) -> np.ndarray:
    """Cumulative-product alpha-bar table of length steps+1 with alphabar[0] = 1.

    Betas come from the cosine curve's stepwise ratios, clipped at 0.999,
    and the table is their cumulative product, so it is self-consistent
    with the sampler's per-step alphas.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    t = np.arange(steps + 1, dtype=np.float64)
    f = np.cos(((t / steps + s) / (1 + s)) * math.pi / 2) ** 2
    raw = f / f[0]
    betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, 0.999)
    alphabar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return alphabar


@dataclass
class NoiseSchedule:
    steps: int
    alphabar: torch.Tensor  # (steps+1,), alphabar[0] = 1
    betas: torch.Tensor  # (steps,), betas[t-1] pairs with timestep t
    alphas: torch.Tensor

    @classmethod
    def cosine(cls, steps: int = 50) -> "NoiseSchedule":
        ab = torch.from_numpy(cosine_alphabar(steps)).float()
        betas = 1.0 - ab[1:] / ab[:-1]
        return cls(steps=steps, alphabar=ab, betas=betas, alphas=1.0 - betas)


def add_noise(
    z0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Forward process: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    t = torch.as_tensor(t)
    if torch.any(t < 1) or torch.any(t > schedule.steps):
        raise ValueError(f"timestep out of range [1, {schedule.steps}]")
    ab = schedule.alphabar[t].to(z0.dtype)
    while ab.dim() < z0.dim():
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def timestep_embedding(t: torch.Tensor, dim: int = 128) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().unsqueeze(-1) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


@dataclass
class DenoiserConfig:
    latent_dim: int = 16
    cond_dim: int = 768
    hidden: int = 1792
    layers: int = 9
    time_dim: int = 128

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")

    @classmethod
    def desk(cls, cond_dim: int = 128) -> "DenoiserConfig":
        return cls(cond_dim=cond_dim, hidden=256, layers=3)


class AdaLNBlock(nn.Module):
    """Residual MLP block modulated by shift/scale/gate from the condition."""

    def __init__(self, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False)
        self.fc1 = nn.Linear(hidden, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.ada = nn.Linear(hidden, 3 * hidden)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, h: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        shift, scale, gate = self.ada(F.silu(y)).chunk(3, dim=-1)
        x = self.norm(h) * (1 + scale) + shift
        x = self.fc2(F.silu(self.fc1(x)))
        return h + gate * x


class DiffusionHead(nn.Module):
    """Noise predictor for one latent vector, conditioned via AdaLN.

    The final projection and all modulation layers are zero-initialized,
    so an untrained head predicts zero noise.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.latent_dim, cfg.hidden)
        self.cond_proj = nn.Linear(cfg.cond_dim, cfg.hidden)
        self.time_proj = nn.Linear(cfg.time_dim, cfg.hidden)
        self.null_embed = nn.Parameter(torch.zeros(cfg.hidden))
        self.blocks = nn.ModuleList(AdaLNBlock(cfg.hidden) for _ in range(cfg.layers))
        self.out_norm = nn.LayerNorm(cfg.hidden, elementwise_affine=False)
        self.out_ada = nn.Linear(cfg.hidden, 2 * cfg.hidden)
        self.out_proj = nn.Linear(cfg.hidden, cfg.latent_dim)
        nn.init.zeros_(self.out_ada.weight)
        nn.init.zeros_(self.out_ada.bias)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        cond: torch.Tensor,
        text_null: torch.Tensor | bool = False,
    ) -> torch.Tensor:
        """Predict the noise in z_t; text_null marks unconditioned samples."""
        temb = timestep_embedding(t, self.cfg.time_dim).to(cond.dtype)
        y = self.cond_proj(cond) + self.time_proj(temb)
        if isinstance(text_null, bool):
            if text_null:
                y = y + self.null_embed
        else:
            y = y + text_null.to(y.dtype).unsqueeze(-1) * self.null_embed
        h = self.in_proj(z_t)
        for block in self.blocks:
            h = block(h, y)
        shift, scale = self.out_ada(F.silu(y)).chunk(2, dim=-1)
        out = self.out_proj(self.out_norm(h) * (1 + scale) + shift)
        if not torch.isfinite(out).all():
            raise RuntimeError("non-finite denoiser output")
        return out


def diffusion_loss(
    head: DiffusionHead,
    z0: torch.Tensor,
    cond: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    text_null: torch.Tensor | bool = False,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Per-dimension MSE between true and predicted noise at a random timestep."""
    batch = z0.shape[:-1]
    if t is None:
        t = torch.randint(1, schedule.steps + 1, batch, generator=generator)
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = add_noise(z0, t, eps, schedule)
    pred = head(z_t, t, cond, text_null=text_null)
    return ((eps - pred) ** 2).mean()


def cfg_combine(eps_u: torch.Tensor, eps_c: torch.Tensor, scale: float) -> torch.Tensor:
    """Guided noise eps_u + s (eps_c - eps_u); bit-exact passthrough at s in {0, 1}."""
    if scale == 1.0:
        return eps_c
    if scale == 0.0:
        return eps_u
    return eps_u + scale * (eps_c - eps_u)


@torch.no_grad()
def sample_latent(
    head: DiffusionHead,
    cond: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    cfg_scale: float = 1.0,
    uncond: torch.Tensor | None = None,
    text_null: torch.Tensor | bool = False,
    num_steps: int | None = None,
) -> torch.Tensor:
    """Ancestral DDPM sampling of latents, shape matching cond's batch x latent_dim.

    With cfg_scale != 1 an unconditional prediction (null-text condition)
    is combined with the conditional one at every step. text_null applies
    to the primary branch, for sampling without any text conditioning.
    num_steps < schedule.steps subsamples the timestep ladder (coarse
    ancestral sampling, used by the training-time replacement pass).
    """
    batch = cond.shape[:-1]
    use_cfg = cfg_scale != 1.0 and uncond is not None
    if num_steps is None or num_steps >= schedule.steps:
        timesteps = list(range(schedule.steps, 0, -1))
    else:
        timesteps = sorted({int(t) for t in np.linspace(schedule.steps, 1, num_steps)}, reverse=True)
    z = torch.randn(*batch, head.cfg.latent_dim, generator=generator, dtype=torch.float32)
    for i, step in enumerate(timesteps):
        t = torch.full(batch, step, dtype=torch.long)
        eps_c = head(z, t, cond, text_null=text_null)
        if use_cfg:
            eps_u = head(z, t, uncond, text_null=True)
            eps_hat = cfg_combine(eps_u, eps_c, cfg_scale)
        else:
            eps_hat = eps_c
        prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        ab_t = schedule.alphabar[step]
        ab_prev = schedule.alphabar[prev]
        beta_eff = 1.0 - ab_t / ab_prev
        mean = (z - beta_eff / torch.sqrt(1.0 - ab_t) * eps_hat) / torch.sqrt(ab_t / ab_prev)
        if prev > 0:
            var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)
            noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
            z = mean + torch.sqrt(var) * noise
        else:
            z = mean
        if not torch.isfinite(z).all():
            raise RuntimeError(f"non-finite latent at denoising step {step}")
    return z
