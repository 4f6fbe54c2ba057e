"""Causal temporal autoencoder: continuous motion compression with streaming decode.

Every convolution is left-padded so a frame only ever depends on frames
before it; the decoder can therefore emit frames latent-by-latent with a
small rolling context buffer instead of waiting for the full sequence.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .motion import POSE_DIM

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0
SIGMA_STAR_FLOOR = 1e-8


def causal_pad_amount(kernel: int, stride: int = 1, dilation: int = 1) -> int:
    """Frames of left padding that make a temporal conv causal."""
    if kernel < 1 or stride < 1 or dilation < 1:
        raise ValueError("kernel, stride and dilation must be >= 1")
    pad = (kernel - 1) * dilation + (1 - stride)
    if pad < 0:
        raise ValueError(f"invalid conv spec: negative causal padding {pad}")
    return pad


@dataclass
class TaeConfig:
    latent_dim: int = 16
    hidden: int = 1024
    downsample: int = 4  # fixed by the two stride-2 encoder stages
    root_weight: float = 7.0
    crop: int = 64

    def __post_init__(self):
        if self.downsample != 4:
            raise ValueError("architecture has two stride-2 stages; downsample must be 4")
        if self.latent_dim > self.hidden:
            raise ValueError("latent_dim must not exceed hidden size")

    @classmethod
    def desk(cls) -> "TaeConfig":
        return cls(latent_dim=16, hidden=128)


@dataclass
class GaussianParams:
    """Per-latent Gaussian parameters from the encoder, shape (..., n, latent_dim)."""

    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ValueError("mu and log_var must have equal shapes")


def reparameterize(params: GaussianParams, generator: torch.Generator) -> torch.Tensor:
    """z = mu + sigma * eps with eps drawn from the provided generator."""
    sigma = torch.exp(0.5 * params.log_var.clamp(LOGVAR_MIN, LOGVAR_MAX))
    eps = torch.randn(params.mu.shape, generator=generator, dtype=params.mu.dtype)
    return params.mu + sigma * eps


class CausalConv1d(nn.Module):
    """Conv1d with implicit left zero-padding; supports chunked streaming for stride 1."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.left_pad = causal_pad_amount(kernel, stride, dilation)
        self.context = (kernel - 1) * dilation
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, stride=stride, dilation=dilation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.pad(x, (self.left_pad, 0)))

    def init_state(self, batch: int) -> torch.Tensor:
        w = self.conv.weight
        return w.new_zeros(batch, self.conv.in_channels, self.context)

    def forward_stream(self, x: torch.Tensor, state: torch.Tensor):
        if self.conv.stride[0] != 1:
            raise RuntimeError("streaming only supported for stride-1 convs")
        joined = torch.cat([state, x], dim=2)
        y = self.conv(joined)
        new_state = joined[:, :, joined.shape[2] - self.context :] if self.context else state
        return y, new_state


class CausalResBlock(nn.Module):
    """ReLU -> dilated k3 conv -> ReLU -> k1 conv with a residual connection."""

    def __init__(self, channels: int, dilation: int):
        super().__init__()
        self.conv1 = CausalConv1d(channels, channels, 3, dilation=dilation)
        self.conv2 = CausalConv1d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.relu(x))
        h = self.conv2(F.relu(h))
        return x + h

    def init_state(self, batch: int) -> list[torch.Tensor]:
        return [self.conv1.init_state(batch), self.conv2.init_state(batch)]

    def forward_stream(self, x: torch.Tensor, state: list[torch.Tensor]):
        h, s1 = self.conv1.forward_stream(F.relu(x), state[0])
        h, s2 = self.conv2.forward_stream(F.relu(h), state[1])
        return x + h, [s1, s2]


RES_DILATIONS = (9, 3, 1)


class Encoder(nn.Module):
    """Two stride-2 downsampling stages with dilated causal residual stacks."""

    def __init__(self, cfg: TaeConfig):
        super().__init__()
        h = cfg.hidden
        self.conv_in = CausalConv1d(POSE_DIM, h, 3)
        self.stages = nn.ModuleList()
        for _ in range(2):
            stage = nn.ModuleDict(
                {
                    "down": CausalConv1d(h, h, 4, stride=2),
                    "res": nn.ModuleList([CausalResBlock(h, d) for d in RES_DILATIONS]),
                }
            )
            self.stages.append(stage)
        self.conv_out = CausalConv1d(h, h, 3)
        self.adapter = nn.Linear(h, 2 * cfg.latent_dim)

    def forward(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # frames: (B, T, D) -> (mu, log_var) each (B, T/4, latent_dim)
        x = frames.transpose(1, 2)
        x = F.relu(self.conv_in(x))
        for stage in self.stages:
            x = stage["down"](x)
            for block in stage["res"]:
                x = block(x)
        x = self.conv_out(x)
        params = self.adapter(x.transpose(1, 2))
        mu, log_var = params.chunk(2, dim=-1)
        return mu, log_var.clamp(LOGVAR_MIN, LOGVAR_MAX)


class Decoder(nn.Module):
    """Mirror of the encoder: nearest ×2 upsampling between causal residual stacks."""

    def __init__(self, cfg: TaeConfig):
        super().__init__()
        h = cfg.hidden
        self.adapter = nn.Linear(cfg.latent_dim, h)
        self.conv_in = CausalConv1d(h, h, 3)
        self.stages = nn.ModuleList()
        for _ in range(2):
            stage = nn.ModuleDict(
                {
                    "res": nn.ModuleList([CausalResBlock(h, d) for d in RES_DILATIONS]),
                    "up_conv": CausalConv1d(h, h, 3),
                }
            )
            self.stages.append(stage)
        self.conv_mid = CausalConv1d(h, h, 3)
        self.conv_out = CausalConv1d(h, POSE_DIM, 3)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # z: (B, n, latent_dim) -> frames (B, 4n, D)
        x = self.adapter(z).transpose(1, 2)
        x = F.relu(self.conv_in(x))
        for stage in self.stages:
            for block in stage["res"]:
                x = block(x)
            x = torch.repeat_interleave(x, 2, dim=2)
            x = stage["up_conv"](x)
        x = F.relu(self.conv_mid(x))
        x = self.conv_out(x)
        return x.transpose(1, 2)

    def init_state(self, batch: int) -> list:
        state = [self.conv_in.init_state(batch)]
        for stage in self.stages:
            state.append([b.init_state(batch) for b in stage["res"]])
            state.append(stage["up_conv"].init_state(batch))
        state.append(self.conv_mid.init_state(batch))
        state.append(self.conv_out.init_state(batch))
        return state

    def forward_stream(self, z: torch.Tensor, state: list):
        new_state = []
        x = self.adapter(z).transpose(1, 2)
        x, s = self.conv_in.forward_stream(x, state[0])
        new_state.append(s)
        x = F.relu(x)
        i = 1
        for stage in self.stages:
            block_states = []
            for block, bs in zip(stage["res"], state[i]):
                x, nbs = block.forward_stream(x, bs)
                block_states.append(nbs)
            new_state.append(block_states)
            i += 1
            x = torch.repeat_interleave(x, 2, dim=2)
            x, s = stage["up_conv"].forward_stream(x, state[i])
            new_state.append(s)
            i += 1
        x, s = self.conv_mid.forward_stream(x, state[i])
        new_state.append(s)
        i += 1
        x = F.relu(x)
        x, s = self.conv_out.forward_stream(x, state[i])
        new_state.append(s)
        return x.transpose(1, 2), new_state


@dataclass
class DecoderState:
    """Rolling causal-context buffers plus the index of the next expected latent."""

    buffers: list = field(default_factory=list)
    index: int = 0


class CausalTAE(nn.Module):
    def __init__(self, cfg: TaeConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m: nn.Module) -> None:
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    def encode(self, frames: torch.Tensor, pad_partial: bool = False) -> GaussianParams:
        """Encode (B, T, D) or (T, D) frames into per-latent Gaussian parameters.

        T must be a multiple of the downsampling rate; with pad_partial the
        tail is extended by repeating the last frame (inference only).
        """
        squeeze = frames.dim() == 2
        if squeeze:
            frames = frames.unsqueeze(0)
        l = self.cfg.downsample
        t = frames.shape[1]
        if t % l != 0:
            if not pad_partial:
                raise ValueError(f"frame count {t} not divisible by downsample rate {l}")
            reps = l - t % l
            frames = torch.cat([frames, frames[:, -1:].expand(-1, reps, -1)], dim=1)
        mu, log_var = self.encoder(frames)
        if not torch.isfinite(mu).all() or not torch.isfinite(log_var).all():
            raise RuntimeError("non-finite encoder activations")
        if squeeze:
            mu, log_var = mu.squeeze(0), log_var.squeeze(0)
        return GaussianParams(mu, log_var)

    def decode_full(self, z: torch.Tensor) -> torch.Tensor:
        """Decode (B, n, latent_dim) or (n, latent_dim) latents into n*4 frames."""
        squeeze = z.dim() == 2
        if squeeze:
            z = z.unsqueeze(0)
        if z.shape[1] < 1:
            raise ValueError("need at least one latent")
        frames = self.decoder(z)
        return frames.squeeze(0) if squeeze else frames

    def init_decoder_state(self, batch: int = 1) -> DecoderState:
        return DecoderState(self.decoder.init_state(batch))

    def decode_step(
        self, z_i: torch.Tensor, state: DecoderState, index: int | None = None
    ) -> tuple[torch.Tensor, DecoderState]:
        """Decode the next latent in order; returns (downsample) new frames and new state."""
        if index is not None and index != state.index:
            raise ValueError(f"out-of-order latent: expected index {state.index}, got {index}")
        if z_i.dim() == 1:
            z_i = z_i.view(1, 1, -1)
        elif z_i.dim() == 2:
            z_i = z_i.unsqueeze(0)
        frames, buffers = self.decoder.forward_stream(z_i, state.buffers)
        return frames.squeeze(0), DecoderState(buffers, state.index + z_i.shape[1])


def sigma_star_sq(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared reconstruction error, floored so its log stays finite."""
    if x.shape != x_hat.shape:
        raise ValueError("shape mismatch")
    return ((x - x_hat) ** 2).mean().clamp_min(SIGMA_STAR_FLOOR)


def tae_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    params: GaussianParams,
    root_weight: float,
    root_dims: int = 8,
    var_star: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Gaussian-likelihood reconstruction + KL + root-channel emphasis.

    The per-batch noise level sigma* is computed analytically from the
    current reconstruction error and treated as a constant (detached)
    when differentiating; pass var_star to pin it explicitly. Sums run
    over dims and frames, averaged over the batch; the root term
    re-weights the first ``root_dims`` channels.
    """
    if x.dim() == 2:
        x, x_hat = x.unsqueeze(0), x_hat.unsqueeze(0)
    batch = x.shape[0]
    if var_star is None:
        var_star = sigma_star_sq(x, x_hat).detach()
    log_sigma_star = 0.5 * torch.log(var_star)
    sq = (x - x_hat) ** 2
    recon = (sq / (2 * var_star) + log_sigma_star).sum() / batch
    root_sq = sq[..., :root_dims]
    root = (root_sq / (2 * var_star) + log_sigma_star).sum() / batch
    mu, log_var = params.mu, params.log_var.clamp(LOGVAR_MIN, LOGVAR_MAX)
    kl = 0.5 * (mu**2 + torch.exp(log_var) - log_var - 1).sum() / batch
    total = recon + kl + root_weight * root
    components = {"recon": recon, "kl": kl, "root": root}
    if not torch.isfinite(total):
        raise RuntimeError("non-finite loss components")
    return total, components


def save_tae(path: str | Path, model: CausalTAE, extra: dict | None = None) -> None:
    config = {"tae": asdict(model.cfg)}
    if extra:
        config.update(extra)
    tensors = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    ckpt.save_checkpoint(path, ckpt.TAE_MAGIC, config, tensors)


def load_tae(path: str | Path) -> tuple[CausalTAE, dict]:
    config, tensors = ckpt.load_checkpoint(path, ckpt.TAE_MAGIC)
    model = CausalTAE(TaeConfig(**config["tae"]))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    model.eval()
    return model, config
