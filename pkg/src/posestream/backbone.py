"""Causal Transformer over [text, previous latents, current latents] sequences.

Emits one condition vector per next-latent slot for the diffusion head:
the feature at the position preceding each current latent, plus one past
the final latent that predicts the end marker.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .diffusion import DenoiserConfig, DiffusionHead

SEG_TEXT, SEG_PREV, SEG_CUR = 0, 1, 2


@dataclass
class TransformerConfig:
    layers: int = 12
    heads: int = 12
    dim: int = 768
    block_size: int = 78
    text_dim: int = 64
    latent_dim: int = 16

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if (self.dim // self.heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary embedding")

    @classmethod
    def desk(cls) -> "TransformerConfig":
        return cls(layers=4, heads=4, dim=128)


@dataclass
class SequencePack:
    """One model input: text embedding, optional history latents, current latents."""

    text: torch.Tensor  # (text_dim,)
    prev: torch.Tensor  # (k, latent_dim), k may be 0
    cur: torch.Tensor  # (n, latent_dim), n may be 0
    text_null: bool = False

    @property
    def length(self) -> int:
        return 1 + self.prev.shape[0] + self.cur.shape[0]

    @property
    def cond_positions(self) -> list[int]:
        # slot j predicts current latent j+1 (the last slot predicts the end latent)
        k, n = self.prev.shape[0], self.cur.shape[0]
        return list(range(k, k + n + 1))


def rotary_tables(length: int, head_dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    half = head_dim // 2
    freqs = 10000.0 ** (-torch.arange(half, dtype=torch.float32) / half)
    angles = torch.arange(length, dtype=torch.float32).unsqueeze(1) * freqs
    return torch.cos(angles), torch.sin(angles)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, H, T, head_dim)
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    cos = cos.view(1, 1, *cos.shape)
    sin = sin.view(1, 1, *sin.shape)
    return torch.cat([x1 * cos + x2 * sin, -x1 * sin + x2 * cos], dim=-1)


def qk_normalize(
    q: torch.Tensor, k: torch.Tensor, eps: float = 1e-8
) -> tuple[torch.Tensor, torch.Tensor]:
    """L2-normalize per-head query and key vectors (learned temperature applied by caller)."""
    q = q / q.norm(dim=-1, keepdim=True).clamp_min(eps)
    k = k / k.norm(dim=-1, keepdim=True).clamp_min(eps)
    return q, k


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.dim // cfg.heads
        self.qkv = nn.Linear(cfg.dim, 3 * cfg.dim, bias=False)
        self.proj = nn.Linear(cfg.dim, cfg.dim, bias=False)
        # per-head logit temperature for the normalized q.k products
        self.log_tau = nn.Parameter(torch.full((cfg.heads, 1, 1), math.log(math.sqrt(self.head_dim))))

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        q, k = qk_normalize(q, k)
        q = q * torch.exp(self.log_tau)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True, scale=1.0)
        return self.proj(y.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.norm1 = nn.RMSNorm(cfg.dim)
        self.attn = CausalSelfAttention(cfg)
        self.norm2 = nn.RMSNorm(cfg.dim)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.dim, 4 * cfg.dim, bias=False),
            nn.SiLU(),
            nn.Linear(4 * cfg.dim, cfg.dim, bias=False),
        )

    def forward(self, x, cos, sin):
        x = x + self.attn(self.norm1(x), cos, sin)
        return x + self.mlp(self.norm2(x))


class Backbone(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.norm_out = nn.RMSNorm(cfg.dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] > self.cfg.block_size:
            raise ValueError(f"sequence length {x.shape[1]} exceeds block size {self.cfg.block_size}")
        cos, sin = rotary_tables(x.shape[1], self.cfg.dim // self.cfg.heads)
        for block in self.blocks:
            x = block(x, cos, sin)
        return self.norm_out(x)


class ArModel(nn.Module):
    """Input projections + causal backbone + diffusion head, one checkpointable unit."""

    def __init__(self, cfg: TransformerConfig, head_cfg: DenoiserConfig | None = None):
        super().__init__()
        if head_cfg is None:
            head_cfg = DenoiserConfig(cond_dim=cfg.dim, latent_dim=cfg.latent_dim)
        if head_cfg.cond_dim != cfg.dim or head_cfg.latent_dim != cfg.latent_dim:
            raise ValueError("denoiser config does not match backbone dims")
        self.cfg = cfg
        self.text_proj = nn.Linear(cfg.text_dim, cfg.dim)
        self.latent_proj = nn.Linear(cfg.latent_dim, cfg.dim)
        self.segment_embed = nn.Embedding(3, cfg.dim)
        self.backbone = Backbone(cfg)
        self.head = DiffusionHead(head_cfg)

    def embed_inputs(self, pack: SequencePack) -> torch.Tensor:
        """Project a pack into backbone features of shape (length, dim)."""
        if pack.length > self.cfg.block_size:
            raise ValueError(f"pack length {pack.length} exceeds block size {self.cfg.block_size}")
        parts = [self.text_proj(pack.text.view(1, -1)) + self.segment_embed.weight[SEG_TEXT]]
        if pack.prev.shape[0]:
            parts.append(self.latent_proj(pack.prev) + self.segment_embed.weight[SEG_PREV])
        if pack.cur.shape[0]:
            parts.append(self.latent_proj(pack.cur) + self.segment_embed.weight[SEG_CUR])
        return torch.cat(parts, dim=0)

    def backbone_forward(self, pack: SequencePack) -> torch.Tensor:
        """Condition vectors for every next-latent slot, shape (n+1, dim)."""
        feats = self.backbone(self.embed_inputs(pack).unsqueeze(0)).squeeze(0)
        return feats[pack.cond_positions]

    def features(self, tokens: torch.Tensor) -> torch.Tensor:
        """Backbone features for pre-embedded, right-padded batches (B, L, dim)."""
        return self.backbone(tokens)


def save_ar(path: str | Path, model: ArModel, extra: dict | None = None) -> None:
    config = {"transformer": asdict(model.cfg), "denoiser": asdict(model.head.cfg)}
    if extra:
        config.update(extra)
    tensors = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    ckpt.save_checkpoint(path, ckpt.AR_MAGIC, config, tensors)


def load_ar(path: str | Path) -> tuple[ArModel, dict]:
    config, tensors = ckpt.load_checkpoint(path, ckpt.AR_MAGIC)
    model = ArModel(TransformerConfig(**config["transformer"]), DenoiserConfig(**config["denoiser"]))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    model.eval()
    return model, config
