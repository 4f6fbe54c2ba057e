"""Training loops: autoencoder stage and autoregressive stage.

The autoregressive stage combines two strategies: mixed batches (atomic
text-motion pairs plus contextual pairs with history latents) and a
two-forward pass where a scheduled fraction of teacher-forced inputs is
swapped for the model's own coarse samples before the gradient pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import ArModel, SequencePack, TransformerConfig
from .diffusion import DenoiserConfig, NoiseSchedule, diffusion_loss, sample_latent
from .engine import compute_end_latent, calibrate_stop_threshold
from .synth import DatasetIndex, embed_text, null_text_embedding
from .tae import CausalTAE, GaussianParams, TaeConfig, reparameterize, save_tae, tae_loss
from .backbone import save_ar


@dataclass
class TrainConfig:
    tae_batch: int = 128
    ar_batch: int = 256
    tae_lr: float = 5e-5
    tae_lr_final: float = 2.5e-6
    tae_final_frac: float = 0.05  # trailing share of steps at the reduced rate
    tae_steps: int = 2_000_000
    ar_lr: float = 1e-4
    ar_warmup: int = 10_000
    ar_steps: int = 100_000
    adam_betas: tuple[float, float] = (0.9, 0.99)
    min_len: int = 40
    max_len: int = 300
    text_drop: float = 0.10
    crop: int = 64
    pass1_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.ar_warmup >= self.ar_steps:
            raise ValueError("warmup must be shorter than total steps")
        if min(self.tae_lr, self.ar_lr) <= 0:
            raise ValueError("learning rates must be positive")

    @classmethod
    def desk(cls, seed: int = 0) -> "TrainConfig":
        # higher rate than the full-scale recipe: the reduced models need it
        # to converge within the desk step budget
        return cls(
            tae_batch=16,
            ar_batch=8,
            tae_steps=20_000,
            ar_steps=10_000,
            ar_warmup=1_000,
            tae_lr=2e-4,
            ar_lr=3e-4,
            seed=seed,
        )


def replacement_ratio(t: int, total: int) -> float:
    """Cosine ramp for the fraction of inputs replaced by model samples."""
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return 0.5 * (1.0 - math.cos(math.pi * t / total))


def tae_lr_at(step: int, cfg: TrainConfig) -> float:
    phase2_start = int(cfg.tae_steps * (1.0 - cfg.tae_final_frac))
    return cfg.tae_lr if step < phase2_start else cfg.tae_lr_final


def ar_lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.ar_warmup:
        return cfg.ar_lr * (step + 1) / cfg.ar_warmup
    progress = (step - cfg.ar_warmup) / max(1, cfg.ar_steps - cfg.ar_warmup)
    return cfg.ar_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class TrainSample:
    text_emb: torch.Tensor  # (text_dim,)
    prev: torch.Tensor  # (k, latent_dim)
    cur: torch.Tensor  # (n, latent_dim)
    text_null: bool = False


class LatentCache:
    """Frozen-encoder Gaussian parameters per dataset motion; samples stay fresh."""

    def __init__(self, index: DatasetIndex, tae: CausalTAE):
        self.params: dict[str, GaussianParams] = {}
        tae.eval()
        with torch.no_grad():
            files = set()
            for e in index.entries:
                files.add(e.file)
                if e.prev_file:
                    files.add(e.prev_file)
            for rel in sorted(files):
                frames = torch.from_numpy(index.load_motion(rel).frames)
                self.params[rel] = tae.encode(frames, pad_partial=True)

    def sample(self, rel: str, generator: torch.Generator) -> torch.Tensor:
        return reparameterize(self.params[rel], generator)


def mixed_batch(
    index: DatasetIndex,
    cache: LatentCache,
    batch_size: int,
    rng: np.random.Generator,
    generator: torch.Generator,
    text_drop: float = 0.10,
) -> list[TrainSample]:
    """Draw atomic and contextual samples; a fraction of texts becomes the null text."""
    if len(index) == 0:
        raise ValueError("empty dataset")
    out = []
    latent_dim = next(iter(cache.params.values())).mu.shape[-1]
    for i in rng.integers(0, len(index), size=batch_size):
        e = index.entries[int(i)]
        cur = cache.sample(e.file, generator)
        if e.prev_file:
            prev = cache.sample(e.prev_file, generator)
        else:
            prev = torch.zeros(0, latent_dim)
        dropped = bool(rng.random() < text_drop)
        text = "" if dropped else e.text
        out.append(
            TrainSample(torch.from_numpy(embed_text(text)), prev, cur, text_null=dropped)
        )
    return out


def _collate(model: ArModel, samples: list[TrainSample], end_latent: torch.Tensor):
    """Embed packs, right-pad, and flatten per-slot conditions/targets.

    Right padding is safe under a causal mask: no real position ever
    attends to a later (padded) one.
    """
    packs = [SequencePack(s.text_emb, s.prev, s.cur, s.text_null) for s in samples]
    embeds = [model.embed_inputs(p) for p in packs]
    max_len = max(e.shape[0] for e in embeds)
    tokens = torch.zeros(len(samples), max_len, embeds[0].shape[-1])
    for b, e in enumerate(embeds):
        tokens[b, : e.shape[0]] = e
    feats = model.features(tokens)
    conds, targets, nulls = [], [], []
    for b, (pack, s) in enumerate(zip(packs, samples)):
        pos = pack.cond_positions
        conds.append(feats[b, pos])
        targets.append(torch.cat([s.cur, end_latent.view(1, -1)], dim=0))
        nulls.append(torch.full((len(pos),), s.text_null, dtype=torch.bool))
    return torch.cat(conds), torch.cat(targets), torch.cat(nulls)


def two_forward_step(
    model: ArModel,
    schedule: NoiseSchedule,
    samples: list[TrainSample],
    end_latent: torch.Tensor,
    gamma: float,
    rng: np.random.Generator,
    generator: torch.Generator,
    pass1_steps: int = 10,
) -> torch.Tensor:
    """Replace a Bernoulli(gamma) subset of current-latent inputs with the model's
    own samples (gradient-free pass), then compute the denoising loss on the
    hybrid input against the original targets."""
    replace_masks = [rng.random(s.cur.shape[0]) < gamma for s in samples]
    if any(m.any() for m in replace_masks):
        with torch.no_grad():
            packs = [SequencePack(s.text_emb, s.prev, s.cur, s.text_null) for s in samples]
            embeds = [model.embed_inputs(p) for p in packs]
            max_len = max(e.shape[0] for e in embeds)
            tokens = torch.zeros(len(samples), max_len, embeds[0].shape[-1])
            for b, e in enumerate(embeds):
                tokens[b, : e.shape[0]] = e
            feats = model.features(tokens)
            conds, owners = [], []
            for b, (pack, mask) in enumerate(zip(packs, replace_masks)):
                pos = pack.cond_positions
                for j in np.flatnonzero(mask):
                    # slot j conditions the prediction of current latent j
                    conds.append(feats[b, pos[int(j)]])
                    owners.append((b, int(j)))
            sampled = sample_latent(
                model.head,
                torch.stack(conds),
                schedule,
                generator,
                text_null=torch.tensor([samples[b].text_null for b, _ in owners]),
                num_steps=pass1_steps,
            )
        hybrid = []
        for b, s in enumerate(samples):
            cur = s.cur.clone()
            for row, (ob, oj) in enumerate(owners):
                if ob == b:
                    cur[oj] = sampled[row]
            hybrid.append(TrainSample(s.text_emb, s.prev, cur, s.text_null))
    else:
        hybrid = samples

    conds, targets, nulls = _collate(model, hybrid, end_latent)
    # targets always come from the untouched samples (identical latents by construction)
    orig_targets = torch.cat(
        [torch.cat([s.cur, end_latent.view(1, -1)], dim=0) for s in samples]
    )
    return diffusion_loss(
        model.head, orig_targets, conds, schedule, generator, text_null=nulls
    )


def train_tae(
    index: DatasetIndex,
    cfg: TrainConfig,
    tae_cfg: TaeConfig,
    out_path: str | Path,
    log_every: int = 200,
    log_cb=None,
) -> Path:
    """Optimize the causal autoencoder on random crops; writes checkpoint + loss CSV."""
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)

    files = set()
    for e in index.entries:
        files.add(e.file)
        if e.prev_file:
            files.add(e.prev_file)
    clips = []
    for rel in sorted(files):
        frames = index.load_motion(rel).frames
        if len(frames) >= cfg.crop:
            clips.append(frames)
    if not clips:
        raise ValueError("dataset has no sequences of at least crop length")

    model = CausalTAE(tae_cfg)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.tae_lr, betas=cfg.adam_betas)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_path.with_suffix(".loss.csv")
    rows = ["step,total,recon,kl,root"]

    n_val = max(1, min(8, len(clips) // 10)) if len(clips) > 1 else 1
    val_clips = clips[:n_val]

    def sample_batch(source, size):
        batch = np.empty((size, cfg.crop, clips[0].shape[1]), dtype=np.float32)
        for b in range(size):
            frames = source[int(rng.integers(len(source)))]
            start = int(rng.integers(0, len(frames) - cfg.crop + 1))
            batch[b] = frames[start : start + cfg.crop]
        return torch.from_numpy(batch)

    val_losses = []
    for step in range(cfg.tae_steps):
        for group in opt.param_groups:
            group["lr"] = tae_lr_at(step, cfg)
        x = sample_batch(clips, cfg.tae_batch)
        mu, log_var = model.encoder(x)
        params = GaussianParams(mu, log_var)
        z = reparameterize(params, generator)
        x_hat = model.decoder(z)
        loss, parts = tae_loss(x, x_hat, params, tae_cfg.root_weight)
        if not torch.isfinite(loss):
            raise RuntimeError(f"training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == cfg.tae_steps - 1:
            rows.append(
                f"{step},{loss.item():.6g},{parts['recon'].item():.6g},"
                f"{parts['kl'].item():.6g},{parts['root'].item():.6g}"
            )
            if log_cb:
                log_cb(step, loss.item(), parts)
        if step % max(1, cfg.tae_steps // 20) == 0:
            with torch.no_grad():
                xv = sample_batch(val_clips, min(len(val_clips), 8))
                mu_v, lv_v = model.encoder(xv)
                zv = mu_v
                vloss, _ = tae_loss(xv, model.decoder(zv), GaussianParams(mu_v, lv_v), tae_cfg.root_weight)
            val_losses.append(vloss.item())

    model.eval()
    threshold = calibrate_stop_threshold(model, [torch.from_numpy(c) for c in clips[:64]])
    end = compute_end_latent(model)
    save_tae(
        out_path,
        model,
        extra={
            "stop_threshold": threshold,
            "end_latent": end.tolist(),
            "val_losses": val_losses,
        },
    )
    csv_path.write_text("\n".join(rows) + "\n")
    return out_path


def train_ar(
    index: DatasetIndex,
    tae: CausalTAE,
    cfg: TrainConfig,
    tr_cfg: TransformerConfig,
    head_cfg: DenoiserConfig | None = None,
    out_path: str | Path = "ar.msta",
    log_every: int = 200,
    log_cb=None,
) -> Path:
    """Optimize the autoregressive generator against frozen-encoder latents."""
    rng = np.random.default_rng(cfg.seed + 1)
    generator = torch.Generator().manual_seed(cfg.seed + 1)
    torch.manual_seed(cfg.seed + 1)

    tae.eval()
    cache = LatentCache(index, tae)
    end_latent = compute_end_latent(tae)

    model = ArModel(tr_cfg, head_cfg)
    model.train()
    schedule = NoiseSchedule.cosine(50)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.ar_lr, betas=cfg.adam_betas)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = ["step,diff_loss"]

    for step in range(cfg.ar_steps):
        for group in opt.param_groups:
            group["lr"] = ar_lr_at(step, cfg)
        gamma = replacement_ratio(step, cfg.ar_steps)
        samples = mixed_batch(index, cache, cfg.ar_batch, rng, generator, cfg.text_drop)
        loss = two_forward_step(
            model, schedule, samples, end_latent, gamma, rng, generator, cfg.pass1_steps
        )
        if not torch.isfinite(loss):
            raise RuntimeError(f"training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == cfg.ar_steps - 1:
            rows.append(f"{step},{loss.item():.6g}")
            if log_cb:
                log_cb(step, loss.item())

    model.eval()
    save_ar(out_path, model, extra={"end_latent": end_latent.tolist()})
    out_path.with_suffix(".loss.csv").write_text("\n".join(rows) + "\n")
    return out_path
