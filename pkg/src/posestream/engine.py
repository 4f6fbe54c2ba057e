"""Online multi-round generation: sample a latent, decode it immediately,
watch for the continuous stop marker, roll context between prompts.

A session owns all mutable state (history latents, decoder buffers, root
integration, RNG); model weights are shared and immutable, so any number
of sessions can run concurrently.
"""

from __future__ import annotations

import time
import weakref
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import ArModel, SequencePack
from .diffusion import NoiseSchedule, sample_latent
from .motion import POSE_DIM, RootState, SkeletonDef, advance_root, default_skeleton, forward_kinematics
from .synth import embed_text, null_text_embedding
from .tae import CausalTAE, DecoderState

_END_LATENT_CACHE: "weakref.WeakKeyDictionary[CausalTAE, torch.Tensor]" = weakref.WeakKeyDictionary()


def compute_end_latent(tae: CausalTAE, clip_frames: int = 8) -> torch.Tensor:
    """Mean of the final latent of an encoded all-zero clip; cached per model."""
    cached = _END_LATENT_CACHE.get(tae)
    if cached is not None:
        return cached
    clip = torch.zeros(clip_frames, POSE_DIM)
    with torch.no_grad():
        params = tae.encode(clip)
    end = params.mu[-1].detach().clone()
    _END_LATENT_CACHE[tae] = end
    return end


@dataclass
class StopCriterion:
    """Euclidean proximity to the reference end latent."""

    reference: torch.Tensor
    threshold: float

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")


def should_stop(latent: torch.Tensor, criterion: StopCriterion) -> bool:
    return bool(torch.linalg.vector_norm(latent - criterion.reference) < criterion.threshold)


def calibrate_stop_threshold(
    tae: CausalTAE, motions: list[torch.Tensor], zero_frames: int = 4
) -> float:
    """Geometric midpoint between end-marker distances and ordinary latent distances.

    (a) encode each motion with a zero-pose window appended and measure the
    final latent's distance to the reference; (b) measure distances from the
    reference to the motions' own latents. The threshold sits midway in
    log space between the medians of the two populations.
    """
    ref = compute_end_latent(tae)
    near, far = [], []
    with torch.no_grad():
        for frames in motions:
            frames = frames.float()
            ended = torch.cat([frames, torch.zeros(zero_frames, frames.shape[1])], dim=0)
            mu_end = tae.encode(ended, pad_partial=True).mu[-1]
            near.append(torch.linalg.vector_norm(mu_end - ref).item())
            mu = tae.encode(frames, pad_partial=True).mu
            far.extend(torch.linalg.vector_norm(mu - ref, dim=-1).tolist())
    log_near = np.log(np.maximum(np.median(near), 1e-9))
    log_far = np.log(np.maximum(np.median(far), 1e-9))
    return float(np.exp(0.5 * (log_near + log_far)))


@dataclass
class GenerationConfig:
    cfg_scale: float = 4.0
    stop_threshold: float = 1.0
    max_latents: int = 75
    sample_steps: int = 50
    reset_decoder_on_prompt: bool = False


@dataclass
class Segment:
    text: str
    latents: torch.Tensor
    n_frames: int


@dataclass
class GenerationSession:
    session_id: int
    text: str
    text_emb: torch.Tensor
    config: GenerationConfig
    generator: torch.Generator
    history: torch.Tensor
    current: list = field(default_factory=list)
    decoder_state: DecoderState | None = None
    root_state: RootState = field(default_factory=RootState)
    frames_emitted: int = 0
    segments: list = field(default_factory=list)
    stopped: bool = False
    stop_reason: str | None = None


@dataclass
class StepResult:
    latent: np.ndarray | None
    frames: np.ndarray  # (m, POSE_DIM)
    joints: np.ndarray  # (m, K, 3) world-space
    stopped: bool
    reason: str | None = None


class Engine:
    """Shared immutable models plus the per-session streaming step logic."""

    def __init__(
        self,
        tae: CausalTAE,
        model: ArModel,
        config: GenerationConfig | None = None,
        skeleton: SkeletonDef | None = None,
    ):
        self.tae = tae.eval()
        self.model = model.eval()
        self.config = config or GenerationConfig()
        self.skeleton = skeleton or default_skeleton()
        self.schedule = NoiseSchedule.cosine(50)
        self.end_latent = compute_end_latent(tae)
        self.null_emb = torch.from_numpy(null_text_embedding())
        self._next_id = 0

    @property
    def latent_dim(self) -> int:
        return self.model.cfg.latent_dim

    @property
    def frames_per_latent(self) -> int:
        return self.tae.cfg.downsample

    def start_session(
        self, prompt: str, seed: int = 0, config: GenerationConfig | None = None
    ) -> GenerationSession:
        if not prompt.strip():
            raise ValueError("empty prompt")
        config = config or self.config
        self._next_id += 1
        return GenerationSession(
            session_id=self._next_id,
            text=prompt,
            text_emb=torch.from_numpy(embed_text(prompt)),
            config=config,
            generator=torch.Generator().manual_seed(seed),
            history=torch.zeros(0, self.latent_dim),
            decoder_state=self.tae.init_decoder_state(),
        )

    def _criterion(self, config: GenerationConfig) -> StopCriterion:
        return StopCriterion(self.end_latent, config.stop_threshold)

    def step(self, session: GenerationSession) -> StepResult:
        """Predict one latent, stop-check it, and decode it to new frames."""
        if session.stopped:
            raise RuntimeError("session segment already stopped; push a new prompt")
        cfg = session.config
        k = session.history.shape[0]
        n = len(session.current)
        empty = np.zeros((0, POSE_DIM), dtype=np.float32)
        no_joints = np.zeros((0, self.skeleton.num_joints, 3))
        if n >= cfg.max_latents or 1 + k + n >= self.model.cfg.block_size:
            session.stopped, session.stop_reason = True, "max-length"
            return StepResult(None, empty, no_joints, True, "max-length")

        cur = torch.stack(session.current) if n else torch.zeros(0, self.latent_dim)
        with torch.no_grad():
            cond = self.model.backbone_forward(
                SequencePack(session.text_emb, session.history, cur)
            )[-1]
            uncond = None
            if cfg.cfg_scale != 1.0:
                uncond = self.model.backbone_forward(
                    SequencePack(self.null_emb, session.history, cur, text_null=True)
                )[-1]
            latent = sample_latent(
                self.model.head,
                cond,
                self.schedule,
                session.generator,
                cfg_scale=cfg.cfg_scale,
                uncond=uncond,
                num_steps=cfg.sample_steps,
            )
        if should_stop(latent, self._criterion(cfg)):
            session.stopped, session.stop_reason = True, "stop"
            return StepResult(None, empty, no_joints, True, "stop")

        session.current.append(latent)
        with torch.no_grad():
            frames, session.decoder_state = self.tae.decode_step(latent, session.decoder_state)
        frames_np = frames.numpy().astype(np.float32)
        joints = np.empty((len(frames_np), self.skeleton.num_joints, 3))
        for i, pose in enumerate(frames_np):
            session.root_state = advance_root(session.root_state, pose)
            joints[i] = forward_kinematics(pose, self.skeleton, session.root_state)
        session.frames_emitted += len(frames_np)
        return StepResult(latent.numpy(), frames_np, joints, False)

    def run_segment(self, session: GenerationSession):
        """Step until the segment stops; yields StepResults including the final stop."""
        while True:
            result = self.step(session)
            yield result
            if result.stopped:
                return

    def push_prompt(self, session: GenerationSession, text: str) -> GenerationSession:
        """Roll the finished segment into history and start the next one.

        Only the most recent segment is kept as context; the decoder and
        root-integration state carry over so motion stays continuous.
        """
        if not text.strip():
            raise ValueError("empty prompt")
        n = len(session.current)
        latents = (
            torch.stack(session.current) if n else torch.zeros(0, self.latent_dim)
        )
        session.segments.append(
            Segment(session.text, latents, n * self.frames_per_latent)
        )
        session.history = latents
        session.current = []
        session.text = text
        session.text_emb = torch.from_numpy(embed_text(text))
        session.stopped = False
        session.stop_reason = None
        if session.config.reset_decoder_on_prompt:
            session.decoder_state = self.tae.init_decoder_state()
        return session

    def fork_from_prefix(
        self, session: GenerationSession, keep_segments: int, new_text: str, seed: int = 0
    ) -> tuple[GenerationSession, np.ndarray]:
        """New session continuing after the kept prefix segments (dynamic recomposition).

        Re-decodes the kept latents to rebuild decoder and root state; the
        prefix frames themselves are returned for verification and are
        bit-identical to the original decode.
        """
        if not 0 < keep_segments <= len(session.segments) + (1 if session.current else 0):
            raise ValueError(f"invalid segment index {keep_segments}")
        segs = list(session.segments[:keep_segments])
        if keep_segments == len(session.segments) + 1:
            latents = torch.stack(session.current)
            segs.append(Segment(session.text, latents, latents.shape[0] * self.frames_per_latent))
        fresh = self.start_session(new_text, seed=seed)
        prefix_frames = []
        for seg in segs:
            for i in range(seg.latents.shape[0]):
                with torch.no_grad():
                    frames, fresh.decoder_state = self.tae.decode_step(
                        seg.latents[i], fresh.decoder_state
                    )
                frames_np = frames.numpy().astype(np.float32)
                for pose in frames_np:
                    fresh.root_state = advance_root(fresh.root_state, pose)
                prefix_frames.append(frames_np)
        fresh.segments = segs
        fresh.history = segs[-1].latents
        fresh.frames_emitted = sum(s.n_frames for s in segs)
        prefix = (
            np.concatenate(prefix_frames, axis=0)
            if prefix_frames
            else np.zeros((0, POSE_DIM), dtype=np.float32)
        )
        return fresh, prefix


def measure_first_frame_latency(
    engine: Engine,
    frame_counts: list[int],
    repeats: int = 3,
    seed: int = 0,
    warmup: int = 1,
) -> list[dict]:
    """Wall-clock time to the first emitted frame, causal vs buffer-everything.

    The causal path decodes the first latent the moment it exists; the
    simulated non-causal path predicts every latent for the requested
    length first and decodes only then. Measurement order is shuffled so
    slow drift cannot masquerade as a slope.
    """
    rng = np.random.default_rng(seed)
    fpl = engine.frames_per_latent
    no_stop = GenerationConfig(
        cfg_scale=engine.config.cfg_scale,
        stop_threshold=0.0,
        max_latents=10**9,
        sample_steps=engine.config.sample_steps,
    )

    def causal_first_frame() -> float:
        session = engine.start_session("warmup walk", seed=int(rng.integers(2**31)), config=no_stop)
        t0 = time.perf_counter()
        result = engine.step(session)
        assert result.frames.shape[0] == fpl
        return time.perf_counter() - t0

    def noncausal_first_frame(frames: int) -> float:
        n_latents = (frames + fpl - 1) // fpl
        session = engine.start_session("warmup walk", seed=int(rng.integers(2**31)), config=no_stop)
        window = engine.model.cfg.block_size - 2
        t0 = time.perf_counter()
        buffered = []
        for _ in range(n_latents):
            if 1 + session.history.shape[0] + len(session.current) >= window:
                # sliding window: the newest latents become the history slot
                session.history = torch.stack(session.current[-window // 2 :])
                session.current = []
            result = engine.step(session)
            buffered.append(result.latent)
        with torch.no_grad():
            engine.tae.decode_full(torch.from_numpy(np.stack(buffered)))
        return time.perf_counter() - t0

    for _ in range(warmup):
        causal_first_frame()

    tasks = [
        (frames, mode, rep)
        for frames in frame_counts
        for mode in ("causal", "noncausal")
        for rep in range(repeats)
    ]
    tasks = [tasks[i] for i in rng.permutation(len(tasks))]
    rows = []
    for frames, mode, rep in tasks:
        latency = causal_first_frame() if mode == "causal" else noncausal_first_frame(frames)
        rows.append({"frames": frames, "mode": mode, "repeat": rep, "latency_s": latency})
    return rows


def latency_slopes(rows: list[dict]) -> dict[str, dict]:
    """Per-mode OLS slope of latency vs requested frames with a 95% CI."""
    from scipy import stats

    out = {}
    for mode in ("causal", "noncausal"):
        xs = np.array([r["frames"] for r in rows if r["mode"] == mode], dtype=float)
        ys = np.array([r["latency_s"] for r in rows if r["mode"] == mode], dtype=float)
        fit = stats.linregress(xs, ys)
        half = stats.t.ppf(0.975, len(xs) - 2) * fit.stderr
        out[mode] = {
            "slope": fit.slope,
            "ci_low": fit.slope - half,
            "ci_high": fit.slope + half,
            "mean_latency": float(ys.mean()),
        }
    return out
