"""Quantitative evaluation: joint position error, feature-space Fréchet
distance, diversity, and jerk-based smoothness.

The feature extractor is handcrafted channel statistics, so absolute
Fréchet values are NOT comparable with evaluators trained on real data;
reports carry the extractor id for that reason.
"""

from __future__ import annotations

import numpy as np

from .motion import (
    JOINT_POS,
    JOINT_VEL,
    ROOT_ANG,
    ROOT_LIN,
    FPS,
    MotionSequence,
    RootState,
    SkeletonDef,
    fk_sequence,
    forward_kinematics,
)

EXTRACTOR_ID = "channel-stats-v1"


def fk_root_frame(frames: np.ndarray, skeleton: SkeletonDef) -> np.ndarray:
    """Joint positions in each frame's own root frame (identity root transform)."""
    out = np.empty((len(frames), skeleton.num_joints, 3))
    identity = RootState()
    for t, pose in enumerate(frames):
        out[t] = forward_kinematics(pose, skeleton, identity)
    return out


def mpjpe(pred: MotionSequence, gt: MotionSequence, skeleton: SkeletonDef) -> float:
    """Mean per-joint position error in millimeters, root-aligned per frame.

    Alignment expresses both skeletons in the frame's root coordinate
    system (position and heading), the usual convention for
    reconstruction error; no Procrustes fitting is involved.
    """
    if len(pred) != len(gt):
        raise ValueError("sequences must have equal frame counts")
    pj = fk_root_frame(pred.frames, skeleton)
    gj = fk_root_frame(gt.frames, skeleton)
    dist = np.linalg.norm(pj - gj, axis=-1)
    return float(dist.mean() * 1000.0)


def extract_features(motion: MotionSequence) -> np.ndarray:
    """Fixed-width deterministic motion descriptor (means/stds of channels)."""
    frames = np.asarray(motion.frames, dtype=np.float64)
    vel = frames[:, JOINT_VEL].reshape(len(frames), -1, 3)
    speed = np.linalg.norm(vel, axis=-1)
    pos = frames[:, JOINT_POS].reshape(len(frames), -1, 3)
    feats = np.concatenate(
        [
            frames[:, ROOT_LIN].mean(axis=0),
            frames[:, ROOT_LIN].std(axis=0),
            frames[:, ROOT_ANG].mean(axis=0),
            speed.mean(axis=0),
            speed.std(axis=0),
            pos.mean(axis=0).ravel(),
            pos.std(axis=0).ravel(),
        ]
    )
    return feats.astype(np.float64)


def _psd_sqrt(mat: np.ndarray, neg_tol: float = -1e-6) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, clamping tiny negatives."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    if vals.min() < neg_tol:
        vals = np.clip(vals, 0.0, None)
    else:
        vals = np.maximum(vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets (N, D)."""
    feats_a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    feats_b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if feats_a.shape[0] < 2 or feats_b.shape[0] < 2:
        raise ValueError("need at least 2 samples per set")
    if feats_a.shape[1] != feats_b.shape[1]:
        raise ValueError("feature widths differ")
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    reg = 1e-6 * np.eye(feats_a.shape[1])
    cov_a = np.cov(feats_a, rowvar=False) + reg
    cov_b = np.cov(feats_b, rowvar=False) + reg
    sqrt_a = _psd_sqrt(cov_a)
    # Tr sqrt(cov_a cov_b) computed through the symmetric product sqrt_a cov_b sqrt_a
    cross = _psd_sqrt(sqrt_a @ cov_b @ sqrt_a)
    diff = mu_a - mu_b
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(fd, 0.0)


def diversity(feats: np.ndarray, pairs: int = 300, seed: int = 0) -> float:
    """Mean Euclidean distance over randomly sampled feature pairs."""
    feats = np.asarray(feats, dtype=np.float64)
    n = feats.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    pairs = min(pairs, n * (n - 1) // 2)
    total = 0.0
    for _ in range(pairs):
        i, j = rng.choice(n, size=2, replace=False)
        total += float(np.linalg.norm(feats[i] - feats[j]))
    return total / pairs


def _third_derivative(pos: np.ndarray, fps: int) -> np.ndarray:
    """Third time derivative of (T, K, 3) positions; central stencil inside,
    one-sided 4-point stencils at the edges. Units: m/s^3."""
    t_len = pos.shape[0]
    if t_len < 4:
        raise ValueError("need at least 4 frames for jerk")
    d3 = np.zeros_like(pos)
    # forward/backward one-sided third differences
    d3[:2] = -pos[0:1] + 3 * pos[1:2] - 3 * pos[2:3] + pos[3:4]
    d3[-2:] = pos[-1:] - 3 * pos[-2:-1] + 3 * pos[-3:-2] - pos[-4:-3]
    if t_len >= 5:
        d3[2:-2] = (pos[4:] - 2 * pos[3:-1] + 2 * pos[1:-3] - pos[:-4]) / 2.0
    return d3 * fps**3


def jerk_metrics(
    motion: MotionSequence,
    skeleton: SkeletonDef,
    window: tuple[int, int] | None = None,
) -> dict[str, float]:
    """Peak jerk and area under the max-over-joints jerk curve.

    window optionally restricts the evaluation to a frame span (e.g. a
    transition region around a segment boundary).
    """
    joints = fk_sequence(motion.frames, skeleton)
    if window is not None:
        lo, hi = max(window[0], 0), min(window[1], len(joints))
        joints = joints[lo:hi]
    jerk = np.linalg.norm(_third_derivative(joints, motion.fps), axis=-1)
    per_frame = jerk.max(axis=1)
    peak = float(per_frame.max())
    auj = float(np.trapezoid(per_frame, dx=1.0 / motion.fps))
    return {"peak_jerk": peak, "auj": auj}

TRANSITION_WINDOW = 30


def transition_window(boundary_frame: int, length: int = TRANSITION_WINDOW) -> tuple[int, int]:
    """Frame span of width `length` centered on a segment boundary."""
    half = length // 2
    return boundary_frame - half, boundary_frame + half
