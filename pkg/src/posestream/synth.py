"""Procedural motion corpus: labelled primitives, dataset I/O, text-encoder stub.

Stands in for real capture datasets at desk scale. Every generated frame
passes pose validation, and each primitive kind has distinctive channel
statistics so segments can be classified from generator-side features.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .motion import (
    JOINT_POS,
    JOINT_ROT,
    JOINT_VEL,
    NUM_JOINTS,
    POSE_DIM,
    ROOT_ANG,
    ROOT_LIN,
    MotionSequence,
    SkeletonDef,
    default_skeleton,
    matrix_to_rot6d,
    read_motion,
    write_motion,
)

TEXT_DIM = 64
GENERATOR_VERSION = 1

KINDS = ("walk", "run", "turn-left", "turn-right", "jump", "wave", "idle")

TEXT_TEMPLATES = {
    "walk": [
        "a person walks forward",
        "someone walks ahead steadily",
        "a man walks straight ahead",
        "the person walks forward slowly",
    ],
    "run": [
        "a person runs forward",
        "someone runs ahead quickly",
        "a man runs straight ahead",
        "the person runs forward fast",
    ],
    "turn-left": [
        "a person turns to the left",
        "someone turns left on the spot",
        "a man turns left while stepping",
        "the person turns around to the left",
    ],
    "turn-right": [
        "a person turns to the right",
        "someone turns right on the spot",
        "a man turns right while stepping",
        "the person turns around to the right",
    ],
    "jump": [
        "a person jumps up",
        "someone jumps in place",
        "a man jumps once",
        "the person jumps upward",
    ],
    "wave": [
        "a person waves with the right hand",
        "someone waves hello",
        "a man waves his arm",
        "the person waves at somebody",
    ],
    "idle": [
        "a person stands still",
        "someone stands idle",
        "a man stands in place",
        "the person stays still",
    ],
}

# joint indices in the default 22-joint tree
J_L_HIP, J_R_HIP = 1, 2
J_SPINE1 = 3
J_L_KNEE, J_R_KNEE = 4, 5
J_L_SHOULDER, J_R_SHOULDER = 16, 17
J_L_ELBOW, J_R_ELBOW = 18, 19

_PELVIS_BASE = 0.94
_PELVIS_Y = JOINT_POS.start + 1  # y component of the root joint's local position


def _token_vector(token: str) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.standard_normal(TEXT_DIM)


_NULL_TEXT_VECTOR = _token_vector("\x00null-text\x00")
_NULL_TEXT_VECTOR /= np.linalg.norm(_NULL_TEXT_VECTOR)


def embed_text(text: str) -> np.ndarray:
    """Deterministic stub embedding: normalized mean of hashed token vectors.

    The empty string maps to the reserved null-text vector used for
    classifier-free guidance.
    """
    tokens = [t for t in text.lower().split() if t]
    if not tokens:
        return _NULL_TEXT_VECTOR.astype(np.float32)
    vecs = np.stack([_token_vector(t) for t in tokens])
    mean = vecs.mean(axis=0)
    return (mean / np.linalg.norm(mean)).astype(np.float32)


def null_text_embedding() -> np.ndarray:
    return _NULL_TEXT_VECTOR.astype(np.float32)


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _compose_frames(
    skeleton: SkeletonDef,
    root_lin: np.ndarray,  # (T, 2) planar velocity per frame
    yaw_rate: np.ndarray,  # (T,) heading delta per frame, radians
    pelvis_h: np.ndarray,  # (T,) pelvis height, meters
    angles: np.ndarray,  # (T, K, 3) per-joint xyz rotation angles
) -> np.ndarray:
    """Assemble pose vectors: local FK fills joint positions, diffs fill velocities."""
    t_len = len(pelvis_h)
    k = skeleton.num_joints
    frames = np.zeros((t_len, POSE_DIM), dtype=np.float64)
    frames[:, ROOT_LIN] = root_lin
    local_pos = np.empty((t_len, k, 3))
    for t in range(t_len):
        frames[t, ROOT_ANG] = matrix_to_rot6d(_rot_y(yaw_rate[t]))
        rots = np.empty((k, 3, 3))
        for j in range(k):
            ax, ay, az = angles[t, j]
            rots[j] = _rot_x(ax) @ _rot_y(ay) @ _rot_z(az)
        local_pos[t, 0] = (0.0, pelvis_h[t], 0.0)
        world_rot = np.empty((k, 3, 3))
        world_rot[0] = rots[0]
        for j in range(1, k):
            p = skeleton.parents[j]
            world_rot[j] = world_rot[p] @ rots[j]
            local_pos[t, j] = local_pos[t, p] + world_rot[p] @ skeleton.offsets[j]
        frames[t, JOINT_ROT] = np.concatenate([matrix_to_rot6d(rots[j]) for j in range(k)])
    frames[:, JOINT_POS] = local_pos.reshape(t_len, -1)
    vel = np.zeros_like(local_pos)
    vel[1:] = local_pos[1:] - local_pos[:-1]
    frames[:, JOINT_VEL] = vel.reshape(t_len, -1)
    return frames.astype(np.float32)


def _smooth_wiggle(rng: np.random.Generator, t_len: int, amp: float, n_modes: int = 3):
    """Band-limited noise: a few random-phase sinusoids, so velocities stay tame."""
    t = np.arange(t_len)
    out = np.zeros(t_len)
    for _ in range(n_modes):
        f = rng.uniform(0.2, 1.0)
        out += rng.normal(0, amp) * np.sin(2 * np.pi * f * t / 30 + rng.uniform(0, 2 * np.pi))
    return out


def _gait_angles(rng, t_len, freq_hz, hip_amp, arm_amp, knee_amp, noise=0.01):
    angles = np.zeros((t_len, NUM_JOINTS, 3))
    phase = 2 * np.pi * freq_hz * np.arange(t_len) / 30 + rng.uniform(0, 2 * np.pi)
    swing = np.sin(phase)
    angles[:, J_L_HIP, 0] = hip_amp * swing
    angles[:, J_R_HIP, 0] = -hip_amp * swing
    angles[:, J_L_KNEE, 0] = knee_amp * (0.5 - 0.5 * np.cos(phase))
    angles[:, J_R_KNEE, 0] = knee_amp * (0.5 + 0.5 * np.cos(phase))
    angles[:, J_L_SHOULDER, 0] = -arm_amp * swing
    angles[:, J_R_SHOULDER, 0] = arm_amp * swing
    angles[:, J_SPINE1, 2] = 0.04 * swing
    for j in (J_SPINE1, J_L_SHOULDER, J_R_SHOULDER):
        angles[:, j, 1] += _smooth_wiggle(rng, t_len, noise)
    return angles, phase


def generate_primitive(
    kind: str, params: dict | None = None, rng: np.random.Generator | None = None
) -> tuple[MotionSequence, str]:
    """One labelled motion clip of the given kind; params override sampled defaults."""
    if kind not in KINDS:
        raise ValueError(f"unknown primitive kind: {kind}")
    rng = rng if rng is not None else np.random.default_rng()
    p = dict(params or {})
    t_len = int(p.get("duration", rng.integers(40, 121)))
    if not 40 <= t_len <= 300:
        raise ValueError("duration must be within [40, 300] frames")
    skeleton = default_skeleton()

    root_lin = np.zeros((t_len, 2))
    yaw = np.zeros(t_len)
    pelvis = np.full(t_len, _PELVIS_BASE)

    if kind in ("walk", "run"):
        fast = kind == "run"
        speed = float(p.get("speed", rng.uniform(0.06, 0.10) if fast else rng.uniform(0.02, 0.045)))
        freq = float(p.get("freq", rng.uniform(2.2, 3.0) if fast else rng.uniform(1.2, 1.8)))
        hip = rng.uniform(0.6, 0.9) if fast else rng.uniform(0.35, 0.55)
        arm = rng.uniform(0.5, 0.8) if fast else rng.uniform(0.2, 0.4)
        angles, phase = _gait_angles(rng, t_len, freq, hip, arm, knee_amp=hip * 0.8)
        if fast:
            angles[:, J_L_ELBOW, 0] = -1.2
            angles[:, J_R_ELBOW, 0] = -1.2
        root_lin[:, 1] = speed  # +Z is forward
        pelvis += (0.025 if fast else 0.012) * np.sin(2 * phase)
    elif kind in ("turn-left", "turn-right"):
        sign = 1.0 if kind == "turn-left" else -1.0
        rate = float(p.get("turn_rate", rng.uniform(0.012, 0.03)))
        speed = float(p.get("speed", rng.uniform(0.004, 0.012)))
        angles, phase = _gait_angles(rng, t_len, rng.uniform(1.0, 1.5), 0.2, 0.12, knee_amp=0.15)
        yaw[:] = sign * rate
        root_lin[:, 1] = speed
        pelvis += 0.006 * np.sin(2 * phase)
    elif kind == "jump":
        height = float(p.get("height", rng.uniform(0.12, 0.25)))
        depth = float(p.get("depth", rng.uniform(0.08, 0.15)))
        angles = np.zeros((t_len, NUM_JOINTS, 3))
        t0, t1, t2 = int(t_len * 0.25), int(t_len * 0.45), int(t_len * 0.70)
        crouch = np.arange(t0, t1)
        flight = np.arange(t1, t2)
        cw = 0.5 - 0.5 * np.cos(np.pi * (crouch - t0) / max(1, t1 - t0))
        pelvis[crouch] = _PELVIS_BASE - depth * cw
        # integer apex so the discrete profile has exactly one strict maximum
        apex = (t1 + t2) // 2
        half = max(apex - t1, t2 - 1 - apex, 1)
        pelvis[flight] = (
            _PELVIS_BASE - depth + (depth + height) * (1 - ((flight - apex) / half) ** 2)
        )
        settle = np.arange(t2, t_len)
        if len(settle):
            sw = 0.5 - 0.5 * np.cos(np.pi * np.minimum((settle - t2 + 1) / 8.0, 1.0))
            pelvis[settle] = pelvis[t2 - 1] + (_PELVIS_BASE - pelvis[t2 - 1]) * sw
        knee_flex = (_PELVIS_BASE - pelvis) / max(depth, 1e-6)
        angles[:, J_L_KNEE, 0] = 1.0 * np.clip(knee_flex, 0, 1.5)
        angles[:, J_R_KNEE, 0] = 1.0 * np.clip(knee_flex, 0, 1.5)
        angles[:, J_L_HIP, 0] = -0.5 * np.clip(knee_flex, 0, 1.5)
        angles[:, J_R_HIP, 0] = -0.5 * np.clip(knee_flex, 0, 1.5)
        lift = np.zeros(t_len)
        lift[flight] = np.clip(1 - ((flight - apex) / half) ** 2, 0, 1)
        angles[:, J_L_SHOULDER, 2] = 0.8 * lift
        angles[:, J_R_SHOULDER, 2] = -0.8 * lift
    elif kind == "wave":
        freq = float(p.get("freq", rng.uniform(1.5, 2.5)))
        amp = float(p.get("amp", rng.uniform(0.3, 0.5)))
        angles = np.zeros((t_len, NUM_JOINTS, 3))
        raise_cv = 0.5 - 0.5 * np.cos(np.pi * np.minimum(np.arange(t_len) / 10.0, 1.0))
        angles[:, J_R_SHOULDER, 2] = -1.9 * raise_cv
        wavep = 2 * np.pi * freq * np.arange(t_len) / 30
        angles[:, J_R_ELBOW, 2] = (-0.4 + amp * np.sin(wavep)) * raise_cv
        angles[:, J_SPINE1, 1] = _smooth_wiggle(rng, t_len, 0.01)
    else:  # idle
        sway = float(p.get("sway", rng.uniform(0.01, 0.03)))
        angles = np.zeros((t_len, NUM_JOINTS, 3))
        slow = 2 * np.pi * 0.4 * np.arange(t_len) / 30
        angles[:, J_SPINE1, 2] = sway * np.sin(slow)
        angles[:, J_L_SHOULDER, 0] = _smooth_wiggle(rng, t_len, sway * 0.5)
        angles[:, J_R_SHOULDER, 0] = _smooth_wiggle(rng, t_len, sway * 0.5)
        pelvis += 0.004 * np.sin(slow)

    frames = _compose_frames(skeleton, root_lin, yaw, pelvis, angles)
    text = str(rng.choice(TEXT_TEMPLATES[kind]))
    return MotionSequence(frames), text


TRANSITION_FRAMES = 10


def generate_contextual_pair(
    rng: np.random.Generator, kinds: tuple[str, str] | None = None
) -> tuple[str, MotionSequence, str, MotionSequence, tuple[str, str]]:
    """Two adjacent segments with a cosine-blended seam; returns texts, motions, kinds."""
    if kinds is None:
        a, b = rng.choice(len(KINDS), size=2, replace=False)
        kinds = (KINDS[a], KINDS[b])
    motion_a, text_a = generate_primitive(kinds[0], None, rng)
    motion_b, text_b = generate_primitive(kinds[1], None, rng)
    fa, fb = motion_a.frames.copy(), motion_b.frames.copy()
    seam_from = fa[-1]
    w_len = min(TRANSITION_FRAMES, len(fb) - 1)
    for i in range(w_len):
        w = 0.5 - 0.5 * np.cos(np.pi * (i + 1) / (w_len + 1))
        fb[i] = (1 - w) * seam_from + w * fb[i]
    # rebuild local velocities across the blended region and the seam itself
    joined = np.concatenate([fa, fb], axis=0)
    pos = joined[:, JOINT_POS]
    joined[1:, JOINT_VEL] = pos[1:] - pos[:-1]
    fa, fb = joined[: len(fa)], joined[len(fa) :]
    return text_a, MotionSequence(fa), text_b, MotionSequence(fb), kinds


@dataclass
class DatasetEntry:
    file: str
    text: str
    kind: str
    prev_file: str | None = None
    prev_text: str | None = None
    prev_kind: str | None = None


class DatasetIndex:
    """Lazy reader over a written corpus directory."""

    def __init__(self, root: Path, entries: list[DatasetEntry], meta: dict):
        self.root = root
        self.entries = entries
        self.meta = meta

    def __len__(self) -> int:
        return len(self.entries)

    def load_motion(self, rel: str) -> MotionSequence:
        motion, _ = read_motion(self.root / rel)
        return motion

    def load(self, i: int) -> tuple[MotionSequence, DatasetEntry]:
        return self.load_motion(self.entries[i].file), self.entries[i]


def make_corpus(
    n_atomic: int, n_contextual: int, seed: int, out_dir: str | Path
) -> DatasetIndex:
    """Generate and write a labelled corpus; returns the index for immediate use."""
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    (out / "motions").mkdir(parents=True, exist_ok=True)
    entries: list[DatasetEntry] = []
    for i in range(n_atomic):
        kind = KINDS[int(rng.integers(len(KINDS)))]
        motion, text = generate_primitive(kind, None, rng)
        rel = f"motions/a{i:05d}.mstr"
        write_motion(out / rel, motion, text)
        entries.append(DatasetEntry(rel, text, kind))
    for i in range(n_contextual):
        text_a, motion_a, text_b, motion_b, kinds = generate_contextual_pair(rng)
        rel_a = f"motions/c{i:05d}_prev.mstr"
        rel_b = f"motions/c{i:05d}.mstr"
        write_motion(out / rel_a, motion_a, text_a)
        write_motion(out / rel_b, motion_b, text_b)
        entries.append(DatasetEntry(rel_b, text_b, kinds[1], rel_a, text_a, kinds[0]))
    with open(out / "index.jsonl", "w") as f:
        for e in entries:
            row = {"file": e.file, "text": e.text, "kind": e.kind}
            if e.prev_file:
                row.update(prev_file=e.prev_file, prev_text=e.prev_text, prev_kind=e.prev_kind)
            f.write(json.dumps(row) + "\n")
    meta = {
        "seed": seed,
        "generator_version": GENERATOR_VERSION,
        "n_atomic": n_atomic,
        "n_contextual": n_contextual,
    }
    (out / "meta.json").write_text(json.dumps(meta))
    return DatasetIndex(out, entries, meta)


def read_dataset(path: str | Path) -> DatasetIndex:
    root = Path(path)
    entries = []
    with open(root / "index.jsonl") as f:
        for line in f:
            row = json.loads(line)
            entry = DatasetEntry(
                row["file"],
                row["text"],
                row.get("kind", ""),
                row.get("prev_file"),
                row.get("prev_text"),
                row.get("prev_kind"),
            )
            for rel in (entry.file, entry.prev_file):
                if rel and not (root / rel).exists():
                    raise FileNotFoundError(f"index references missing file: {rel}")
            entries.append(entry)
    meta = json.loads((root / "meta.json").read_text()) if (root / "meta.json").exists() else {}
    return DatasetIndex(root, entries, meta)


def kind_features(frames: np.ndarray) -> np.ndarray:
    """Channel statistics that separate the primitive kinds."""
    frames = np.asarray(frames, dtype=np.float64)
    speed = np.linalg.norm(frames[:, ROOT_LIN], axis=1).mean()
    ang = frames[:, ROOT_ANG]
    # signed yaw rate of the per-frame heading delta; the 6D span holds the
    # first two matrix columns, so cos(yaw) = ang[0] and sin(yaw) = -ang[2]
    yaw = np.arctan2(-ang[:, 2], ang[:, 0]).mean()
    pelvis = frames[:, _PELVIS_Y]
    pel_std = pelvis.std()
    pel_range = pelvis.max() - pelvis.min()
    rot = frames[:, JOINT_ROT].reshape(len(frames), NUM_JOINTS, 6)
    arm = rot[:, [J_R_SHOULDER, J_R_ELBOW]].std(axis=0).mean()
    arm_mean_dev = np.abs(
        rot[:, [J_R_SHOULDER, J_R_ELBOW]].mean(axis=0)
        - rot[:, [J_L_SHOULDER, J_L_ELBOW]].mean(axis=0)
    ).mean()
    legs = rot[:, [J_L_HIP, J_R_HIP, J_L_KNEE, J_R_KNEE]].std(axis=0).mean()
    vel = np.abs(frames[:, JOINT_VEL]).mean()
    return np.array([speed, yaw, pel_std, pel_range, arm, arm_mean_dev, legs, vel])


@dataclass
class KindClassifier:
    """Nearest-centroid classifier over generator feature statistics."""

    kinds: list[str]
    centroids: np.ndarray
    scale: np.ndarray

    def classify(self, frames: np.ndarray) -> str:
        f = kind_features(frames) / self.scale
        dists = np.linalg.norm(self.centroids / self.scale - f, axis=1)
        return self.kinds[int(np.argmin(dists))]


def build_kind_classifier(seed: int = 1234, per_kind: int = 12) -> KindClassifier:
    rng = np.random.default_rng(seed)
    kinds, rows = [], []
    all_feats = []
    for kind in KINDS:
        feats = []
        for _ in range(per_kind):
            motion, _ = generate_primitive(kind, None, rng)
            feats.append(kind_features(motion.frames))
        feats = np.stack(feats)
        all_feats.append(feats)
        kinds.append(kind)
        rows.append(feats.mean(axis=0))
    scale = np.concatenate(all_feats).std(axis=0)
    scale[scale < 1e-9] = 1.0
    return KindClassifier(kinds, np.stack(rows), scale)
