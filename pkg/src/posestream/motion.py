"""272-dim pose representation, 6D rotation utilities and forward kinematics.

Each pose is a flat float vector laid out as
  [0:2)    root linear velocity on the XZ ground plane (m/frame)
  [2:8)    root angular velocity as a 6D rotation (per-frame heading delta)
  [8:74)   local joint positions, 3 per joint, root-frame meters
  [74:140) local joint velocities, 3 per joint (m/frame)
  [140:272) local joint rotations, 6D per joint

with K = 22 joints. Velocities are per-frame at a fixed 30 FPS.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_JOINTS = 22
POSE_DIM = 272
ROOT_DIM = 8  # root-related prefix: linear (2) + angular 6D (6)
FPS = 30

ROOT_LIN = slice(0, 2)
ROOT_ANG = slice(2, 8)
JOINT_POS = slice(8, 74)
JOINT_VEL = slice(74, 140)
JOINT_ROT = slice(140, 272)

DEGENERATE_EPS = 1e-8

MOTION_MAGIC = b"MSTR"
MOTION_VERSION = 1


class DegenerateRotationError(ValueError):
    pass


def rot6d_to_matrix(r: np.ndarray) -> np.ndarray:
    """Gram-Schmidt a 6D rotation (two stacked 3-vectors) into a rotation matrix.

    Accepts shape (..., 6), returns (..., 3, 3) with the orthonormalized
    vectors as the first two columns and their cross product as the third.
    """
    r = np.asarray(r, dtype=np.float64)
    a1 = r[..., 0:3]
    a2 = r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < DEGENERATE_EPS):
        raise DegenerateRotationError("degenerate 6D rotation")
    b1 = a1 / n1
    a2p = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(a2p, axis=-1, keepdims=True)
    if np.any(n2 < DEGENERATE_EPS):
        raise DegenerateRotationError("degenerate 6D rotation")
    b2 = a2p / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(m: np.ndarray) -> np.ndarray:
    """Flatten the first two columns of a rotation matrix, shape (...,3,3) -> (...,6)."""
    m = np.asarray(m, dtype=np.float64)
    eye = np.eye(3)
    err = np.abs(m @ np.swapaxes(m, -1, -2) - eye).max()
    det = np.linalg.det(m)
    if err > 1e-5 or np.any(np.abs(det - 1.0) > 1e-5):
        raise ValueError("input is not a rotation matrix")
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def identity_rot6d() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def rot6d_is_degenerate(r: np.ndarray) -> bool:
    a1 = np.asarray(r, dtype=np.float64)[0:3]
    a2 = np.asarray(r, dtype=np.float64)[3:6]
    n1 = np.linalg.norm(a1)
    if n1 < DEGENERATE_EPS:
        return True
    b1 = a1 / n1
    a2p = a2 - np.dot(b1, a2) * b1
    return bool(np.linalg.norm(a2p) < DEGENERATE_EPS)


def impossible_pose() -> np.ndarray:
    """All-zero pose vector used as the generation stop marker.

    Zero 6D spans do not describe any rotation, which is what makes the
    pose unreachable by real motion.
    """
    return np.zeros(POSE_DIM, dtype=np.float32)


def validate_pose(pose: np.ndarray) -> list[str]:
    """Return a violation report for one pose; [] means ok, ["end-marker"] for the zero pose."""
    pose = np.asarray(pose)
    if pose.shape != (POSE_DIM,):
        return ["length"]
    if not np.all(np.isfinite(pose)):
        return ["non-finite"]
    if not np.any(pose):
        return ["end-marker"]
    violations = []
    for j in range(NUM_JOINTS):
        if rot6d_is_degenerate(pose[JOINT_ROT][6 * j : 6 * j + 6]):
            violations.append(f"degenerate joint rotation {j}")
    if rot6d_is_degenerate(pose[ROOT_ANG]):
        violations.append("degenerate root rotation")
    return violations


@dataclass
class SkeletonDef:
    """Kinematic tree: per-joint parent index (root = -1) and rest bone offsets in meters."""

    parents: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.parents.ndim != 1 or self.offsets.shape != (len(self.parents), 3):
            raise ValueError("skeleton shape mismatch")
        roots = np.flatnonzero(self.parents < 0)
        if len(roots) != 1 or roots[0] != 0:
            raise ValueError("skeleton must have exactly one root at index 0")
        if np.any(self.parents[1:] >= np.arange(1, len(self.parents))):
            raise ValueError("parents must precede children")
        if not np.all(np.isfinite(self.offsets)):
            raise ValueError("offsets must be finite")

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    @classmethod
    def load(cls, path: str | Path) -> "SkeletonDef":
        spec = json.loads(Path(path).read_text())
        return cls(np.array(spec["parents"]), np.array(spec["offsets"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"parents": self.parents.tolist(), "offsets": self.offsets.tolist()})
        )


def default_skeleton() -> SkeletonDef:
    return SkeletonDef.load(Path(__file__).parent / "data" / "skeleton22.json")


@dataclass
class RootState:
    """Accumulated world transform of the root: ground-plane position plus heading."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    heading: np.ndarray = field(default_factory=lambda: np.eye(3))

    def copy(self) -> "RootState":
        return RootState(self.position.copy(), self.heading.copy())


def advance_root(state: RootState, pose: np.ndarray) -> RootState:
    """Integrate one frame of root motion.

    The planar velocity is expressed in the pre-update root frame; the
    angular 6D span is a per-frame heading delta composed on the right.
    """
    pose = np.asarray(pose, dtype=np.float64)
    vx, vz = pose[ROOT_LIN]
    v_world = state.heading @ np.array([vx, 0.0, vz])
    delta = rot6d_to_matrix(pose[ROOT_ANG])
    return RootState(state.position + v_world, state.heading @ delta)


def forward_kinematics(
    pose: np.ndarray, skeleton: SkeletonDef, root_state: RootState
) -> np.ndarray:
    """World-space joint positions (K, 3) for one pose under the given root transform.

    The root joint is placed from the local joint-position span (the
    representation carries body height there; the integrated root state
    only tracks the ground plane). Children follow rest offsets rotated
    by composed local rotations.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if not np.all(np.isfinite(pose)):
        raise ValueError("pose must be finite")
    k = skeleton.num_joints
    local_rot = pose[JOINT_ROT].reshape(k, 6)
    rots = np.empty((k, 3, 3))
    for j in range(k):
        try:
            rots[j] = rot6d_to_matrix(local_rot[j])
        except DegenerateRotationError as e:
            raise DegenerateRotationError(f"degenerate rotation at joint {j}") from e

    world_rot = np.empty((k, 3, 3))
    world_pos = np.empty((k, 3))
    root_local = pose[JOINT_POS][0:3]
    world_rot[0] = root_state.heading @ rots[0]
    world_pos[0] = root_state.position + root_state.heading @ root_local
    for j in range(1, k):
        p = skeleton.parents[j]
        world_rot[j] = world_rot[p] @ rots[j]
        world_pos[j] = world_pos[p] + world_rot[p] @ skeleton.offsets[j]
    return world_pos


def fk_sequence(
    frames: np.ndarray, skeleton: SkeletonDef, initial: RootState | None = None
) -> np.ndarray:
    """FK over a (T, 272) sequence threading the root state; returns (T, K, 3)."""
    state = initial.copy() if initial is not None else RootState()
    out = np.empty((len(frames), skeleton.num_joints, 3))
    for t, pose in enumerate(frames):
        state = advance_root(state, pose)
        out[t] = forward_kinematics(pose, skeleton, state)
    return out


def rest_pose(skeleton: SkeletonDef) -> np.ndarray:
    """Pose with identity rotations, zero velocities and rest-geometry joint positions."""
    k = skeleton.num_joints
    pose = np.zeros(POSE_DIM, dtype=np.float64)
    pose[ROOT_ANG] = identity_rot6d()
    local = np.empty((k, 3))
    local[0] = skeleton.offsets[0]
    for j in range(1, k):
        local[j] = local[skeleton.parents[j]] + skeleton.offsets[j]
    pose[JOINT_POS] = local.ravel()
    pose[JOINT_ROT] = np.tile(identity_rot6d(), k)
    return pose.astype(np.float32)


@dataclass
class MotionSequence:
    """Ordered pose frames at a fixed frame rate."""

    frames: np.ndarray
    fps: int = FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != POSE_DIM:
            raise ValueError(f"frames must be (T, {POSE_DIM})")

    def __len__(self) -> int:
        return len(self.frames)


def write_motion(path: str | Path, motion: MotionSequence, text: str | None = None) -> None:
    """Write the binary motion container plus an optional JSON label sidecar."""
    path = Path(path)
    frames = np.ascontiguousarray(motion.frames, dtype="<f4")
    header = MOTION_MAGIC + struct.pack(
        "<IIII", MOTION_VERSION, motion.fps, frames.shape[0], frames.shape[1]
    )
    path.write_bytes(header + frames.tobytes())
    if text is not None:
        path.with_suffix(".json").write_text(json.dumps({"text": text}))


def read_motion(path: str | Path) -> tuple[MotionSequence, str | None]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 20 or blob[:4] != MOTION_MAGIC:
        raise ValueError(f"corrupt motion header: {path.name}")
    version, fps, count, dim = struct.unpack("<IIII", blob[4:20])
    if version != MOTION_VERSION or dim != POSE_DIM:
        raise ValueError(f"unsupported motion container: {path.name}")
    data = np.frombuffer(blob[20:], dtype="<f4")
    if data.size != count * dim:
        raise ValueError(f"truncated motion payload: {path.name}")
    frames = data.reshape(count, dim).copy()
    sidecar = path.with_suffix(".json")
    text = None
    if sidecar.exists():
        text = json.loads(sidecar.read_text()).get("text")
    return MotionSequence(frames, fps=fps), text
