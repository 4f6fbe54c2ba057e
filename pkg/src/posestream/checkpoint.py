"""Binary checkpoint container: magic + version + config JSON + named float32 tensors.

Little-endian throughout. The causal autoencoder uses magic ``MSTC``, the
autoregressive generator ``MSTA``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

TAE_MAGIC = b"MSTC"
AR_MAGIC = b"MSTA"
VERSION = 1


def save_checkpoint(
    path: str | Path, magic: bytes, config: dict, tensors: dict[str, np.ndarray]
) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    parts = [magic, struct.pack("<I", VERSION)]
    blob = json.dumps(config).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        # asarray keeps 0-d shapes; tobytes() below is C-ordered regardless
        arr = np.asarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != magic:
        raise ValueError(f"bad checkpoint magic in {Path(path).name}: expected {magic!r}")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = json.loads(blob[off : off + clen].decode("utf-8"))
    off += clen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        tensors[name] = arr.copy()
    return config, tensors
