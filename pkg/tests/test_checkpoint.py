import numpy as np
import pytest

from posestream.checkpoint import AR_MAGIC, TAE_MAGIC, load_checkpoint, save_checkpoint


def test_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "encoder.conv.weight": rng.normal(size=(4, 3, 3)).astype(np.float32),
        "adapter.bias": rng.normal(size=(8,)).astype(np.float32),
        "scalar": np.float32(3.5).reshape(()),
    }
    config = {"tae": {"latent_dim": 16}, "stop_threshold": 0.75}
    path = tmp_path / "model.mstc"
    save_checkpoint(path, TAE_MAGIC, config, tensors)
    back_cfg, back = load_checkpoint(path, TAE_MAGIC)
    assert back_cfg == config
    assert set(back) == set(tensors)
    for name in tensors:
        assert np.array_equal(back[name], tensors[name])


def test_magic_mismatch(tmp_path):
    path = tmp_path / "model.bin"
    save_checkpoint(path, TAE_MAGIC, {}, {})
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path, AR_MAGIC)


def test_little_endian_layout(tmp_path):
    path = tmp_path / "m.mstc"
    save_checkpoint(path, TAE_MAGIC, {}, {"w": np.array([1.0], dtype=np.float32)})
    blob = path.read_bytes()
    assert blob[:4] == b"MSTC"
    assert int.from_bytes(blob[4:8], "little") == 1  # version
