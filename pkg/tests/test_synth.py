import hashlib
import json

import numpy as np
import pytest

from posestream.motion import JOINT_POS, JOINT_VEL, ROOT_LIN, default_skeleton, fk_sequence, validate_pose
from posestream.synth import (
    KINDS,
    TEXT_DIM,
    build_kind_classifier,
    embed_text,
    generate_contextual_pair,
    generate_primitive,
    kind_features,
    make_corpus,
    null_text_embedding,
    read_dataset,
)

PELVIS_Y = JOINT_POS.start + 1


class TestTextStub:
    def test_empty_string_is_null_vector(self):
        assert np.array_equal(embed_text(""), null_text_embedding())
        assert np.array_equal(embed_text("   "), null_text_embedding())

    def test_deterministic(self):
        assert np.array_equal(embed_text("a man walks forward"), embed_text("a man walks forward"))

    def test_shape_and_norm(self):
        v = embed_text("hello world")
        assert v.shape == (TEXT_DIM,)
        assert np.isclose(np.linalg.norm(v), 1.0, atol=1e-5)

    def test_distinct_kinds_distinct_embeddings(self):
        cos = float(embed_text("walk forward") @ embed_text("jump up"))
        assert cos < 0.9

    def test_case_insensitive_tokens(self):
        assert np.allclose(embed_text("Walk Forward"), embed_text("walk forward"))


class TestPrimitives:
    @pytest.mark.parametrize("kind", KINDS)
    def test_all_frames_valid(self, kind):
        motion, text = generate_primitive(kind, {"duration": 50}, np.random.default_rng(0))
        assert 40 <= len(motion) <= 300
        assert isinstance(text, str) and text
        for frame in motion.frames:
            assert validate_pose(frame) == []

    def test_idle_root_stays_put(self):
        motion, _ = generate_primitive("idle", {"duration": 60}, np.random.default_rng(1))
        joints = fk_sequence(motion.frames, default_skeleton())
        drift = np.linalg.norm(joints[-1][0][[0, 2]] - joints[0][0][[0, 2]])
        assert drift < 0.01

    def test_walk_displacement_matches_speed(self):
        v = 0.03
        motion, _ = generate_primitive("walk", {"speed": v, "duration": 90}, np.random.default_rng(2))
        joints = fk_sequence(motion.frames, default_skeleton())
        disp = np.linalg.norm(joints[-1][0] - joints[0][0])
        assert disp == pytest.approx(90 * v, rel=0.05)

    def test_jump_height_single_local_maximum(self):
        motion, _ = generate_primitive("jump", {"duration": 80}, np.random.default_rng(3))
        h = motion.frames[:, PELVIS_Y]
        strict_maxima = [
            t for t in range(1, len(h) - 1) if h[t] > h[t - 1] and h[t] > h[t + 1]
        ]
        assert len(strict_maxima) == 1

    def test_turn_direction_sign(self):
        left, _ = generate_primitive("turn-left", {"duration": 60}, np.random.default_rng(4))
        right, _ = generate_primitive("turn-right", {"duration": 60}, np.random.default_rng(4))
        assert kind_features(left.frames)[1] > 0
        assert kind_features(right.frames)[1] < 0

    def test_duration_bounds_enforced(self):
        with pytest.raises(ValueError):
            generate_primitive("walk", {"duration": 20}, np.random.default_rng(0))
        with pytest.raises(ValueError):
            generate_primitive("walk", {"duration": 400}, np.random.default_rng(0))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            generate_primitive("moonwalk")

    def test_seeded_reproducibility(self):
        a, ta = generate_primitive("run", None, np.random.default_rng(9))
        b, tb = generate_primitive("run", None, np.random.default_rng(9))
        assert np.array_equal(a.frames, b.frames)
        assert ta == tb


class TestContextualPair:
    def test_smooth_seam(self):
        ta, ma, tb, mb, kinds = generate_contextual_pair(np.random.default_rng(5))
        joined = np.concatenate([ma.frames, mb.frames])
        vel = joined[:, JOINT_VEL]
        jumps = np.abs(np.diff(vel, axis=0)).max(axis=1)
        seam = len(ma) - 1
        window = jumps[max(0, seam - 2) : seam + 12]
        assert window.max() < 0.08, "velocity discontinuity at the blended seam"

    def test_lengths_in_bounds(self):
        _, ma, _, mb, _ = generate_contextual_pair(np.random.default_rng(6))
        assert 40 <= len(ma) <= 300
        assert 40 <= len(mb) <= 300

    def test_same_seed_identical(self):
        a = generate_contextual_pair(np.random.default_rng(7))
        b = generate_contextual_pair(np.random.default_rng(7))
        assert np.array_equal(a[1].frames, b[1].frames)
        assert np.array_equal(a[3].frames, b[3].frames)
        assert a[0] == b[0] and a[2] == b[2]

    def test_distinct_kinds(self):
        *_, kinds = generate_contextual_pair(np.random.default_rng(8))
        assert kinds[0] != kinds[1]

    def test_pair_frames_all_valid(self):
        _, ma, _, mb, _ = generate_contextual_pair(np.random.default_rng(10))
        for frame in np.concatenate([ma.frames, mb.frames]):
            assert validate_pose(frame) == []


class TestDatasetIO:
    def test_roundtrip_bit_identical(self, tmp_path):
        index = make_corpus(4, 2, seed=0, out_dir=tmp_path)
        back = read_dataset(tmp_path)
        assert len(back) == 6
        for i in range(len(back)):
            orig, entry = index.load(i)
            again, entry2 = back.load(i)
            assert np.array_equal(orig.frames, again.frames)
            assert entry.text == entry2.text
        contextual = [e for e in back.entries if e.prev_file]
        assert len(contextual) == 2
        for e in contextual:
            assert e.prev_text and e.prev_kind

    def test_missing_file_reported(self, tmp_path):
        make_corpus(2, 0, seed=0, out_dir=tmp_path)
        index_file = tmp_path / "index.jsonl"
        rows = index_file.read_text().splitlines()
        rows.append(json.dumps({"file": "motions/ghost.mstr", "text": "x", "kind": "idle"}))
        index_file.write_text("\n".join(rows) + "\n")
        with pytest.raises(FileNotFoundError, match="ghost.mstr"):
            read_dataset(tmp_path)

    def test_corpus_reproducible_from_seed(self, tmp_path):
        make_corpus(3, 2, seed=42, out_dir=tmp_path / "a")
        make_corpus(3, 2, seed=42, out_dir=tmp_path / "b")

        def digest(root):
            h = hashlib.sha256()
            for p in sorted((root / "motions").iterdir()):
                h.update(p.name.encode())
                h.update(p.read_bytes())
            return h.hexdigest()

        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_meta_written(self, tmp_path):
        make_corpus(1, 1, seed=5, out_dir=tmp_path)
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["seed"] == 5
        assert meta["n_atomic"] == 1


class TestKindClassifier:
    def test_classifies_fresh_primitives(self):
        clf = build_kind_classifier(seed=0, per_kind=8)
        rng = np.random.default_rng(123)
        correct = 0
        total = 0
        for kind in KINDS:
            for _ in range(4):
                motion, _ = generate_primitive(kind, None, rng)
                correct += clf.classify(motion.frames) == kind
                total += 1
        assert correct / total >= 0.9

    def test_feature_width_fixed(self):
        motion, _ = generate_primitive("walk", None, np.random.default_rng(0))
        assert kind_features(motion.frames).shape == (8,)
