import json

import numpy as np
import pytest
import torch

from posestream.cli import main
from posestream.motion import read_motion


def test_no_subcommand_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().out.lower()


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--nonsense"])
    assert exc.value.code == 2


def test_gen_data(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--out", str(out), "--atomic", "3", "--contextual", "1", "--seed", "4"]) == 0
    assert (out / "index.jsonl").exists()
    assert (out / "meta.json").exists()
    assert len(list((out / "motions").glob("*.mstr"))) == 5


def test_config_toml_defaults(tmp_path):
    cfg = tmp_path / "conf.toml"
    cfg.write_text('[gen-data]\natomic = 2\ncontextual = 0\n')
    out = tmp_path / "data"
    assert main(["gen-data", "--out", str(out), "--config", str(cfg)]) == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["n_atomic"] == 2
    assert meta["n_contextual"] == 0


def test_cli_flag_overrides_config(tmp_path):
    cfg = tmp_path / "conf.toml"
    cfg.write_text('[gen-data]\natomic = 2\n')
    out = tmp_path / "data"
    assert main(["gen-data", "--out", str(out), "--config", str(cfg), "--atomic", "1", "--contextual", "0"]) == 0
    assert json.loads((out / "meta.json").read_text())["n_atomic"] == 1


@pytest.mark.slow
class TestPipeline:
    @pytest.fixture(scope="class")
    def workspace(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("cli")
        assert main(["gen-data", "--out", str(root / "data"), "--atomic", "8", "--contextual", "4", "--seed", "1"]) == 0
        assert (
            main(
                [
                    "train-tae", "--data", str(root / "data"), "--out", str(root / "tae.mstc"),
                    "--latent-dim", "8", "--hidden", "32", "--steps", "40", "--batch", "2",
                    "--crop", "40", "--seed", "1",
                ]
            )
            == 0
        )
        assert (
            main(
                [
                    "train-ar", "--data", str(root / "data"), "--tae", str(root / "tae.mstc"),
                    "--out", str(root / "ar.msta"), "--layers", "1", "--heads", "2", "--dim", "32",
                    "--head-hidden", "32", "--head-layers", "1", "--steps", "15", "--batch", "2",
                    "--warmup", "3", "--seed", "1",
                ]
            )
            == 0
        )
        return root

    def test_generate_multi_prompt(self, workspace):
        out = workspace / "gen.mstr"
        frames_json = workspace / "gen_frames.json"
        code = main(
            [
                "generate", "--tae", str(workspace / "tae.mstc"), "--ar", str(workspace / "ar.msta"),
                "--prompt", "a person walks forward", "--prompt", "then he jumps up",
                "--out", str(out), "--json-frames", str(frames_json),
                "--max-latents", "4", "--seed", "3",
            ]
        )
        assert code == 0
        motion, text = read_motion(out)
        assert text == "a person walks forward | then he jumps up"
        payload = json.loads(frames_json.read_text())
        assert len(payload["segments"]) == 2
        assert payload["segments"][1]["start_frame"] >= payload["segments"][0]["end_frame"] - 1
        assert len(payload["pose272"]) == len(motion)
        # one continuous stream across both prompts
        starts = [s["start_frame"] for s in payload["segments"]]
        assert starts == sorted(starts)

    def test_generate_deterministic(self, workspace):
        args = [
            "generate", "--tae", str(workspace / "tae.mstc"), "--ar", str(workspace / "ar.msta"),
            "--prompt", "someone waves hello", "--max-latents", "3", "--seed", "9",
        ]
        a = workspace / "a.mstr"
        b = workspace / "b.mstr"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        ma, _ = read_motion(a)
        mb, _ = read_motion(b)
        assert np.array_equal(ma.frames, mb.frames)

    def test_evaluate_report(self, workspace):
        report_path = workspace / "report.json"
        code = main(
            [
                "evaluate", "--data", str(workspace / "data"), "--tae", str(workspace / "tae.mstc"),
                "--ar", str(workspace / "ar.msta"), "--samples", "4",
                "--out", str(report_path), "--seed", "2",
            ]
        )
        assert code == 0
        report = json.loads(report_path.read_text())
        for key in ("fid", "diversity", "mpjpe", "pj", "auj", "n_samples", "extractor_id"):
            assert key in report
        assert report["n_samples"] == 4

    def test_bench_latency_csv(self, workspace, tmp_path):
        csv_path = tmp_path / "latency.csv"
        code = main(
            [
                "bench-latency", "--frames", "8,16", "--repeats", "1",
                "--out", str(csv_path), "--seed", "0",
            ]
        )
        assert code == 0
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "frames,mode,repeat,latency_s"
        assert len(lines) == 5  # 2 lengths x 2 modes x 1 repeat

    def test_missing_checkpoint_is_runtime_error(self, workspace):
        code = main(
            [
                "generate", "--tae", str(workspace / "missing.mstc"), "--ar", str(workspace / "ar.msta"),
                "--prompt", "x",
            ]
        )
        assert code == 1
