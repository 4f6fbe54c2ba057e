"""Command-line interface: data generation, both training stages, generation,
evaluation, the latency benchmark and the streaming service."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="TOML file whose [command] section supplies defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posestream", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate the synthetic labelled corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--atomic", type=int, default=500)
    p.add_argument("--contextual", type=int, default=500)
    _add_common(p)

    p = sub.add_parser("train-tae", help="train the causal temporal autoencoder")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("tae.mstc"))
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--lambda", dest="root_weight", type=float, default=7.0)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--profile", choices=["desk", "paper"], default="desk")
    _add_common(p)

    p = sub.add_parser("train-ar", help="train the autoregressive generator")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--tae", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("ar.msta"))
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--head-hidden", type=int, default=256)
    p.add_argument("--head-layers", type=int, default=3)
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--warmup", type=int, default=1_000)
    p.add_argument("--profile", choices=["desk", "paper"], default="desk")
    _add_common(p)

    p = sub.add_parser("generate", help="stream motion for one or more prompts")
    p.add_argument("--tae", type=Path, required=True)
    p.add_argument("--ar", type=Path, required=True)
    p.add_argument("--prompt", action="append", required=True)
    p.add_argument("--out", type=Path, default=Path("generated.mstr"))
    p.add_argument("--json-frames", type=Path, help="also dump frames and joints as JSON")
    p.add_argument("--cfg-scale", type=float, default=4.0)
    p.add_argument("--stop-threshold", type=float, help="override the calibrated threshold")
    p.add_argument("--max-latents", type=int, default=75)
    _add_common(p)

    p = sub.add_parser("evaluate", help="metric report on a trained pipeline")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--tae", type=Path, required=True)
    p.add_argument("--ar", type=Path, required=True)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--out", type=Path, help="write the JSON report here as well")
    p.add_argument("--cfg-scale", type=float, default=4.0)
    _add_common(p)

    p = sub.add_parser("bench-latency", help="first-frame latency, causal vs buffered")
    p.add_argument("--frames", default="60,120,300,600")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--tae", type=Path, help="optional checkpoint (random weights otherwise)")
    p.add_argument("--ar", type=Path)
    p.add_argument("--out", type=Path, help="CSV output path")
    _add_common(p)

    p = sub.add_parser("serve", help="websocket streaming service")
    p.add_argument("--tae", type=Path, required=True)
    p.add_argument("--ar", type=Path, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--fps-pace", action="store_true", help="pace frames at 30 FPS")
    p.add_argument("--interrupt", action="store_true", help="apply new prompts immediately")
    p.add_argument("--cfg-scale", type=float, default=4.0)
    p.add_argument("--stop-threshold", type=float)
    _add_common(p)

    return parser


def _apply_config_defaults(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        table = tomllib.loads(Path(args.config).read_text())
        section = table.get(args.command, {})
        supplied = {a.lstrip("-").replace("-", "_").split("=")[0] for a in argv if a.startswith("--")}
        for key, value in section.items():
            dest = key.replace("-", "_")
            if dest not in supplied and hasattr(args, dest):
                setattr(args, dest, type(getattr(args, dest))(value) if getattr(args, dest) is not None else value)
    return args


def _load_engine(args, stop_override=None):
    from .backbone import load_ar
    from .engine import Engine, GenerationConfig
    from .tae import load_tae

    tae, tae_cfg = load_tae(args.tae)
    model, _ = load_ar(args.ar)
    threshold = stop_override
    if threshold is None:
        threshold = getattr(args, "stop_threshold", None)
    if threshold is None:
        threshold = float(tae_cfg.get("stop_threshold", 1.0))
    config = GenerationConfig(
        cfg_scale=getattr(args, "cfg_scale", 4.0),
        stop_threshold=threshold,
        max_latents=getattr(args, "max_latents", 75),
    )
    return Engine(tae, model, config)


def cmd_gen_data(args) -> int:
    from .synth import make_corpus

    index = make_corpus(args.atomic, args.contextual, args.seed, args.out)
    print(f"wrote {len(index)} samples to {args.out}")
    return 0


def cmd_train_tae(args) -> int:
    from .synth import read_dataset
    from .tae import TaeConfig
    from .training import TrainConfig, train_tae

    index = read_dataset(args.data)
    if args.profile == "paper":
        tae_cfg = TaeConfig(latent_dim=args.latent_dim, hidden=1024, root_weight=args.root_weight)
        cfg = TrainConfig(seed=args.seed)
    else:
        tae_cfg = TaeConfig(
            latent_dim=args.latent_dim, hidden=args.hidden, root_weight=args.root_weight, crop=args.crop
        )
        cfg = TrainConfig.desk(seed=args.seed)
        cfg.tae_steps = args.steps
        cfg.tae_batch = args.batch
        cfg.crop = args.crop
    path = train_tae(
        index, cfg, tae_cfg, args.out,
        log_cb=lambda s, l, parts: print(f"step {s}: loss {l:.4f}", flush=True),
    )
    print(f"checkpoint: {path}")
    return 0


def cmd_train_ar(args) -> int:
    from .backbone import TransformerConfig
    from .diffusion import DenoiserConfig
    from .synth import read_dataset, TEXT_DIM
    from .tae import load_tae
    from .training import TrainConfig, train_ar

    index = read_dataset(args.data)
    tae, _ = load_tae(args.tae)
    latent_dim = tae.cfg.latent_dim
    if args.profile == "paper":
        tr_cfg = TransformerConfig(text_dim=TEXT_DIM, latent_dim=latent_dim)
        head_cfg = DenoiserConfig(cond_dim=tr_cfg.dim, latent_dim=latent_dim)
        cfg = TrainConfig(seed=args.seed)
    else:
        tr_cfg = TransformerConfig(
            layers=args.layers, heads=args.heads, dim=args.dim,
            text_dim=TEXT_DIM, latent_dim=latent_dim,
        )
        head_cfg = DenoiserConfig(
            cond_dim=args.dim, latent_dim=latent_dim,
            hidden=args.head_hidden, layers=args.head_layers,
        )
        cfg = TrainConfig.desk(seed=args.seed)
        cfg.ar_steps = args.steps
        cfg.ar_batch = args.batch
        cfg.ar_warmup = args.warmup
    path = train_ar(
        index, tae, cfg, tr_cfg, head_cfg, args.out,
        log_cb=lambda s, l: print(f"step {s}: loss {l:.4f}", flush=True),
    )
    print(f"checkpoint: {path}")
    return 0


def cmd_generate(args) -> int:
    import torch

    from .motion import MotionSequence, write_motion

    engine = _load_engine(args)
    session = engine.start_session(args.prompt[0], seed=args.seed)
    all_frames, all_joints, segments = [], [], []
    for i, prompt in enumerate(args.prompt):
        if i > 0:
            engine.push_prompt(session, prompt)
        start = session.frames_emitted
        for result in engine.run_segment(session):
            if result.frames.shape[0]:
                all_frames.append(result.frames)
                all_joints.append(result.joints)
        segments.append(
            {"text": prompt, "start_frame": start, "end_frame": session.frames_emitted,
             "reason": session.stop_reason}
        )
        print(f"segment {i}: '{prompt}' -> frames [{start}, {session.frames_emitted}) ({session.stop_reason})")
    frames = np.concatenate(all_frames) if all_frames else np.zeros((0, 272), dtype=np.float32)
    if args.json_frames and args.json_frames.resolve() == args.out.with_suffix(".json").resolve():
        raise ValueError("--json-frames path collides with the motion label sidecar")
    write_motion(args.out, MotionSequence(frames), text=" | ".join(args.prompt))
    if args.json_frames:
        joints = np.concatenate(all_joints) if all_joints else np.zeros((0, 22, 3))
        args.json_frames.write_text(json.dumps({
            "segments": segments,
            "pose272": frames.tolist(),
            "joints": joints.tolist(),
        }))
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    import torch

    from .metrics import (
        EXTRACTOR_ID, diversity, extract_features, frechet_distance, jerk_metrics, mpjpe,
    )
    from .motion import MotionSequence, default_skeleton
    from .synth import read_dataset
    from .tae import reparameterize

    engine = _load_engine(args)
    index = read_dataset(args.data)
    skeleton = default_skeleton()
    rng = np.random.default_rng(args.seed)
    picks = rng.choice(len(index), size=min(args.samples, len(index)), replace=False)

    real_feats, gen_feats, jerks, recon_err = [], [], [], []
    for j, i in enumerate(picks):
        motion, entry = index.load(int(i))
        real_feats.append(extract_features(motion))
        session = engine.start_session(entry.text, seed=args.seed + 1000 + j)
        frames = [r.frames for r in engine.run_segment(session) if r.frames.shape[0]]
        if frames:
            gen = MotionSequence(np.concatenate(frames))
            gen_feats.append(extract_features(gen))
            if len(gen) >= 4:
                jerks.append(jerk_metrics(gen, skeleton))
        with torch.no_grad():
            params = engine.tae.encode(torch.from_numpy(motion.frames), pad_partial=True)
            recon = engine.tae.decode_full(params.mu)[: len(motion)].numpy()
        recon_err.append(mpjpe(MotionSequence(recon), motion, skeleton))

    report = {
        "fid": frechet_distance(np.stack(real_feats), np.stack(gen_feats)),
        "diversity": diversity(np.stack(gen_feats), seed=args.seed),
        "mpjpe": float(np.mean(recon_err)),
        "pj": float(np.mean([j["peak_jerk"] for j in jerks])) if jerks else None,
        "auj": float(np.mean([j["auj"] for j in jerks])) if jerks else None,
        "n_samples": int(len(picks)),
        "extractor_id": EXTRACTOR_ID,
        "note": "FID uses handcrafted channel statistics; values are not comparable "
                "to evaluators trained on captured motion data.",
    }
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        args.out.write_text(text)
    return 0


def cmd_bench_latency(args) -> int:
    import torch

    from .backbone import ArModel, TransformerConfig, load_ar
    from .diffusion import DenoiserConfig
    from .engine import Engine, GenerationConfig, latency_slopes, measure_first_frame_latency
    from .synth import TEXT_DIM
    from .tae import CausalTAE, TaeConfig, load_tae

    torch.manual_seed(args.seed)
    if args.tae and args.ar:
        tae, _ = load_tae(args.tae)
        model, _ = load_ar(args.ar)
    else:
        # latency depends on architecture, not weights
        tae = CausalTAE(TaeConfig.desk())
        tr = TransformerConfig.desk()
        tr.text_dim = TEXT_DIM
        model = ArModel(tr, DenoiserConfig.desk(cond_dim=tr.dim))
    engine = Engine(tae, model, GenerationConfig(cfg_scale=4.0, stop_threshold=0.0))
    frame_counts = [int(f) for f in str(args.frames).split(",")]
    rows = measure_first_frame_latency(engine, frame_counts, repeats=args.repeats, seed=args.seed)
    lines = ["frames,mode,repeat,latency_s"]
    lines += [f"{r['frames']},{r['mode']},{r['repeat']},{r['latency_s']:.6f}" for r in rows]
    csv = "\n".join(lines) + "\n"
    if args.out:
        args.out.write_text(csv)
    else:
        print(csv)
    slopes = latency_slopes(rows)
    for mode, s in slopes.items():
        print(
            f"{mode}: slope {s['slope']*1e3:.4f} ms/frame, "
            f"95% CI [{s['ci_low']*1e3:.4f}, {s['ci_high']*1e3:.4f}], "
            f"mean latency {s['mean_latency']*1e3:.1f} ms"
        )
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    app = create_app(
        tae_path=args.tae,
        ar_path=args.ar,
        cfg_scale=args.cfg_scale,
        stop_threshold=args.stop_threshold,
        fps_pace=args.fps_pace,
        interrupt=args.interrupt,
        seed=args.seed,
    )
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-tae": cmd_train_tae,
    "train-ar": cmd_train_ar,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "bench-latency": cmd_bench_latency,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    args = _apply_config_defaults(parser, argv)
    if not args.command:
        parser.print_usage()
        return 2
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
