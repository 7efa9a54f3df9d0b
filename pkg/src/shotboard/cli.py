"""Command-line interface.

Exit codes: 0 on success, 1 when a run fails, 2 for usage and configuration errors.
Every command writes ``run_manifest.json`` into its output directory; ``rerun``
replays it into a fresh directory.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .config import RunConfig, apply_overrides, load_ini
from .errors import ConfigError, ShotboardError, UsageError

MANIFEST = "run_manifest.json"
OUT_PLACEHOLDER = "{out}"
STUDY_NAMES = ("racl", "position", "cfg", "lambda")


# -- configuration ---------------------------------------------------------------------------

def run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_ini(args.config, cfg)
    return apply_overrides(cfg, getattr(args, "set", None)).validate()


def versions() -> dict:
    import scipy

    return {"shotboard": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def write_manifest(out: Path, argv: list[str], cfg: RunConfig | None, extra: dict | None = None) -> None:
    """Record how to reproduce this run; the output directory is kept symbolic."""
    out_str = str(out)
    recorded = [OUT_PLACEHOLDER if a == out_str else a for a in argv]
    manifest = {
        "argv": recorded,
        "cwd": os.getcwd(),
        "config": cfg.to_dict() if cfg is not None else None,
        "versions": versions(),
        **(extra or {}),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str, remedy: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist; {remedy}")
    return p


# -- commands -----------------------------------------------------------------------------------

def cmd_gen_data(args, argv) -> None:
    from .data import gen_dataset

    cfg = run_config(args)
    out = _out(args.out)
    manifest = gen_dataset(args.seed, args.n, out, cfg.data)
    write_manifest(out, argv, cfg, {"seed": args.seed, "n": manifest["n"]})


def _dataset_and_config(args, cfg: RunConfig):
    from .data import load_dataset
    from .data.synth import dataset_config

    root = _require(args.data, "dataset", "create one with `shotboard gen-data --out DIR`")
    samples = load_dataset(root)
    cfg = replace(cfg, data=dataset_config(root))
    return samples, cfg.for_data()


def cmd_train(args, argv) -> None:
    from .metrics import loss_chart
    from .model import DiT
    from .train import encode_dataset, load_state, train_loop

    cfg = run_config(args)
    samples, cfg = _dataset_and_config(args, cfg)
    out = _out(args.out)
    data = encode_dataset(samples, cfg.codec.build(), cfg.codec.repeat)
    meta = {"codec": cfg.to_dict()["codec"], "data": cfg.to_dict()["data"]}
    state = None
    if args.resume:
        state, _ = load_state(_require(args.resume, "checkpoint", "pass a ckpt_* or final directory"), cfg.train)
    model = state.model if state else DiT(cfg.model)
    state = train_loop(model, data, cfg.train, out, state=state, extra_meta=meta)
    loss_chart(state.history, out / "loss_curve.svg")
    write_manifest(out, argv, cfg, {"seed": cfg.train.seed, "steps": state.step})


def _load_checkpoint(path):
    from .checkpoint import read_manifest
    from .config import CodecConfig
    from .train import load_model

    ckpt = _require(path, "checkpoint", "train one with `shotboard train --out DIR` and pass DIR/final")
    meta = read_manifest(ckpt)
    if "codec" not in meta:
        raise UsageError(f"checkpoint {ckpt} does not record its codec; it was not written by `shotboard train`")
    codec_cfg = CodecConfig(**meta["codec"])
    return load_model(ckpt), codec_cfg, meta


def cmd_sample(args, argv) -> None:
    from .data import load_sample
    from .data.synth import read_ppm
    from .sampler import sample, write_outputs

    cfg = run_config(args)
    model, codec_cfg, _ = _load_checkpoint(args.checkpoint)
    scfg = replace(cfg.sample, mode=args.mode or cfg.sample.mode,
                   omega1=cfg.sample.omega1 if args.omega1 is None else args.omega1,
                   omega2=cfg.sample.omega2 if args.omega2 is None else args.omega2,
                   seed=cfg.sample.seed if args.seed is None else args.seed,
                   num_steps=args.steps or cfg.sample.num_steps).validate()
    shot_scripts = list(args.shot_script or [])
    ref_images = [read_ppm(_require(p, "reference image", "check the path")) for p in args.ref_image or []]
    ref_scripts = list(args.ref_script or [])
    preceding = [read_ppm(_require(p, "preceding shot", "check the path")) for p in args.preceding or []]
    if args.from_sample:
        s = load_sample(_require(args.from_sample, "sample", "point at a directory written by gen-data"))
        shot_scripts = shot_scripts or s.shot_scripts
        if scfg.mode == "ReferenceToShot" and not ref_images:
            ref_images, ref_scripts = s.ref_images, s.ref_scripts
        if scfg.mode == "ShotToShot" and not preceding:
            preceding = s.shot_images[:args.n_preceding]
    if not shot_scripts:
        raise UsageError("no shot scripts; pass --shot-script (repeatable) or --from-sample DIR")
    res = sample(model, codec_cfg.build(), shot_scripts, scfg, ref_images or None, ref_scripts or None,
                 preceding or None)
    out = _out(args.out)
    write_outputs(res, out, png=args.png)
    T.save_tensor(out / "latents.dstn", res.latents)
    write_manifest(out, argv, replace(cfg, sample=scfg), {"seed": scfg.seed})


def cmd_eval(args, argv) -> None:
    from .data import load_dataset
    from .metrics import evaluate_sample, report

    cfg = run_config(args)
    model, codec_cfg, meta = _load_checkpoint(args.checkpoint)
    root = _require(args.data, "dataset", "create one with `shotboard gen-data --out DIR`")
    samples = load_dataset(root)[: args.limit or None]
    codec = codec_cfg.build()
    scfg = replace(cfg.sample, seed=cfg.sample.seed if args.seed is None else args.seed)
    rows = []
    for s in samples:
        row = evaluate_sample(model, codec, s, scfg, codec_cfg.repeat)
        row.pop("images")
        rows.append(row)
    out = _out(args.out)
    report({args.name: rows}, out, meta={"checkpoint_step": meta.get("step")}, title="evaluation")
    write_manifest(out, argv, replace(cfg, sample=scfg), {"seed": scfg.seed})


def cmd_pipeline(args, argv) -> None:
    from .data.synth import write_json
    from .pipeline import file_judge, load_frames, oracle_judge, run_pipeline

    frames = load_frames(_require(args.frames, "frame directory", "write frames with `shotboard gen-stream`"))
    if args.judge == "file":
        if not args.labels:
            raise UsageError("--judge file needs --labels FILE with {\"labels\": [...]} per keyframe")
        judge = file_judge(_require(args.labels, "label file", "check the path"))
    else:
        judge = oracle_judge
    res = run_pipeline(frames, judge, args.window, args.overlap, args.threshold, args.beta)
    out = _out(args.out)
    write_json(out / "storyboards.json", res.to_dict())
    write_manifest(out, argv, None)


def cmd_gen_stream(args, argv) -> None:
    from .pipeline import gen_stream, save_stream

    frames, truth = gen_stream(args.seed, n_scenes=args.scenes, size=args.size)
    out = _out(args.out)
    save_stream(frames, truth, out)
    write_manifest(out, argv, None, {"seed": args.seed})


def cmd_ablate(args, argv) -> None:
    from .data import load_dataset
    from .studies import run_study

    cfg = run_config(args)
    samples, cfg = _dataset_and_config(args, cfg)
    eval_samples = load_dataset(args.eval_data) if args.eval_data else samples
    eval_samples = eval_samples[: args.eval_limit or None]
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    out = _out(args.out)

    def progress(arm, seed):
        print(f"{args.study}: {arm} seed {seed} done", file=sys.stderr, flush=True)

    run_study(args.study, samples, eval_samples, cfg.codec.build(), cfg.model, cfg.train, cfg.sample, seeds,
              out, cfg.codec.repeat, progress=None if args.quiet else progress)
    write_manifest(out, argv, cfg, {"seeds": seeds})


def cmd_rerun(args, argv) -> None:
    manifest_path = _require(args.manifest, "manifest", f"pass the {MANIFEST} of an earlier run")
    manifest = json.loads(Path(manifest_path).read_text())
    if "argv" not in manifest:
        raise UsageError(f"{manifest_path} has no recorded command line")
    out = str(Path(args.out).resolve())
    replay = [out if a == OUT_PLACEHOLDER else a for a in manifest["argv"]]
    if replay and replay[0] == "rerun":
        raise UsageError("refusing to rerun a rerun manifest; use the original run's manifest")
    here = os.getcwd()
    os.chdir(manifest["cwd"])
    try:
        code = main(replay)
    finally:
        os.chdir(here)
    if code:
        raise ShotboardError(f"replayed command exited with status {code}")


# -- parser ---------------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="INI file with [model] [train] [data] [sample] [codec] sections")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shotboard", description="Toy multi-shot storyboard generation.")
    parser.add_argument("--version", action="version", version=f"shotboard {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic storyboard dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate a storyboard from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("TextToShot", "ReferenceToShot", "ShotToShot"))
    p.add_argument("--from-sample", help="take scripts and references from a saved sample directory")
    p.add_argument("--shot-script", action="append")
    p.add_argument("--ref-image", action="append")
    p.add_argument("--ref-script", action="append")
    p.add_argument("--preceding", action="append", help="clean preceding shot image (ShotToShot)")
    p.add_argument("--n-preceding", type=int, default=1, help="preceding shots taken from --from-sample")
    p.add_argument("--omega1", type=float)
    p.add_argument("--omega2", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--png", action="store_true", help="also write contact_sheet.png")
    _common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--name", default="eval", help="run name in the report")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="cut, keyframe and group a frame stream")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--judge", choices=("oracle", "file"), default="oracle")
    p.add_argument("--labels")
    p.add_argument("--window", type=int, default=6)
    p.add_argument("--overlap", type=int, default=2)
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--beta", type=float, default=0.5)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("gen-stream", help="write a synthetic frame stream with ground truth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_stream)

    p = sub.add_parser("ablate", help="paired-seed ablation study")
    p.add_argument("study", choices=STUDY_NAMES)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-data", help="held-out dataset (default: the training set)")
    p.add_argument("--eval-limit", type=int, default=0)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("rerun", help="replay a run manifest into a new directory")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    if hasattr(args, "out") and args.command != "rerun":
        resolved = str(Path(args.out).resolve())
        argv = [resolved if a == args.out else a for a in argv]
        args.out = resolved
    try:
        args.func(args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"shotboard {args.command}: {exc}", file=sys.stderr)
        return 2
    except ShotboardError as exc:
        print(f"shotboard {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
