"""Command-line interface: train, eval, diagnose, and gen-data.

Configuration comes from an optional JSON file (the same schema that
`TrainConfig.to_dict` produces) with individual flags layered on top.
The output directory resolves from `--outdir`, then the
DEPTHALIGN_OUTDIR environment variable, then `./depthalign_out`.

Exit codes: 0 success, 2 configuration problems, 3 data problems,
4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .bins import DepthRange
from .data import (
    DEFAULT_DEPTH_SCALE,
    SceneConfig,
    generate_dataset,
    load_manifest,
    read_sample,
    write_dataset,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    MissingFileError,
    ValidationError,
)
from .network import NetworkConfig
from .training import (
    TrainConfig,
    diagnose,
    evaluate,
    load_checkpoint,
    restore_model,
    train,
)

DEFAULT_OUTDIR = "depthalign_out"
OUTDIR_ENV_VAR = "DEPTHALIGN_OUTDIR"


def resolve_outdir(flag_value: str | None) -> Path:
    """Flag beats environment beats the default directory name."""
    if flag_value:
        return Path(flag_value)
    env = os.environ.get(OUTDIR_ENV_VAR)
    if env:
        return Path(env)
    return Path(DEFAULT_OUTDIR)


def _load_config_dict(path: str | None) -> dict:
    if path is None:
        return {}
    file = Path(path)
    if not file.is_file():
        raise ConfigError(f"config file not found: {file}")
    try:
        data = json.loads(file.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {file} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {file} must hold a JSON object")
    return data


def _default_stage_dicts() -> list[dict]:
    return [
        {"epochs": 10, "max_steps": None, "alpha": 10.0, "beta": 0.1, "gamma": 0.0,
         "u": 0.85, "v": 0.0, "weight_mode": "zero"},
        {"epochs": 10, "max_steps": None, "alpha": 10.0, "beta": 0.1, "gamma": 0.1,
         "u": 0.85, "v": 1.0, "weight_mode": "depth_related"},
    ]


def _apply_train_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    """Layer CLI flags over a config dict (flags win)."""
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.batch_size is not None:
        cfg["batch_size"] = args.batch_size
    if args.dataset_size is not None:
        cfg["dataset_size"] = args.dataset_size
    if args.manifest is not None:
        cfg["manifest_path"] = args.manifest
    if args.augment:
        cfg["augment"] = True
    if args.reset_optimizer:
        cfg["reset_optimizer_between_stages"] = True

    if args.lr is not None or args.weight_decay is not None:
        opt = cfg.setdefault("optimizer", {})
        if args.lr is not None:
            opt["lr"] = args.lr
        if args.weight_decay is not None:
            opt["weight_decay"] = args.weight_decay

    network_flags = {
        "num_bins": args.num_bins,
        "embed_dim": args.embed_dim,
    }
    if any(v is not None for v in network_flags.values()) or args.no_pst or args.height or args.width or "network" in cfg:
        # partial records in config files are fine; fill the gaps with defaults
        net = {**NetworkConfig().to_dict(), **cfg.get("network", {})}
        cfg["network"] = net
        for key, value in network_flags.items():
            if value is not None:
                net[key] = value
        if args.no_pst:
            net["use_pst"] = False
        if args.height or args.width:
            default_hw = net.get("input_hw", [64, 64])
            net["input_hw"] = [args.height or default_hw[0], args.width or default_hw[1]]

    stage_flags = (args.epochs_local, args.epochs_global, args.steps_local, args.steps_global)
    if any(v is not None for v in stage_flags):
        stages = cfg.get("stages") or _default_stage_dicts()
        if len(stages) < 2:
            raise ConfigError("stage overrides need the standard two-stage schedule")
        if args.epochs_local is not None:
            stages[0]["epochs"] = args.epochs_local
        if args.epochs_global is not None:
            stages[1]["epochs"] = args.epochs_global
        if args.steps_local is not None:
            stages[0]["max_steps"] = args.steps_local
        if args.steps_global is not None:
            stages[1]["max_steps"] = args.steps_global
        cfg["stages"] = stages
    return cfg


def _load_model(checkpoint_path: str):
    path = Path(checkpoint_path)
    if not path.is_file():
        raise MissingFileError(f"checkpoint not found: {path}")
    checkpoint = load_checkpoint(path)
    return restore_model(checkpoint)


def _eval_samples(args: argparse.Namespace, config: TrainConfig):
    """Dataset for eval/diagnose: a manifest if given, else synthetic scenes."""
    if args.manifest is not None:
        manifest = load_manifest(args.manifest)
        return [read_sample(manifest, i) for i in range(len(manifest))]
    scene = SceneConfig(
        height=config.network.input_hw[0],
        width=config.network.input_hw[1],
        depth_range=config.network.depth_range,
    )
    return generate_dataset(scene, args.count, base_seed=args.seed)


def cmd_train(args: argparse.Namespace) -> int:
    cfg_dict = _apply_train_overrides(_load_config_dict(args.config), args)
    config = TrainConfig.from_dict(cfg_dict)
    outdir = resolve_outdir(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    result = train(config, out_dir=outdir, log_fn=print)
    print(f"trained {len(result.logs)} steps; artifacts in {outdir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, config = _load_model(args.checkpoint)
    samples = _eval_samples(args, config)
    result = evaluate(
        model,
        samples,
        num_bins=args.hist_bins,
        ground_truth_passthrough=args.passthrough,
    )
    outdir = resolve_outdir(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = result.write_csv(outdir / "evaluation.csv")
    summary = result.summary()
    (outdir / "evaluation_summary.txt").write_text(summary + "\n")
    print(summary)
    print(f"per-sample metrics in {csv_path}")
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    model, config = _load_model(args.checkpoint)
    if args.manifest is not None:
        manifest = load_manifest(args.manifest)
        sample = read_sample(manifest, args.index)
    else:
        scene = SceneConfig(
            height=config.network.input_hw[0],
            width=config.network.input_hw[1],
            depth_range=config.network.depth_range,
        )
        samples = generate_dataset(scene, args.index + 1, base_seed=args.seed)
        sample = samples[args.index]
    outdir = resolve_outdir(args.outdir)
    paths = diagnose(
        model,
        sample,
        outdir,
        num_bins=args.hist_bins,
        ground_truth_passthrough=args.passthrough,
    )
    for name, path in paths.items():
        print(f"{name}: {path}")
    print((outdir / "report.txt").read_text().rstrip())
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    depth_range = DepthRange(args.d_min, args.d_max)
    scene = SceneConfig(
        height=args.height,
        width=args.width,
        depth_range=depth_range,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
    )
    samples = generate_dataset(scene, args.count, base_seed=args.seed)
    manifest_path = write_dataset(samples, args.out, depth_range, depth_scale=args.depth_scale)
    print(f"wrote {args.count} samples; manifest at {manifest_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthalign",
        description="Toy monocular depth estimation with adaptive depth bins.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the two-stage training schedule")
    p_train.add_argument("--config", help="JSON config file (TrainConfig schema)")
    p_train.add_argument("--outdir", help=f"output directory (or ${OUTDIR_ENV_VAR})")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--dataset-size", type=int)
    p_train.add_argument("--manifest", help="train on an on-disk dataset instead of synthetic scenes")
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--weight-decay", type=float)
    p_train.add_argument("--num-bins", type=int)
    p_train.add_argument("--embed-dim", type=int)
    p_train.add_argument("--height", type=int)
    p_train.add_argument("--width", type=int)
    p_train.add_argument("--no-pst", action="store_true", help="uniform-bin convolutional baseline")
    p_train.add_argument("--augment", action="store_true")
    p_train.add_argument("--reset-optimizer", action="store_true",
                         help="fresh optimizer state at each stage transition")
    p_train.add_argument("--epochs-local", type=int)
    p_train.add_argument("--epochs-global", type=int)
    p_train.add_argument("--steps-local", type=int, help="hard step cap for stage 1")
    p_train.add_argument("--steps-global", type=int, help="hard step cap for stage 2")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--outdir", help=f"output directory (or ${OUTDIR_ENV_VAR})")
    p_eval.add_argument("--manifest", help="evaluate on an on-disk dataset")
    p_eval.add_argument("--count", type=int, default=20, help="synthetic sample count")
    p_eval.add_argument("--seed", type=int, default=0, help="synthetic base seed")
    p_eval.add_argument("--hist-bins", type=int, default=100)
    p_eval.add_argument("--passthrough", action="store_true",
                        help="debug: score the ground truth against itself")
    p_eval.set_defaults(func=cmd_eval)

    p_diag = sub.add_parser("diagnose", help="render prediction, error map, and histograms")
    p_diag.add_argument("--checkpoint", required=True)
    p_diag.add_argument("--outdir", help=f"output directory (or ${OUTDIR_ENV_VAR})")
    p_diag.add_argument("--manifest", help="take the sample from an on-disk dataset")
    p_diag.add_argument("--index", type=int, default=0, help="sample index")
    p_diag.add_argument("--seed", type=int, default=0, help="synthetic base seed")
    p_diag.add_argument("--hist-bins", type=int, default=100)
    p_diag.add_argument("--passthrough", action="store_true",
                        help="debug: diagnose the ground truth against itself")
    p_diag.set_defaults(func=cmd_diagnose)

    p_gen = sub.add_parser("gen-data", help="write a synthetic PNG dataset with a manifest")
    p_gen.add_argument("--out", required=True, help="dataset directory")
    p_gen.add_argument("--count", type=int, default=50)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--height", type=int, default=64)
    p_gen.add_argument("--width", type=int, default=64)
    p_gen.add_argument("--d-min", type=float, default=0.0)
    p_gen.add_argument("--d-max", type=float, default=10.0)
    p_gen.add_argument("--min-objects", type=int, default=2)
    p_gen.add_argument("--max-objects", type=int, default=8)
    p_gen.add_argument("--depth-scale", type=float, default=DEFAULT_DEPTH_SCALE,
                       help="meters per stored 16-bit unit")
    p_gen.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, CheckpointError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
