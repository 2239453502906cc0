"""Command-line entry point.

Subcommands: gen-data (synthetic scenes), train, eval, gradcheck
(finite-difference verification), invariance (two-layer depth-invariance
demonstration plus fixed-dilation control). Exit codes: 0 success,
2 configuration/validation error, 3 numerical failure or failed check.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checks import invariance_check, run_gradcheck, small_gradcheck_spec
from .errors import ConfigError, NumericalError
from .metrics import format_report
from .network import NetworkSpec, build, load_checkpoint
from .optim import SgdState, schedule_from_dict
from .synth import DatasetConfig, generate_dataset, load_manifest, load_split
from .tensorio import write_pgm
from .training import TrainingConfig, evaluate, train_loop

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})")


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply repeated --set dotted.key=value entries onto a config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} crosses a non-object")
        node[parts[-1]] = value
    return config


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = _apply_overrides(_load_json(args.config), args.set or [])
    if args.seed is not None:
        config["seed"] = args.seed
    cfg = DatasetConfig.from_dict(config)
    manifest = generate_dataset(cfg, args.out, emit_pgm=args.emit_pgm)
    total = sum(s["count"] for s in manifest["splits"].values())
    print(f"wrote {total} scenes to {args.out}")
    for name in sorted(manifest["splits"]):
        split = manifest["splits"][name]
        lo, hi = split["distance_range_mm"]
        print(f"  {name}: {split['count']} scenes, distances [{lo}, {hi}] mm")
    print(f"mean depth {manifest['mean_depth_mm']:.2f} mm "
          f"(std {manifest['std_depth_mm']:.2f} mm)")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _apply_overrides(_load_json(args.config), args.set or [])
    manifest = load_manifest(args.data)

    if args.resume:
        net, optimizer, ckpt = load_checkpoint(args.resume)
    else:
        spec_dict = {k: v for k, v in config.items()
                     if k not in ("optimizer", "training")}
        if spec_dict.get("mean_depth_mm") is None:
            spec_dict["mean_depth_mm"] = manifest["mean_depth_mm"]
        spec = NetworkSpec.from_dict(spec_dict)
        net = build(spec)
        opt_cfg = config.get("optimizer", {})
        optimizer = SgdState(mu=float(opt_cfg.get("mu", 0.9)),
                             gamma=float(opt_cfg.get("gamma", 0.1)),
                             schedule=schedule_from_dict(opt_cfg.get("schedule", {})))

    train_cfg = TrainingConfig.from_dict(config.get("training", {}))
    if net.num_classes != manifest["num_classes"]:
        raise ConfigError(f"network predicts {net.num_classes} classes, dataset "
                          f"has {manifest['num_classes']}")
    train_samples = load_split(args.data, "train", manifest)
    val_samples = (load_split(args.data, "val", manifest)
                   if "val" in manifest["splits"] else [])

    records, best = train_loop(net, optimizer, train_cfg, train_samples,
                               val_samples, out_dir=args.out,
                               log_every=args.log_every)
    if records:
        print(f"trained {len(records)} iterations: "
              f"loss {records[0].loss:.4f} -> {records[-1].loss:.4f}")
    if best is not None:
        print(f"best validation {train_cfg.selection}: {best:.4f}")
    print(f"checkpoints and log in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    if net.num_classes != manifest["num_classes"]:
        raise ConfigError(f"checkpoint predicts {net.num_classes} classes, dataset "
                          f"has {manifest['num_classes']}")
    samples = load_split(args.data, args.split, manifest)
    scores = evaluate(net, samples)
    cm = scores.pop("_confusion")
    print(f"{len(samples)} samples from split {args.split!r}:")
    print(format_report(scores))
    if args.emit_pgm:
        out = Path(args.out) if args.out else Path(args.checkpoint) / "predictions"
        out.mkdir(parents=True, exist_ok=True)
        top = float(max(1, net.num_classes - 1))
        for sample in samples:
            predicted = net.predict(sample.depth)
            write_pgm(out / f"{sample.name}_pred.pgm",
                      predicted.labels.astype(float), max_value=top)
        print(f"predictions in {out}")
    if args.csv:
        cm.save_csv(args.csv)
        print(f"confusion matrix in {args.csv}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config:
        spec_dict = _load_json(args.config)
        if spec_dict.get("mean_depth_mm") is None:
            spec_dict["mean_depth_mm"] = 1000.0
        spec = NetworkSpec.from_dict(
            {k: v for k, v in spec_dict.items() if k not in ("optimizer", "training")})
    else:
        spec = small_gradcheck_spec()
    report = run_gradcheck(spec, seed=args.seed, eps=args.eps, tol=args.tol,
                           corrupt=args.corrupt_backward)
    for line in report.lines():
        print(line)
    if report.passed:
        print(f"gradcheck passed (worst rel err {report.worst:.3e} < {args.tol:g})")
        return EXIT_OK
    print(f"gradcheck FAILED (worst rel err {report.worst:.3e} >= {args.tol:g})")
    return EXIT_NUMERIC


def cmd_invariance(args) -> int:
    ok = True
    for one_dimensional in (True, False):
        report = invariance_check(args.ratio, one_dimensional=one_dimensional,
                                  seed=args.seed,
                                  multichannel=not one_dimensional)
        for line in report.lines():
            print(line)
        ok = ok and report.passed
    if ok:
        print("depth-invariance holds; fixed-dilation control breaks it as expected")
        return EXIT_OK
    print("depth-invariance check FAILED")
    return EXIT_NUMERIC


# -- argument plumbing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="damnet",
        description="Depth-adaptive multiscale convolution workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--config", required=True, help="dataset config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--emit-pgm", action="store_true", help="write PGM previews")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry (dotted path)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a network on a generated dataset")
    p.add_argument("--config", required=True, help="network/training config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory for checkpoints/logs")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry (dotted path)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", "--data-split", dest="split", default="test")
    p.add_argument("--emit-pgm", action="store_true",
                   help="write predicted label PGMs")
    p.add_argument("--out", default=None, help="directory for emitted PGMs")
    p.add_argument("--csv", default=None, help="write the confusion matrix as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the backward pass")
    p.add_argument("--config", default=None,
                   help="small network config (default: built-in 3-layer stack)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--corrupt-backward", action="store_true",
                   help="negative control: corrupt one gradient, must fail")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("invariance",
                       help="depth-invariance demonstration with control")
    p.add_argument("--g", dest="ratio", type=int, default=2,
                   help="integer distance ratio (>= 1)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_invariance)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
