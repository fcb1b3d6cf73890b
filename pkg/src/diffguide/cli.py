"""Command-line entry point: ``diffguide <subcommand> [--config PATH] [--seed N] [--out DIR] [--checkpoint PATH]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .fusion import ConfigurationError
from .harness.config import dump_config, fixture_dir, load_config
from .harness.data import DatasetError, make_fixture

TRAIN_COMMANDS = {
    "train-baseline": "baseline",
    "train-diff": "diffusion_detector",
    "train-guided": "guided",
}
EVAL_COMMANDS = {"eval": "clean", "corrupt-eval": "corruption", "calibrate": "calibration"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffguide", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, regime in TRAIN_COMMANDS.items():
        s = sub.add_parser(name, help=f"train the {regime} regime")
        _common(s)
        if regime == "guided":
            s.add_argument("--checkpoint", required=True, help="diffusion-detector checkpoint (teacher)")
        s.add_argument("--iterations", type=int, help="override the configured iteration count")
    for name, mode in EVAL_COMMANDS.items():
        s = sub.add_parser(name, help=f"{mode} evaluation of a checkpoint")
        _common(s)
        s.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    s = sub.add_parser("make-fixture", help="write the synthetic two-domain dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, default=None)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--n-train", type=int, default=256)
    s.add_argument("--n-test", type=int, default=64)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _common(s: argparse.ArgumentParser) -> None:
    s.add_argument("--config", type=Path, default=None, help="YAML config (defaults to the desk preset)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", type=Path, default=Path("runs"))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigurationError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _run(args) -> int:
    if args.command == "make-fixture":
        out = args.out or fixture_dir()
        info = make_fixture(out, seed=args.seed, n_train=args.n_train, n_test=args.n_test, size=args.size)
        print(json.dumps({k: str(v) for k, v in info.items()}, indent=2))
        return 0

    # imported lazily so that `make-fixture` and `--help` stay quick
    from .harness.evaluate import evaluate
    from .harness.train import train

    if args.command in TRAIN_COMMANDS:
        overrides = {"regime": TRAIN_COMMANDS[args.command], "seed": args.seed,
                     "iterations": args.iterations}
        cfg = load_config(args.config, **overrides)
        args.out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, args.out / "config.yaml")
        res = train(cfg, args.out, teacher_checkpoint=getattr(args, "checkpoint", None), progress=True)
        print(json.dumps({"checkpoint": str(res.checkpoint), "loss_log": str(res.log_path)}))
        return 0

    cfg = load_config(args.config, seed=args.seed) if args.config else None
    seed = args.seed if args.seed is not None else 0
    report = evaluate(cfg, args.checkpoint, EVAL_COMMANDS[args.command], args.out, seed=seed)
    summary = {k: report[k] for k in ("map50", "ap50_95", "mpc", "rpc", "d_ece") if k in report}
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
