"""Command-line entry point: ``diffpref <stage> [--config F] [--seed N] [--out-dir D] [--method M]``."""

from __future__ import annotations

import argparse
import logging
import sys
import time

from . import pipeline as pl
from .prefdata import DataFormatError

COMMANDS = ("gen-data", "label", "train-reward", "annotate", "train-policy", "evaluate", "pipeline")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags be given before or after the subcommand
    p.add_argument("--config", default=argparse.SUPPRESS, help="YAML/JSON config or a run manifest")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    p.add_argument("--out-dir", default=argparse.SUPPRESS, help="override the run directory")
    p.add_argument("--method", default=argparse.SUPPRESS,
                   help=f"reward source(s), comma separated; from {', '.join(pl.METHODS)}")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="diffpref", parents=[common],
                                     description="Preference reward learning and offline RL on toy tasks.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "roll out the behavior policy; write dataset, reward sidecar and anchors",
        "label": "label segment pairs with the scripted teacher",
        "train-reward": "fit the dpr / cdpr / bt reward model",
        "annotate": "write the dataset relabeled with learned (or oracle/constant) rewards",
        "train-policy": "train TD3+BC or IQL on an annotated dataset",
        "evaluate": "normalized-score report over several seeds",
        "pipeline": "run every stage for every configured method and compare",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return parser


def _methods(args, cfg) -> list[str]:
    raw = getattr(args, "method", None)
    if raw is None:
        return list(cfg.methods)
    methods = [m.strip() for m in raw.split(",") if m.strip()]
    for m in methods:
        if m not in pl.METHODS:
            raise pl.ConfigError(f"--method: unknown method {m!r}; choose from {list(pl.METHODS)}")
    return methods


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = pl.load_config(getattr(args, "config", None), seed=getattr(args, "seed", None),
                         out_dir=getattr(args, "out_dir", None))
    methods = _methods(args, cfg)
    cmd = args.command
    if cmd == "show-config":
        print(pl.dump_config(cfg), end="")
        return 0
    pl.ensure_writable(cfg.out_dir)
    stages, timings = {}, {}
    if cmd == "pipeline":
        pl.cmd_pipeline(cfg, methods)
        print(open(pl.RunPaths(cfg.out_dir).comparison_csv).read(), end="")
        return 0
    if cmd in ("gen-data", "label"):
        jobs = [(cmd, None)]
    elif cmd == "train-reward":
        skip = [m for m in methods if m not in pl.TRAINABLE]
        if len(skip) == len(methods):
            raise pl.UnsupportedError(f"method {skip[0]!r} needs no reward training; "
                                      f"train-reward supports {list(pl.TRAINABLE)}")
        if skip:
            logging.getLogger(__name__).info("train-reward: skipping %s (no model to train)", ", ".join(skip))
        jobs = [(cmd, m) for m in methods if m in pl.TRAINABLE]
    else:
        jobs = [(cmd, m) for m in methods]
    fn = {"gen-data": pl.cmd_gen_data, "label": pl.cmd_label, "train-reward": pl.cmd_train_reward,
          "annotate": pl.cmd_annotate, "train-policy": pl.cmd_train_policy, "evaluate": pl.cmd_evaluate}[cmd]
    for name, m in jobs:
        key = name if m is None else f"{name}/{m}"
        t0 = time.perf_counter()
        stages[key] = fn(cfg) if m is None else fn(cfg, m)
        timings[key] = time.perf_counter() - t0
        if name == "evaluate":
            print(f"{m}: {stages[key]['mean']:.2f} +- {stages[key]['std']:.2f}")
    if cmd == "evaluate" and len(methods) > 1:
        stages["comparison"] = pl.write_comparison(cfg, methods)
    pl.write_manifest(cfg, stages, timings)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except pl.PipelineError as e:
        print(f"error [{e.category}]: {e}", file=sys.stderr)
        return e.exit_code
    except DataFormatError as e:
        print(f"error [data-format]: {e}", file=sys.stderr)
        return 7
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
