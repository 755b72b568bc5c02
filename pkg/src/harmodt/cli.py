"""Command-line entry point: ``gen-data``, ``train``, ``eval`` and ``export``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from . import harness
from .config import ALGOS, RunConfig, load_config
from .exceptions import HarmoError

log = logging.getLogger("harmodt")


def _add_config_flags(p: argparse.ArgumentParser, skip=()):
    p.add_argument("--config", help="key = value file with run settings")
    group = p.add_argument_group("run settings (override the config file)")
    for f in fields(RunConfig):
        if f.name in skip:
            continue
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        group.add_argument(*names, dest=f.name, default=None, metavar=f.name.upper(),
                           help=f"default: {getattr(RunConfig(), f.name)!r}")


def _overrides(args, skip=()) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(RunConfig)
            if f.name not in skip and getattr(args, f.name, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harmodt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate offline datasets for a suite")
    _add_config_flags(p)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("train", help="train one model and save its run directory")
    _add_config_flags(p, skip=("algo",))
    p.add_argument("--algo", choices=ALGOS, default=None)
    p.add_argument("--paper-scale", action="store_true",
                   help="start from the full-size hyper-parameters")

    p = sub.add_parser("eval", help="evaluate a run directory under one protocol")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--protocol", required=True, choices=harness.PROTOCOLS)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--thresh", type=int, default=None, help="vote threshold for unseen tasks")
    p.add_argument("--data_dir", "--data-dir", dest="data_dir", default=None)

    p = sub.add_parser("export", help="write CSV/JSON summaries of run directories")
    p.add_argument("--results", required=True, help="a run directory or a folder of runs")
    p.add_argument("--dest", default=None, help="output folder (default: <results>/export)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except HarmoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "gen-data":
        cfg = load_config(args.config, _overrides(args))
        path = harness.prepare_data(cfg, overwrite=args.overwrite)
        print(path)
    elif args.command == "train":
        over = _overrides(args, skip=("algo",))
        if args.algo is not None:
            over["algo"] = args.algo
        cfg = load_config(args.config, over, paper_scale=args.paper_scale)
        result = harness.train(cfg)
        out = harness.save_run(result)
        print(out)
    elif args.command == "eval":
        result = harness.load_run(args.run)
        changes = {k: v for k, v in (("thresh", args.thresh), ("data_dir", args.data_dir))
                   if v is not None}
        if changes:
            result.config = result.config.replace(**changes).validate()
        report = harness.evaluate(result, args.protocol, episodes=args.episodes, seed=args.seed)
        path = harness.save_eval(report, args.run)
        print(json.dumps({"protocol": report.protocol, "metric": report.metric,
                          "mean": report.headline, "file": str(path)}))
    elif args.command == "export":
        paths = harness.export(args.results, args.dest)
        for p in paths.values():
            print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
