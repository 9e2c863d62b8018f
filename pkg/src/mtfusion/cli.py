"""Command-line entry point: ``mtfusion <command> --config FILE``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import describe, parse_config
from .errors import MtfusionError
from .synthetic import SyntheticSpec, write_corpus

log = logging.getLogger("mtfusion")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtfusion", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", "-c", required=True, help="pipeline YAML config")
        return sp

    with_config("extract", "window the corpus into per-family CSVs")
    with_config("balance", "rebalance the training windows")
    sp = with_config("train", "train a stage (or all stages) into the model bundle")
    sp.add_argument("--stage", default="all", choices=pipeline.TRAIN_STAGES + ("all",))
    for name, help in (("predict", "write per-sample predictions"),
                       ("evaluate", "score predictions against windowed labels")):
        sp = with_config(name, help)
        sp.add_argument("--split", default="valid", choices=pipeline.SPLITS)
        sp.add_argument("--stage", default="auto", choices=pipeline.PREDICT_STAGES)
        if name == "predict":
            sp.add_argument("--term", default="short", help="term for --stage single-term")
    sp = with_config("gridsearch", "grid-search the learner on one term")
    sp.add_argument("--term", default="short")
    sp.add_argument("--group", default=None, help="restrict to one feature group")

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--config", "-c", help="write to the config's corpus path")
    sp.add_argument("--out", help="output directory (overrides --config)")
    defaults = SyntheticSpec()
    sp.add_argument("--videos", type=int, default=defaults.videos)
    sp.add_argument("--valid-videos", type=int, default=defaults.valid_videos)
    sp.add_argument("--duration", type=float, default=defaults.duration)
    sp.add_argument("--fps", type=float, default=defaults.fps)
    sp.add_argument("--seed", type=int, default=defaults.seed)
    sp.add_argument("--noise", type=float, default=defaults.noise)
    return p


def _synth(args) -> dict:
    if args.out:
        out = Path(args.out)
    elif args.config:
        cfg = parse_config(args.config)
        out = cfg.resolve(cfg.corpus)
    else:
        raise MtfusionError("synth needs --out or --config")
    if not 0 <= args.valid_videos <= args.videos:
        raise MtfusionError("--valid-videos must lie in [0, --videos]")
    spec = SyntheticSpec(videos=args.videos, valid_videos=args.valid_videos,
                         duration=args.duration, fps=args.fps, seed=args.seed, noise=args.noise)
    write_corpus(spec, out)
    return {"corpus": str(out), "videos": spec.videos}


def run(args) -> object:
    if args.command == "synth":
        return _synth(args)
    cfg = parse_config(args.config)
    log.info("effective config:\n%s", describe(cfg))
    if args.command == "extract":
        return pipeline.run_extract(cfg)
    if args.command == "balance":
        return pipeline.run_balance(cfg)
    if args.command == "train":
        return pipeline.run_train(cfg, args.stage)
    if args.command == "predict":
        return {k: str(v) for k, v in
                pipeline.run_predict(cfg, args.split, args.stage, args.term).items()}
    if args.command == "evaluate":
        report = pipeline.run_evaluate(cfg, args.split, args.stage)
        print(report.to_text())
        return None
    if args.command == "gridsearch":
        return pipeline.run_gridsearch(cfg, args.term, args.group)
    raise MtfusionError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        result = run(args)
    except MtfusionError as exc:
        msg = " ".join(str(exc).split())
        print(f"mtfusion: error kind={exc.kind} exit={exc.exit_code} message={json.dumps(msg)}",
              file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        msg = " ".join(f"{type(exc).__name__}: {exc}".split())
        print(f"mtfusion: error kind=internal exit=1 message={json.dumps(msg)}", file=sys.stderr)
        return 1
    if result is not None:
        print(json.dumps(result, sort_keys=True))
    return 0
