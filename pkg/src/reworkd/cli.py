"""Command-line interface.

    reworkd run --out DIR [--config FILE] [--seed N] [--set key=value ...]
    reworkd simulate --out DIR
    reworkd estimate --in DIR            # or --in data.csv --out DIR
    reworkd cate|policy|evaluate|sensitivity|diagnose|report --in DIR

Exit codes: 0 success, 1 validation error, 2 estimation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import DependencyError, EstimationError, ReworkError, StageError, ValidationError
from .pipeline import STAGES, PipelineConfig, run_pipeline, run_stage

log = logging.getLogger("reworkd")


def _apply_override(d: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ValidationError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = d
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def build_config(args) -> PipelineConfig:
    base: dict = {}
    work = Path(args.out or args.input or ".")
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    elif work.is_dir() and (work / "config.json").exists():
        base = json.loads((work / "config.json").read_text(encoding="utf-8"))
    cfg = PipelineConfig().to_dict()
    cfg.update(base)
    if args.input and Path(args.input).is_file():
        if not args.out:
            raise ValidationError("--out is required when --in names a data file")
        cfg["simulate"] = False
        cfg["input_path"] = str(args.input)
        work = Path(args.out)
    cfg["output_dir"] = str(work)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for s in args.set or []:
        _apply_override(cfg, s)
    return PipelineConfig.from_dict(cfg)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reworkd", description="Causal analysis of lot rework decisions.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run",) + STAGES:
        sp = sub.add_parser(name, help=f"run the {name} stage" if name != "run" else "run every stage")
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        sp.add_argument("--config", help="pipeline configuration JSON")
        sp.add_argument("--in", dest="input", help="working directory of earlier stages, or an input CSV")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. sim.n_lots=5000 (JSON values)")
    return p


def exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, ValidationError):
        return 1
    if isinstance(cause, (EstimationError, ReworkError)):
        return 2
    return 2


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        if args.command == "run":
            out = run_pipeline(cfg)
        else:
            run_stage(cfg, args.command)
            out = Path(cfg.output_dir)
    except (ReworkError, json.JSONDecodeError, OSError) as exc:
        msg = str(exc)
        if isinstance(exc, DependencyError):
            msg = f"[{args.command}] {exc}"
        print(f"error: {msg}", file=sys.stderr)
        if isinstance(exc, (json.JSONDecodeError, OSError)):
            return 1
        return exit_code(exc)
    print(f"{args.command}: outputs in {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
