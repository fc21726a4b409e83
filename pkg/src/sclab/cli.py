"""Command-line entry point: ``python3 -m sclab <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys

from . import pipeline
from .config import load_config, resolved_json
from .errors import (ConfigError, DivergedError, ParseError, SGLDDivergedError,
                     TrainingDivergedError)
from .evaluation import METRIC_KEYS

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

STAGE_COMMANDS = ("gen-data", "train-score", "train-classifier", "train-cond", "sample", "eval")


def _parser():
    p = argparse.ArgumentParser(prog="sclab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS + ("run",):
        s = sub.add_parser(name)
        s.add_argument("--config", help="experiment JSON (default: <out>/config.json)")
        s.add_argument("--out", required=True, help="run directory")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        s.add_argument("--dry-run", action="store_true",
                       help="validate the config and print the resolved pipeline")
    c = sub.add_parser("compare")
    c.add_argument("runs", nargs="+", help="run directories")
    c.add_argument("--out", required=True, help="output directory for compare.{csv,json}")
    return p


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _stage_config(args):
    path = args.config or os.path.join(args.out, "config.json")
    if args.seed is None and not args.config:
        resolved = os.path.join(args.out, "resolved_config.json")
        if os.path.exists(resolved):
            with open(resolved) as fh:
                seed = json.load(fh).get("seed")
            return load_config(path, seed)
    return load_config(path, args.seed)


def _dry_run(cfg, stages):
    print(json.dumps({"preset": cfg.preset, "stages": stages,
                      "config": json.loads(resolved_json(cfg))}, indent=2))


def _run(args):
    cfg = load_config(args.config, args.seed) if args.config else None
    if cfg is None:
        raise ConfigError("run needs --config")
    if args.dry_run:
        _dry_run(cfg, cfg.pipeline())
        return EXIT_OK
    os.makedirs(args.out, exist_ok=True)
    dest = os.path.join(args.out, "config.json")
    if os.path.abspath(args.config) != os.path.abspath(dest):
        shutil.copyfile(args.config, dest)
    with open(os.path.join(args.out, "resolved_config.json"), "w") as fh:
        fh.write(resolved_json(cfg) + "\n")
    report = pipeline.run_pipeline(cfg, args.out)
    print(json.dumps(report.values, indent=2))
    return EXIT_OK


def _stage(args):
    cfg = _stage_config(args)
    if args.dry_run:
        _dry_run(cfg, [args.command])
        return EXIT_OK
    os.makedirs(args.out, exist_ok=True)
    if args.command == "train-cond" and cfg.uses_classifier:
        raise ConfigError(f"preset {cfg.preset!r} has no conditional network")
    if args.command in ("train-score", "train-classifier") and not cfg.uses_classifier:
        raise ConfigError(f"preset {cfg.preset!r} has no classifier pipeline")
    result = pipeline.STAGES[args.command](cfg, args.out)
    if args.command == "eval":
        print(json.dumps(result.values, indent=2))
    return EXIT_OK


def compare(run_dirs, out):
    """Merge each run's metrics into ``compare.csv`` and ``compare.json``.

    Rows follow the input order; missing metrics become empty cells / null.
    """
    rows = []
    for d in run_dirs:
        with open(os.path.join(d, "metrics.json")) as fh:
            metrics = json.load(fh)
        preset = None
        for name in ("resolved_config.json", "config.json"):
            p = os.path.join(d, name)
            if os.path.exists(p):
                with open(p) as fh:
                    preset = json.load(fh).get("preset")
                break
        rows.append({"run": d, "preset": preset, **metrics})
    keys = list(METRIC_KEYS)
    keys += sorted({k for r in rows for k in r} - set(keys) - {"run", "preset"})
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "compare.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "preset"] + keys)
        for r in rows:
            w.writerow([r["run"], r["preset"]] + ["" if r.get(k) is None else repr(r[k])
                                                   for k in keys])
    table = [{"run": r["run"], "preset": r["preset"], **{k: r.get(k) for k in keys}}
             for r in rows]
    with open(os.path.join(out, "compare.json"), "w") as fh:
        json.dump(table, fh, indent=2)
        fh.write("\n")
    return table


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "compare":
            compare(args.runs, args.out)
            return EXIT_OK
        if args.command == "run":
            return _run(args)
        return _stage(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except (TrainingDivergedError, DivergedError, SGLDDivergedError) as exc:
        _err(str(exc))
        return EXIT_DIVERGED
    except (OSError, ParseError) as exc:
        _err(f"io: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
