"""Command line entry point.

    fracenkf generate-data CFG [--out-dir DIR]
    fracenkf run {standard,two-stage,ns-two-stage,smoother} CFG [--out-dir DIR]
    fracenkf report RUN_DIR

``CFG`` is a config file or the name of a preset (``channel``, ``source``,
``hierarchical``).  ``run`` exits with status 0 only if every acceptance
check enabled in the config passes.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
METHODS = ("standard", "two-stage", "ns-two-stage", "smoother")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default: $FRACENKF_THREADS or library default)")
    common.add_argument("--out-dir", help="run directory")
    scale = common.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", dest="scale", action="store_const", const="desk",
                       help="start from the desk-scale preset (default)")
    scale.add_argument("--paper-scale", dest="scale", action="store_const", const="full",
                       help="start from the full-size preset")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fracenkf", description="Two-stage EnKF experiments")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate-data", parents=[common], help="synthetic observations only")
    g.add_argument("config")
    r = sub.add_parser("run", parents=[common], help="run a filter and write all artefacts")
    r.add_argument("method", choices=METHODS)
    r.add_argument("config")
    rp = sub.add_parser("report", help="recompute metrics of a finished run")
    rp.add_argument("run_dir")
    rp.add_argument("-v", "--verbose", action="store_true")
    return p


def _set_threads(n):
    if n is None:
        n = os.environ.get("FRACENKF_THREADS")
    if n is not None:
        for v in THREAD_VARS:
            os.environ[v] = str(int(n))


def _load(args):
    import dataclasses
    from pathlib import Path

    from .config import load_config
    from .setups import preset

    scale = args.scale or "desk"
    if Path(args.config).exists():
        cfg = load_config(args.config, scale=scale)
    else:
        cfg = preset(args.config, scale)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _print_checks(m) -> None:
    for name, c in m["acceptance"].items():
        print(f"{'PASS' if c['pass'] else 'FAIL'} {name}: {c['value']:.4g} (threshold {c['threshold']:g})")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "report":
        _set_threads(args.threads)
    from .config import ConfigError
    from . import runner

    try:
        if args.command == "report":
            m = runner.report(args.run_dir)
            _print_checks(m)
            print(f"report written to {args.run_dir}")
            return 0 if m["passed"] else 1
        cfg = _load(args)
        if args.command == "generate-data":
            out = runner.generate(cfg, args.out_dir or f"runs/{cfg.name}_data_s{cfg.seed}")
            print(f"data written to {out}")
            return 0
        out = args.out_dir or f"runs/{cfg.name}_{args.method}_s{cfg.seed}"
        m = runner.execute(cfg, args.method, out)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _print_checks(m)
    print(f"run written to {out}")
    return 0 if m["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
