"""``hrf`` command line: run, verify and oracle subcommands."""
from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from ..errors import ConfigError
from .config import load_config
from .oracles import ORACLES, run_oracle
from .runner import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, run_experiment


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hrf", description="harmonic-Ricci flow experiments on periodic grids")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config and write series.csv / report.json")
    r.add_argument("config")
    v = sub.add_parser("verify", help="validate a config without running it")
    v.add_argument("config")
    o = sub.add_parser("oracle", help="run a named standalone oracle")
    o.add_argument("name", choices=sorted(ORACLES))
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "oracle":
        out = run_oracle(args.name)
        print(json.dumps(out, indent=2, sort_keys=True))
        return EXIT_OK if out["pass"] else EXIT_FAIL
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "verify":
        print(f"{args.config}: ok ({len(cfg.checks)} checks)")
        return EXIT_OK
    res = run_experiment(cfg)
    for c in res.report["checks"]:
        print(f"{c['id']:<16} {c['verdict']:<13} worst={c['worst_violation']}")
    if "error" in res.report:
        print(f"{res.report['status']}: {res.report['error']}", file=sys.stderr)
    return res.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
