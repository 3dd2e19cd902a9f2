"""``irmlab`` command-line entry point."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checks, experiments, io

COMMANDS = {
    "linear-threshold": experiments.cmd_linear_threshold,
    "mu-tilde": experiments.cmd_mu_tilde_sweep,
    "nonlinear": experiments.cmd_nonlinear_failure,
    "sample": experiments.cmd_sample,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irmlab", description="Invariant risk minimization laboratory")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML or JSON config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "verify"):
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = io.load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.command == "verify":
        results = checks.run_checks()
        rep = checks.report(results)
        io.write_json(args.out / "verify.json", rep)
        for r in results:
            print(f"{r.status.upper():4s}  {r.name:28s} measured={r.measured:.4g} threshold={r.threshold:.4g}")
        return 0 if rep["passed"] else 1
    COMMANDS[args.command](config, out=args.out, jobs=args.jobs)
    print(f"wrote results to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
