"""``revrnn`` command line: verify, train, memstats.

Exit codes: 0 success, 1 verification (or reversal) failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .fixedpoint import FixedPointOverflow
from .revgrad import ReversalMismatch
from .tasks import CELL_NAMES, ConfigError, load_config, validate_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _bits(v: str):
    if v.lower() == "none":
        return None
    if v not in ("1", "2", "3", "5"):
        raise argparse.ArgumentTypeError("bits limit must be one of 1, 2, 3, 5, none")
    return int(v)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="revrnn", description="Reversible RNNs with exact fixed-point buffers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verify", help="run the invariant suites")
    v.add_argument("--suite", action="append", choices=["buffer", "noise", "cells", "limbs", "grad", "accounting"],
                   help="suite to run (repeatable; default all)")
    v.add_argument("--cases", type=int, help="cases per suite (suite-specific meaning)")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--inject-fault", action="store_true", help="flip one buffer bit in the cell reversal suite")

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("config", nargs="?", help="config file (not needed with --resume)")
    t.add_argument("--out", help="run directory (default runs/<config stem>)")
    t.add_argument("--cell", choices=CELL_NAMES)
    t.add_argument("--bits-limit", type=_bits, default=argparse.SUPPRESS, metavar="{1,2,3,5,none}")
    t.add_argument("--attention", help="emb | slice:K | emb+slice:K | full")
    t.add_argument("--rh", type=int)
    t.add_argument("--rz", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--resume", metavar="RUN_DIR", help="continue a run from its checkpoint")
    t.add_argument("--no-wall-clock", action="store_true", help="log wall_ms as 0 so logs are byte-reproducible")
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--quiet", action="store_true")

    m = sub.add_parser("memstats", help="summarize buffer memory of a run")
    m.add_argument("run_dir")
    m.add_argument("--json", action="store_true", help="print only the JSON report")
    return p


def cmd_verify(args) -> int:
    from .verify import run_suites

    results = run_suites(args.suite, args.cases, args.seed, args.inject_fault)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:12s} {r.passed:>9d}/{r.total:<9d} {status:4s} {r.seconds:7.2f}s")
        if r.failure:
            print(f"  first failing case: {r.failure}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def _overrides(args) -> dict:
    out = {}
    for key in ("cell", "attention", "rh", "rz", "seed", "steps", "batch"):
        val = getattr(args, key)
        if val is not None:
            out[key] = val
    if hasattr(args, "bits_limit"):
        out["bits_limit"] = args.bits_limit
    return out


def cmd_train(args) -> int:
    from .experiment import start_run, train

    echo = (lambda *a, **k: None) if args.quiet else print
    if args.resume:
        out = Path(args.resume)
        cfg = load_config(out / "config.txt")
        if args.steps is not None:
            cfg["steps"] = args.steps
    else:
        if not args.config:
            raise ConfigError("a config file is required unless --resume is given")
        cfg = load_config(args.config)
        cfg.update(_overrides(args))
        validate_config(cfg, path=args.config)
        out = Path(args.out or Path("runs") / Path(args.config).stem)
    run = start_run(cfg, out, timing=not args.no_wall_clock, echo=echo, resume=bool(args.resume))
    try:
        last = train(run, log_every=args.log_every)
    except ReversalMismatch as exc:
        print(f"reversal check failed at step {run.step}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except FixedPointOverflow as exc:
        print(f"fixed-point overflow at step {run.step}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if not last and cfg["eval_every"] == 0:
        last = run.evaluate()
    echo("final evaluation: " + ", ".join(f"{k} {v:.4f}" for k, v in last.items()))
    echo(f"run directory: {out}")
    return EXIT_OK


def cmd_memstats(args) -> int:
    from .experiment import format_table, memstats, report_json

    run_dir = Path(args.run_dir)
    if not (run_dir / "log.csv").exists() or not (run_dir / "config.txt").exists():
        print(f"revrnn memstats: {run_dir} is not a completed run directory", file=sys.stderr)
        return EXIT_USAGE
    report = memstats(run_dir)
    text = report_json(report)
    (run_dir / "memstats.json").write_text(text + "\n", encoding="utf-8")
    if not args.json:
        print(format_table(report))
        print()
    print(text)
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "train": cmd_train, "memstats": cmd_memstats}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"revrnn: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"revrnn: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
