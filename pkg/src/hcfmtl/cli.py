"""Command-line entry point.

    hcfmtl run      --config cfg.yaml [--out DIR] [--seed N] [--mode MODE]
    hcfmtl baseline --config cfg.yaml [--out DIR] [--seed N]
    hcfmtl verify   [--suite NAME ...]
    hcfmtl table    [--baseline DIR RUN_DIR ...]

Exit codes: 0 success, 1 verification or runtime failure, 2 config error.
Output directories default to ``$HCFMTL_OUT_ROOT/<mode>-seed<N>`` (root ``runs``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from hcfmtl.config import ConfigError, dump_config, parse_config, with_overrides
from hcfmtl.federation import MODES, ExperimentConfig, run_experiment, run_with_baseline
from hcfmtl.metrics import DeltaMError, delta_m
from hcfmtl.report import emit, final_metrics_from_rows, load_metrics

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
OUT_ROOT_ENV = "HCFMTL_OUT_ROOT"

log = logging.getLogger("hcfmtl")


def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    return with_overrides(cfg, seed=args.seed, mode=getattr(args, "mode", None))


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ROOT_ENV, "runs")) / f"{cfg.mode}-seed{cfg.seed}"


def _write(result, cfg: ExperimentConfig, out: Path) -> None:
    emit(result, out)
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    if args.checkpoint or args.no_baseline:
        result = run_experiment(cfg, checkpoint=args.checkpoint, resume=args.resume)
    else:
        result, _ = run_with_baseline(cfg)
    _write(result, cfg, out)
    msg = f"wrote {out}"
    if result.delta_m is not None:
        msg += f"  delta_m={result.delta_m:+.2f}%"
    print(msg)
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = with_overrides(_load(args), mode="local")
    out = _out_dir(args, cfg)
    result = run_experiment(cfg)
    result.delta_m = 0.0
    _write(result, cfg, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from hcfmtl.verify import SUITES, run_suites

    names = args.suite or list(SUITES)
    try:
        results = run_suites(names)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    failed = None
    for res in results:
        print(f"[{'PASS' if res.ok else 'FAIL'}] {res.name}")
        for chk in res.checks:
            if not chk.ok or args.verbose:
                print(f"    {'ok ' if chk.ok else 'BAD'} {chk.name} {chk.detail}".rstrip())
        if not res.ok and failed is None:
            failed = (res.name, res.first_failure())
    if failed:
        suite, chk = failed
        print(f"first failing property: {suite}: {chk.name}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_table(args) -> int:
    if not args.runs:
        from hcfmtl.reference import TABLES, recompute

        for table, spec in TABLES.items():
            print(table)
            for method in spec["methods"]:
                got, reported = recompute(table, method)
                print(f"  {method:<20} recomputed {got:+7.2f}  reported {reported:+7.2f}")
        return EXIT_OK
    if not args.baseline:
        print("error: --baseline DIR is required when run directories are given", file=sys.stderr)
        return EXIT_CONFIG
    base = final_metrics_from_rows(load_metrics(args.baseline))
    print(f"{'run':<40} delta_m%")
    for run in args.runs:
        fed = final_metrics_from_rows(load_metrics(run))
        print(f"{str(run):<40} {delta_m(fed, base):+.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcfmtl", description="Hetero-client federated multi-task learning simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_mode: bool):
        sp.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--seed", type=int, help="master seed override")
        if with_mode:
            sp.add_argument("--mode", choices=MODES, help="aggregation mode override")

    run = sub.add_parser("run", help="run an experiment (and its local baseline for delta_m)")
    common(run, True)
    run.add_argument("--no-baseline", action="store_true", help="skip the local baseline run")
    run.add_argument("--checkpoint", type=Path, help="write round state here after every round")
    run.add_argument("--resume", action="store_true", help="continue from --checkpoint if it exists")
    run.set_defaults(func=cmd_run)

    base = sub.add_parser("baseline", help="local training only")
    common(base, False)
    base.set_defaults(func=cmd_baseline)

    ver = sub.add_parser("verify", help="run the self-check suites")
    ver.add_argument("--suite", action="append", help="suite name (repeatable)")
    ver.set_defaults(func=cmd_verify)

    tab = sub.add_parser("table", help="delta_m of run directories against a baseline directory")
    tab.add_argument("runs", nargs="*", type=Path)
    tab.add_argument("--baseline", type=Path)
    tab.set_defaults(func=cmd_table)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DeltaMError, OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
