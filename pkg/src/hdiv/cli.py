"""Command-line entry point: ``hdiv simulate | analyze | check``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, HdivError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK_FAILED = 0, 1, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="hdiv", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the Monte Carlo study")
    s.add_argument("--config", type=Path, help="flat key = value settings file")
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--methods", help="comma-separated subset of oracle,stepwise,non-orthogonal,double-selection")
    s.add_argument("--workers", type=int)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--dump-raw", action="store_true", help="also write every replication to raw.tsv")
    s.add_argument("--robust-se", action="store_true", default=None,
                   help="compute size with the sandwich SE instead of the homoscedastic IV SE")

    a = sub.add_parser("analyze", help="run the estimator on a CSV file")
    a.add_argument("--csv", type=Path, required=True)
    a.add_argument("--roles", type=Path, required=True, help="column = role file")
    a.add_argument("--level", type=float, default=0.95)
    a.add_argument("--config", type=Path, help="Lasso settings (c, gamma, kkt_tol, ...)")
    a.add_argument("--out", type=Path)

    c = sub.add_parser("check", help="run a property suite")
    c.add_argument("--suite", choices=("kkt", "ortho", "null"), required=True)
    return p


def _simulate(args):
    from .harness import aggregate, build_manifest, emit_outputs, load_config, run_simulation

    sim = load_config(args.config, reps=args.reps, seed=args.seed, methods=args.methods,
                      workers=args.workers, robust_se=args.robust_se)
    rows = run_simulation(sim)
    summary = aggregate(rows, sim.alpha0)
    emit_outputs(summary, args.out, build_manifest(sim, summary), rows if args.dump_raw else None)
    print(f"{'method':<18}{'bias':>8}{'mad':>8}{'size':>8}{'conv':>7}")
    for m in summary.methods.values():
        print(f"{m.method:<18}{m.median_bias:>8.3f}{m.mad:>8.3f}{m.size:>8.3f}{m.n_converged:>7d}")
    return EXIT_OK


def _analyze(args):
    from .harness import format_result, load_config, load_csv, read_roles, result_rows
    from .orthogonal_iv import infer

    if not 0 < args.level < 1:
        raise ConfigError("--level must lie in (0, 1)")
    cfg = load_config(args.config).lasso_config()
    roles = read_roles(args.roles)
    data = load_csv(args.csv, roles)
    names = [c for c, r in roles.items() if r == "endogenous"]
    res = infer(data, cfg, level=args.level)
    print(format_result(res, names))
    if args.out is not None:
        try:
            args.out.mkdir(parents=True, exist_ok=True)
            rows = result_rows(res, names)
            with open(args.out / "result.tsv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
                w.writeheader()
                w.writerows(rows)
        except OSError as exc:
            raise DataError(f"cannot write to {args.out}: {exc}") from exc
    return EXIT_OK


def _check(args):
    from .checks import SUITES

    results = SUITES[args.suite]()
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    handlers = {"simulate": _simulate, "analyze": _analyze, "check": _check}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except HdivError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
