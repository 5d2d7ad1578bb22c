"""Command line interface.

Subcommands:
    run <config>       execute a single-cell config, print its CSV row
    sweep <config>     run the full grid, appending to the configured CSV
    rates <csv>        power-law fits of median risk vs n, per group
    plot <csv>         SVG figure (risk_vs_eps or risk_vs_n)
    moments <config>   print the estimated moment profile as CSV
"""

from __future__ import annotations

import argparse
import csv
import io
import sys

from . import bench
from .errors import InvalidArgumentError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="htdpsco", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a single-cell config")
    p_run.add_argument("config")
    p_run.add_argument("--csv", default=None, help="also append the row here")

    p_sweep = sub.add_parser("sweep", help="run the full sweep grid")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--csv", default=None, help="override [output] csv")
    p_sweep.add_argument("--threads", type=int, default=None)
    p_sweep.add_argument("--no-resume", action="store_true",
                         help="re-run cells already present in the CSV")

    p_rates = sub.add_parser("rates", help="fit power laws on a results CSV")
    p_rates.add_argument("csv")
    p_rates.add_argument("--group", default="algo")
    p_rates.add_argument("--eps", type=float, default=None,
                         help="restrict to one epsilon value")

    p_plot = sub.add_parser("plot", help="render an SVG from a results CSV")
    p_plot.add_argument("csv")
    p_plot.add_argument("--kind", choices=["risk_vs_eps", "risk_vs_n"],
                        required=True)
    p_plot.add_argument("--out", default=None)

    p_mom = sub.add_parser("moments", help="print a moment profile as CSV")
    p_mom.add_argument("config")
    p_mom.add_argument("--n", type=int, default=None)
    p_mom.add_argument("--seed", type=int, default=None)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "run":
        cfg = bench.load_config(args.config)
        if len(cfg.n_values) * len(cfg.eps_values) * len(cfg.seeds) != 1:
            raise InvalidArgumentError(
                "`run` wants a single-cell config (one n, one eps, one seed); "
                "use `sweep` for grids")
        row = bench.run_cell(cfg, cfg.n_values[0], cfg.eps_values[0],
                             cfg.seeds[0])
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=bench.CSV_COLUMNS)
        w.writeheader()
        w.writerow(row)
        print(buf.getvalue().rstrip())
        if args.csv:
            bench.run_experiment(cfg, resume=True, csv_path=args.csv)
        return 0
    if args.command == "sweep":
        cfg = bench.load_config(args.config)
        rows = bench.run_experiment(cfg, resume=not args.no_resume,
                                    threads=args.threads, csv_path=args.csv)
        done = sum(1 for r in rows if r["final_metric"] != "FAILED")
        failed = len(rows) - done
        print(f"sweep complete: {done} cells ok, {failed} failed "
              f"(csv: {args.csv or cfg.output.get('csv', 'results.csv')})")
        return 0 if failed == 0 else 1
    if args.command == "rates":
        fits = bench.rates_from_csv(args.csv, group=args.group, eps=args.eps)
        if not fits:
            print("no group had >= 3 usable points", file=sys.stderr)
            return 1
        print(f"{args.group:<24} slope      intercept  R^2")
        for g, fit in sorted(fits.items()):
            print(f"{g:<24} {fit.slope:+.4f}   {fit.intercept:+.4f}   "
                  f"{fit.r_squared:.4f}")
        return 0
    if args.command == "plot":
        out = args.out or f"{args.csv}.{args.kind}.svg"
        bench.emit_plot(args.csv, args.kind, out)
        print(f"wrote {out}")
        return 0
    if args.command == "moments":
        cfg = bench.load_config(args.config)
        print(bench.moments_csv(cfg, n=args.n, seed=args.seed).rstrip())
        return 0
    raise InvalidArgumentError(args.command)


if __name__ == "__main__":
    raise SystemExit(main())
