"""``wbdrc`` command line: run, compare and list scenarios.

Exit codes: 0 success, 2 controller fault, 3 configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..wbc import ControllerFault
from . import report as rpt
from .runner import run_scenario
from .scenario import ConfigError, bundled_scenarios, load_scenario

EXIT_OK, EXIT_FAULT, EXIT_CONFIG = 0, 2, 3

log = logging.getLogger("wbdrc")


def _load(args):
    scen = load_scenario(args.scenario)
    if getattr(args, "seed", None) is not None:
        scen = replace(scen, seed=args.seed)
    if getattr(args, "duration", None) is not None:
        if not args.duration > 0:
            raise ConfigError("duration must be positive")
        scen = replace(scen, duration=args.duration)
    return scen


def _print_metrics(rep):
    print(f"{rep.scenario.name} [{rep.scenario.variant}]")
    for k, v in rep.metrics.items():
        print(f"  {k:<26}{v}")


def cmd_run(args) -> int:
    scen = _load(args)
    if args.variant:
        scen = scen.with_variant(args.variant)
    out = Path(args.out or scen.output)
    rep = run_scenario(scen, out_dir=out)
    if not args.no_plots:
        rpt.render_run(rep, out)
    _print_metrics(rep)
    print(f"  trace: {rep.csv_path}")
    for f in rep.figures:
        print(f"  figure: {f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    scen = _load(args)
    out = Path(args.out or scen.output)
    base = run_scenario(scen.with_variant("wbdrc"), out_dir=out)
    other = run_scenario(scen.with_variant("standard"), out_dir=out)
    rows = rpt.delta_table(base, other)
    delta = rpt.write_delta(rows, out / f"{scen.name}-compare.csv")
    if not args.no_plots:
        for r in (base, other):
            rpt.render_run(r, out)
        rpt.render_compare(base, other, out)
    print(rpt.format_table(rows))
    print(f"  delta table: {delta}")
    return EXIT_OK


def cmd_list(args) -> int:
    for name, path in bundled_scenarios().items():
        try:
            scen = load_scenario(path)
            print(f"{name:<22}{scen.robot:<9}{scen.gait:<15}{scen.duration:>5.1f} s  {scen.description}")
        except ConfigError as exc:
            print(f"{name:<22}invalid: {exc}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wbdrc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("scenario", help="scenario file or bundled scenario name")
    r.add_argument("--variant", choices=("wbdrc", "standard"))
    r.add_argument("--out", help="output directory (default: the scenario's)")
    r.add_argument("--seed", type=int)
    r.add_argument("--duration", type=float, help="override the scenario duration [s]")
    r.add_argument("--no-plots", action="store_true", help="write the CSV trace only")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run both controller variants and tabulate the difference")
    c.add_argument("scenario")
    c.add_argument("--out")
    c.add_argument("--seed", type=int)
    c.add_argument("--duration", type=float)
    c.add_argument("--no-plots", action="store_true")
    c.set_defaults(func=cmd_compare)

    ls = sub.add_parser("list-scenarios", help="list the bundled scenarios")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ControllerFault as exc:
        print(f"controller fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
