"""Command-line entry point: ``hidenseek run|sweep|compare|validate``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .experiment import Report, compare_csv, emit_report, run_experiment
from .scenario import DEFENSE_MODES, Scenario, ScenarioError, load_scenario

EXIT_OK, EXIT_SCENARIO, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("hidenseek")


def _floats(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _modes(text: str) -> list[str]:
    vals = [x.strip() for x in text.split(",") if x.strip()]
    bad = [m for m in vals if m not in DEFENSE_MODES]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"modes must be drawn from {','.join(DEFENSE_MODES)}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hidenseek", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_default):
        sp.add_argument("scenario", type=Path)
        sp.add_argument("--out", type=Path, default=Path(out_default))
        sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        sp.add_argument("--cycles", type=int, default=None, help="override the number of recon periods")
        sp.add_argument("--no-attack", action="store_true", help="disable the attacker")

    r = sub.add_parser("run", help="simulate one scenario and write its report")
    common(r, "out")
    r.add_argument("--mode", choices=DEFENSE_MODES, default=None)
    r.add_argument("--busload", type=float, default=None)

    s = sub.add_parser("sweep", help="run the scenario at several busloads")
    common(s, "out-sweep")
    s.add_argument("--busload", type=_floats, default=[0.25, 0.55, 0.75])
    s.add_argument("--modes", type=_modes, default=None, help="defaults to the scenario's defense mode")

    c = sub.add_parser("compare", help="run several defense modes on the same seed")
    common(c, "out-compare")
    c.add_argument("--modes", type=_modes, default=list(DEFENSE_MODES))
    c.add_argument("--busload", type=_floats, default=None)
    c.add_argument("--check", action="store_true",
                   help="exit 3 unless hns beats randomization, off reaches bus-off and hns raises an alarm")

    v = sub.add_parser("validate", help="parse a scenario and print its resolved form")
    v.add_argument("scenario", type=Path)
    return p


def _scenario(args) -> Scenario:
    sc = load_scenario(args.scenario)
    over = {}
    if getattr(args, "cycles", None) is not None:
        over["cycles"] = args.cycles
    if getattr(args, "no_attack", False):
        over["attacker_enabled"] = False
    return sc.with_overrides(**over) if over else sc


def _tag(busload: float) -> str:
    return f"busload_{busload:.2f}"


def check_compare(reports: Sequence[Report], ecus: Sequence[str]) -> list[str]:
    """Failed acceptance conditions of one compare run (empty when all hold)."""
    by = {r.mode: r for r in reports}
    fails = []
    if "hns" in by and "randomize" in by:
        h = sum(by["hns"].totals(e)[1] for e in ecus)
        z = sum(by["randomize"].totals(e)[1] for e in ecus)
        if h > z + 1e-12:
            fails.append(f"hns total ASP {h:.6g} exceeds randomization {z:.6g}")
    attacking = reports and reports[0].scenario.attacker.enabled
    if attacking and "off" in by and by["off"].bus_off_time is None:
        fails.append("undefended victim never reached bus-off")
    if attacking and "hns" in by:
        if by["hns"].alarm_count == 0:
            fails.append("hns raised no alarm under attack")
        if by["hns"].bus_off_time is not None:
            fails.append("victim reached bus-off under hns")
    return fails


def _run(args) -> int:
    sc = _scenario(args)
    if args.verb == "run":
        rep = run_experiment(sc, args.mode, args.busload, args.seed, measure_busload=True)
        emit_report(rep, args.out)
        print(f"{rep.mode}: ASP {rep.totals()[0]:.4f} -> {rep.totals()[1]:.4f}, alarms {rep.alarm_count}, "
              f"bus-off {'none' if rep.bus_off_time is None else f'{rep.bus_off_time:.0f} us'} -> {args.out}")
        return EXIT_OK
    if args.verb == "sweep":
        modes = args.modes or [sc.defense]
        reports = []
        for b in args.busload:
            for m in modes:
                rep = run_experiment(sc, m, b, args.seed, measure_busload=True)
                emit_report(rep, args.out / _tag(b) / m)
                reports.append(rep)
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "sweep.csv").write_text(compare_csv(reports, None))
        sys.stdout.write(compare_csv(reports, None))
        return EXIT_OK
    # compare
    loads = args.busload or [sc.busload]
    fails = []
    rows = []
    for b in loads:
        reports = [run_experiment(sc, m, b, args.seed) for m in args.modes]
        base = args.out / _tag(b) if len(loads) > 1 else args.out
        for rep in reports:
            emit_report(rep, base / rep.mode)
        text = compare_csv(reports, None)
        base.mkdir(parents=True, exist_ok=True)
        (base / "compare.csv").write_text(text)
        rows.append(text)
        fails += [f"busload {b:.2f}: {f}" for f in check_compare(reports, sc.defended)]
    sys.stdout.write("".join(rows))
    if args.check:
        for f in fails:
            print(f"CHECK FAILED: {f}", file=sys.stderr)
        if fails:
            return EXIT_CHECK
        print("all checks passed")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "validate":
            sc = load_scenario(args.scenario)
            print(json.dumps(sc.echo(), indent=2, sort_keys=True))
            return EXIT_OK
        return _run(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except (OSError, RuntimeError, ValueError, ArithmeticError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
