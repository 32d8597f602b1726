"""End-to-end experiment loop: ECUs, background traffic, attacker and defense on one bus.

Time is cut into reconnaissance periods of ``recon`` hyper-periods. In each
period every ECU runs the schedule planned for it at the end of the
previous period, the attacker (if active) fires at the offsets learned in
the previous period, and the defended ECUs check the bus against their
plan and plan the next period.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .asp import ASP_COLUMNS, AspBreakdown, conditional_asp, slot_stats
from .attacker import (ATTACKER, AttackPlan, Episode, NoViableTarget, NoVictim, episodes_csv, episode_log,
                       inject_attack, plan_attack, recon_analyze)
from .can import BusEvent, CanBus, Mode
from .ecu import Schedule, SlotMapper, build_schedule
from .hns import ALARM_COLUMNS, Alarm, Defender, eq_pri_sizes
from .plan import PLAN_COLUMNS, ObfPlan
from .scenario import DEFENSE_MODES, Scenario, gen_traffic, measured_busload

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("mode", "busload_target", "cycle", "ecu", "victim_id", "total_asp", "total_conditional",
                   "total_bound", "saturated", "alarm")
TEC_COLUMNS = ("time_us", "node", "tec", "mode")
OUTPUT_FILES = ("asp.csv", "alarms.csv", "tec.csv", "plan.csv", "summary.csv", "attack.csv")


@dataclass
class AspRecord:
    cycle: int
    ecu: str
    victim: int
    breakdown: AspBreakdown


@dataclass
class Report:
    scenario: Scenario
    mode: str
    seed: int
    busload_target: float
    busload_measured: float | None = None
    asp: list[AspRecord] = field(default_factory=list)
    alarms: list[tuple[int, str, Alarm]] = field(default_factory=list)
    plans: list[tuple[int, str, ObfPlan, dict]] = field(default_factory=list)
    tec: list[tuple[float, str, int, str]] = field(default_factory=list)
    episodes: list[Episode] = field(default_factory=list)
    attack_plans: list[tuple[int, AttackPlan]] = field(default_factory=list)
    bus_off_time: float | None = None
    schedules: dict[tuple[int, str], Schedule] = field(default_factory=dict, repr=False)

    def totals(self, ecu: str | None = None) -> tuple[float, float, float]:
        """(ASP, conditional ASP, randomization bound) summed over cycles and victims."""
        a = c = b = 0.0
        for r in self.asp:
            if ecu is not None and r.ecu != ecu:
                continue
            a += r.breakdown.total.total
            c += r.breakdown.total_conditional.total
            b += r.breakdown.total_bound.total
        return a, c, b

    @property
    def alarm_count(self) -> int:
        return sum(1 for _, _, a in self.alarms if a)


def _victim_source(sc: Scenario) -> str | None:
    try:
        return sc.owner(sc.attacker.victim)[0].name
    except KeyError:
        return None


def run_experiment(sc: Scenario, mode: str | None = None, busload: float | None = None,
                   seed: int | None = None, measure_busload: bool = False) -> Report:
    mode = sc.defense if mode is None else mode
    if mode not in DEFENSE_MODES:
        raise ValueError(f"unknown defense mode {mode!r}")
    busload = sc.busload if busload is None else busload
    seed = sc.seed if seed is None else seed
    H, R = sc.H, sc.period_span
    report = Report(sc, mode, seed, busload)

    background = gen_traffic(sc, busload, seed)
    if measure_busload:
        report.busload_measured = measured_busload(sc, background)
    bus = CanBus(sc.bitrate, [e.name for e in sc.ecus], record_losses=False)

    vsrc = _victim_source(sc)
    watch = {n for n in (vsrc, ATTACKER) if n}
    last: dict[str, tuple[int, Mode]] = {}

    def track(ev: BusEvent):
        if ev.frame is None or ev.source not in watch:
            return
        cur = (ev.tec_after, ev.mode_after)
        if last.get(ev.source, (0, Mode.ERROR_ACTIVE)) != cur:
            report.tec.append((ev.time, ev.source, ev.tec_after, ev.mode_after.value))
            if ev.source == vsrc and ev.mode_after is Mode.BUS_OFF and report.bus_off_time is None:
                report.bus_off_time = ev.time
        last[ev.source] = cur

    bus.listeners.append(track)

    defenders: dict[str, Defender] = {}
    if mode != "off":
        for e in sc.ecus:
            if e.name in sc.defended:
                defenders[e.name] = Defender(e.name, e.tasks, H, sc.recon, e.h, mode,
                                             rng=random.Random(f"{seed}:{e.name}:shuffle"))

    pending: dict[str, tuple[ObfPlan, Schedule]] = {}
    atk_plan: AttackPlan | None = None
    atk_frames = []
    vtask = None
    if sc.attacker.enabled and vsrc is not None:
        vtask = sc.owner(sc.attacker.victim)[1]

    for c in range(sc.cycles):
        t = c * R
        executed: dict[str, tuple[ObfPlan | None, Schedule]] = {}
        for e in sc.ecus:
            if e.name in pending:
                plan, sched = pending.pop(e.name)
            else:
                plan, sched = None, build_schedule(e.tasks, R, sc.policy, t0=t, ecu=e.name)[0]
            executed[e.name] = (plan, sched)
            report.schedules[(c, e.name)] = sched
            bus.submit(sched.frames(sc.jitter_us, seed=seed))
            bus.submit(f for f in background[e.name] if t <= f.release_time < t + R)
        if atk_plan is not None and c >= sc.attacker.start_cycle:
            atk_frames += inject_attack(atk_plan, bus, t, sc.recon, vsrc)
        bus.run_until(t + R)
        trace = bus.trace(t, t + R)

        for name, d in defenders.items():
            plan, sched = executed[name]
            if plan is not None:
                report.alarms.append((c, name, d.seek(trace, plan, sched)))

        for e in sc.ecus:
            _, sched = executed[e.name]
            mapper = SlotMapper(sched, trace)
            ctrl = [tk for tk in e.tasks if tk.is_control and tk.msg_id is not None]
            stats, reports = {}, {}
            for tk in ctrl:
                stats[tk.msg_id] = slot_stats(trace, tk.msg_id, sc.recon, H, t, tk.period, [ATTACKER])
                try:
                    reports[tk.msg_id] = recon_analyze(trace, tk.msg_id, sc.recon, H, t, tk.period, [ATTACKER])
                except NoVictim:
                    pass
            next_plan = None
            if e.name in defenders:
                nxt = build_schedule(e.tasks, R, sc.policy, t0=t + R, ecu=e.name)[0]
                next_plan, applied = defenders[e.name].plan(reports, sched, trace, nxt)
                pending[e.name] = (next_plan, applied)
                report.plans.append((c + 1, e.name, next_plan, applied.slot_index()))
            for tk in ctrl:
                rep = reports.get(tk.msg_id)
                sizes = eq_pri_sizes(rep, mapper) if rep is not None else {}
                bd = conditional_asp(stats[tk.msg_id], next_plan, sc.recon, sizes, task=tk.name)
                report.asp.append(AspRecord(c, e.name, tk.msg_id, bd))

        if vtask is not None and c + 1 >= sc.attacker.start_cycle and c + 1 < sc.cycles:
            try:
                rep = recon_analyze(trace, sc.attacker.victim, sc.recon, H, t, vtask.period, [ATTACKER])
                atk_plan = plan_attack(rep, dlc=vtask.dlc, campaign=sc.attacker.campaign)
                report.attack_plans.append((c + 1, atk_plan))
            except (NoVictim, NoViableTarget) as exc:
                log.info("attacker stands down in cycle %d: %s", c + 1, exc)
                atk_plan = None

    if vsrc is not None:
        report.episodes = episode_log(bus.events, atk_frames, vsrc)
    return report


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _f(x: float) -> str:
    return f"{x:.12g}"


def render(report: Report) -> dict[str, str]:
    """CSV contents of a run, keyed by file name."""
    asp_rows, summary = [], []
    alarm_at = {(c, e): a for c, e, a in report.alarms}
    for r in report.asp:
        for row in r.breakdown.rows:
            asp_rows.append([r.cycle, r.ecu, f"{r.victim:#05x}"] + row.csv_row())
        bd = r.breakdown
        alarm = alarm_at.get((r.cycle, r.ecu))
        # totals are sums of the asp.csv columns, unclamped
        summary.append([report.mode, _f(report.busload_target), r.cycle, r.ecu, f"{r.victim:#05x}",
                        _f(sum(x.asp for x in bd.rows)), _f(sum(x.asp_conditional for x in bd.rows)),
                        _f(sum(x.bound for x in bd.rows)), int(bd.total.saturated),
                        "" if alarm is None else int(bool(alarm))])
    alarm_rows = [[c, e] + row for c, e, a in report.alarms for row in a.to_rows()]
    plan_rows = [[c, e] + row for c, e, p, idx in report.plans for row in p.to_rows(idx)]
    tec_rows = [[f"{t:.3f}", n, tec, m] for t, n, tec, m in report.tec]
    return {
        "asp.csv": _csv(("cycle", "ecu", "victim_id") + ASP_COLUMNS, asp_rows),
        "alarms.csv": _csv(("cycle", "ecu") + ALARM_COLUMNS, alarm_rows),
        "tec.csv": _csv(TEC_COLUMNS, tec_rows),
        "plan.csv": _csv(("cycle", "ecu") + PLAN_COLUMNS, plan_rows),
        "summary.csv": _csv(SUMMARY_COLUMNS, summary),
        "attack.csv": episodes_csv(report.episodes),
    }


def emit_report(report: Report, out_dir: str | Path) -> dict[str, Path]:
    """Write the run's CSVs and a manifest (no timestamps, so reruns are byte-identical)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = render(report)
    paths = {}
    digests = {}
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        paths[name] = p
        digests[name] = hashlib.sha256(text.encode()).hexdigest()
    manifest = {
        "tool": "hidenseek", "version": __version__, "mode": report.mode, "seed": report.seed,
        "busload_target": report.busload_target, "busload_measured": report.busload_measured,
        "bus_off_time_us": report.bus_off_time, "alarms": report.alarm_count,
        "scenario": report.scenario.echo(), "files": digests,
    }
    p = out / "manifest.json"
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    paths["manifest.json"] = p
    return paths


COMPARE_COLUMNS = ("mode", "busload", "total_asp", "total_conditional", "total_bound", "alarms", "bus_off_us")


def compare_rows(reports: Sequence[Report], ecu: str | None = None) -> list[list]:
    rows = []
    for r in reports:
        a, c, b = r.totals(ecu)
        rows.append([r.mode, _f(r.busload_target), _f(a), _f(c), _f(b), r.alarm_count,
                     "" if r.bus_off_time is None else f"{r.bus_off_time:.3f}"])
    return rows


def compare_csv(reports: Sequence[Report], ecu: str | None = None) -> str:
    return _csv(COMPARE_COLUMNS, compare_rows(reports, ecu))
