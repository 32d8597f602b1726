"""Hide: attack-aware obfuscation of the next reconnaissance period.
Seek: flag victim-id frames that show up where the plan skipped the job.

Every decision is local to one ECU. Hide reads the windows observed in
reconnaissance period k and plans period k+1; Seek checks period k+1's bus
against that plan.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .attacker import AttackWindow, ReconReport
from .can import BusTrace
from .ecu import InfeasibleSchedule, Schedule, SlotMapper, TaskSpec, apply_obf, executed_pattern, reorder
from .plan import Action, JobKey, ObfPlan, ObfRule

log = logging.getLogger(__name__)

ALARM_COLUMNS = ("time_us", "bus_slot", "observed_id", "planned_action")


class AlignmentError(ValueError):
    """The trace handed to Seek does not cover the plan's period."""


def rpt(recon: int, H: float, h: float) -> int:
    """ECU hyper-periods needed to cover one reconnaissance period."""
    return math.ceil(recon * H / h - 1e-9)


def _run_back(task: str, inst: int, skipped: set[JobKey], plan: ObfPlan) -> int:
    n, i = 0, inst - 1
    first = plan.first.get(task)
    while (task, i) in skipped:
        n += 1
        i -= 1
    if first is not None and i < first:
        n += plan.carry_in.get(task, 0)
    return n


def check_skip_lim(task: str, instance: int, plan: ObfPlan, skip_list: Mapping[str, int]) -> bool:
    """Would skipping ``(task, instance)`` keep every consecutive-skip run within the task's limit?

    Runs are counted in release order and include the skips carried in
    from the previous plan.
    """
    if task not in skip_list:
        raise LookupError(f"no skip limit known for task {task!r}")
    limit = skip_list[task]
    if limit <= 0:
        return False
    skipped = plan.skipped()
    if (task, instance) in skipped:
        return False
    back = _run_back(task, instance, skipped, plan)
    fwd, i = 0, instance + 1
    while (task, i) in skipped:
        fwd += 1
        i += 1
    return back + 1 + fwd <= limit


def max_skip_run(pattern: Sequence[int], carry_in: int = 0) -> int:
    best = run = carry_in
    for b in pattern:
        run = run + 1 if b == 0 else 0
        best = max(best, run)
    return best


def trailing_skips(schedule: Schedule, task: str, carry_in: int = 0) -> int:
    """Consecutive skipped instances at the end of the horizon (feeds the next plan's carry-in)."""
    pat = executed_pattern(schedule, task)
    n = 0
    for b in reversed(pat):
        if b:
            return n
        n += 1
    return n + carry_in


@dataclass(frozen=True)
class Pred:
    key: JobKey  # job in the observed period
    start: float
    msg_id: int
    bus_slot: int


def window_jobs(window: AttackWindow, mapper: SlotMapper) -> list[Pred]:
    """Same-ECU jobs whose frames sit in the window."""
    out = []
    for s in window.window_slots:
        key = mapper.bus_to_ecu(s)
        if key is None:
            continue
        slot = mapper.schedule.slot_of(key)
        out.append(Pred(key, slot.start, slot.job.task.msg_id, s))
    return out


def get_hp_preds(window: AttackWindow | Sequence[Pred], mapper: SlotMapper | None = None,
                 victim_id: int | None = None) -> list[Pred]:
    """Higher-priority same-ECU predecessors in the window, latest start first."""
    jobs = window_jobs(window, mapper) if isinstance(window, AttackWindow) else list(window)
    vid = victim_id if victim_id is not None else (window.victim_instance[0]
                                                     if isinstance(window, AttackWindow) else None)
    preds = [p for p in jobs if vid is None or p.msg_id < vid]
    return sorted(preds, key=lambda p: (-p.start, p.key))


def shift_vic(schedule: Schedule, victim: JobKey, group: Sequence[JobKey]) -> Schedule | None:
    """Run ``victim`` before every listed equal-priority job; None if that misses a deadline."""
    if not group:
        raise ValueError("shift_vic needs at least one equal-priority job in the window")
    first = min(group, key=lambda k: schedule.slot_of(k).start)
    if schedule.slot_of(first).start > schedule.slot_of(victim).start:
        return schedule  # already ahead of the whole group
    try:
        return reorder(schedule, victim, before=first)
    except InfeasibleSchedule as exc:
        log.warning("reorder of %s#%d rejected: %s", victim[0], victim[1], exc)
        return None


def _shifted(key: JobKey, tasks: Mapping[str, TaskSpec], span: float) -> JobKey:
    return (key[0], key[1] + int(round(span / tasks[key[0]].period)))


def hide(H: float, recon: int, id_set: Iterable[int], atk_win_list: Mapping[int, ReconReport],
         task_set: Sequence[TaskSpec], h: float, skip_list: Mapping[str, int], *,
         schedule: Schedule, mapper: SlotMapper, carry_in: Mapping[str, int] | None = None,
         prefer_wider_reorder: bool = True) -> ObfPlan:
    """Plan the obfuscation of ``schedule`` (the next period) from the windows of the last one.

    ``mapper`` ties the observed bus slots to the observed ECU jobs; job
    keys are shifted by one reconnaissance period onto ``schedule``. Each
    vulnerable victim occurrence gets Obf1 if the skip limit allows,
    otherwise Obf2 on the latest-starting skippable control predecessor in
    its window, otherwise Obf3, otherwise None with a reason. With
    ``prefer_wider_reorder`` a reorder that clears two or more frames wins
    over a single-frame Obf2.
    """
    span = rpt(recon, H, h) * h
    if abs(schedule.horizon - span) > 1e-6:
        raise ValueError(f"schedule covers {schedule.horizon} us, expected {span} us")
    tasks = {t.name: t for t in task_set}
    by_id = {t.msg_id: t for t in task_set if t.msg_id is not None}
    first = {name: int(round(schedule.t0 / t.period)) + 1 for name, t in tasks.items()}
    plan = ObfPlan(schedule.ecu, [], schedule.t0, span, dict(carry_in or {}), first)
    cur = schedule

    victims = [v for v in id_set if v in atk_win_list and v in by_id]
    victims.sort(key=lambda v: (-max(atk_win_list[v].averages.values(), default=0), v))
    touched: set[JobKey] = set()
    for vid in victims:
        report = atk_win_list[vid]
        vtask = by_id[vid]
        avgs = report.averages
        order = sorted(avgs, key=lambda i: (-avgs[i], i))
        for i in order:
            for k in range(report.recon):
                w = next((w for w in report.windows if w.k == k and w.instance == i), None)
                if w is None or w.window_len == 0:
                    continue
                okey = mapper.bus_to_ecu(w.bus_slot)
                occ = (k, i)
                if okey is None:
                    plan.add(Action(ObfRule.NONE, (vtask.name, 0), occurrence=occ,
                                    reason="frame not produced by the observed schedule"))
                    continue
                vkey = _shifted(okey, tasks, span)
                action, cur = _decide(okey, vkey, occ, w, vtask, cur, plan, tasks, skip_list, mapper, span,
                                      touched, prefer_wider_reorder)
                plan.add(action)
                touched.add(vkey)
                if action.skipped:
                    touched.add(action.skipped)
    return plan


def _decide(okey, vkey, occ, w, vtask, cur, plan, tasks, skip_list, mapper, span, touched, prefer_wider):
    if vtask.is_control and check_skip_lim(vtask.name, vkey[1], plan, skip_list):
        return Action(ObfRule.OBF1, vkey, skipped=vkey, reduction=w.window_len, occurrence=occ), cur
    jobs = window_jobs(w, mapper)
    obf2 = None
    for p in get_hp_preds(jobs, victim_id=vtask.msg_id):
        t = tasks[p.key[0]]
        nk = _shifted(p.key, tasks, span)
        if t.is_control and nk not in touched and check_skip_lim(t.name, nk[1], plan, skip_list):
            obf2 = Action(ObfRule.OBF2, vkey, skipped=nk, reduction=1, occurrence=occ,
                          reason=f"skip limit of {vtask.name} reached")
            break
    eq = mapper.schedule.eq_pri.get(okey, frozenset())
    group = tuple(sorted(_shifted(p.key, tasks, span) for p in jobs if p.key in eq))
    if obf2 is not None and not (prefer_wider and len(group) > 1):
        return obf2, cur
    if group:
        moved = shift_vic(cur, vkey, group)
        if moved is not None:
            first = min(group, key=lambda k: cur.slot_of(k).start)
            return Action(ObfRule.OBF3, vkey, group=group, move_before=first, reduction=len(group),
                          occurrence=occ), moved
    if obf2 is not None:
        return obf2, cur
    why = "no skip headroom, no skippable predecessor"
    why += ", reorder misses a deadline" if group else ", no equal-priority job in the window"
    return Action(ObfRule.NONE, vkey, reason=why, occurrence=occ), cur


def randomize(H: float, recon: int, id_set: Iterable[int], atk_win_list: Mapping[int, ReconReport],
              task_set: Sequence[TaskSpec], h: float, *, schedule: Schedule, mapper: SlotMapper,
              rng: random.Random) -> ObfPlan:
    """Attack-unaware baseline: shuffle every equal-priority group, never skip.

    The shuffle ignores the windows. They are only read afterwards to
    record, per victim occurrence, how many window frames ended up behind
    the victim (the action's ``reduction``).
    """
    span = rpt(recon, H, h) * h
    tasks = {t.name: t for t in task_set}
    by_id = {t.msg_id: t for t in task_set if t.msg_id is not None}
    plan = ObfPlan(schedule.ecu, [], schedule.t0, span)
    cur = schedule
    groups = sorted({tuple(sorted(g | {k})) for k, g in schedule.eq_pri.items()})
    moves: list[Action] = []
    done: set[JobKey] = set()
    for g in groups:
        if any(k in done for k in g):
            continue
        done.update(g)
        pick = rng.choice(g)
        lead = min(g, key=lambda k: cur.slot_of(k).start)
        if pick == lead:
            continue
        try:
            cur = reorder(cur, pick, before=lead)
        except InfeasibleSchedule:
            continue
        moves.append(Action(ObfRule.RANDOM, pick, move_before=lead, group=g, reason="shuffle"))
    occ_actions = []
    for vid in id_set:
        if vid not in atk_win_list or vid not in by_id:
            continue
        report = atk_win_list[vid]
        for w in report.windows:
            if w.window_len == 0:
                continue
            okey = mapper.bus_to_ecu(w.bus_slot)
            if okey is None:
                occ_actions.append(Action(ObfRule.NONE, (by_id[vid].name, 0), occurrence=(w.k, w.instance),
                                          reason="frame not produced by the observed schedule"))
                continue
            vkey = _shifted(okey, tasks, span)
            eq = mapper.schedule.eq_pri.get(okey, frozenset())
            win = {_shifted(p.key, tasks, span) for p in window_jobs(w, mapper) if p.key in eq}
            members = [m for m in (_shifted(k, tasks, span) for k in eq) if _in(cur, m)]
            base_v, new_v = schedule.slot_of(vkey).start, cur.slot_of(vkey).start
            behind = sum(1 for m in win if cur.slot_of(m).start > new_v)
            # members that used to follow the victim and now precede it lengthen the window
            ahead = sum(1 for m in members if m not in win and schedule.slot_of(m).start > base_v
                        and cur.slot_of(m).start < new_v)
            r = behind - ahead
            rule = ObfRule.RANDOM if r else ObfRule.NONE
            occ_actions.append(Action(rule, vkey, reduction=r, occurrence=(w.k, w.instance),
                                      reason="" if r else "shuffle left the window unchanged"))
    # the reorders are realized by the move actions; the per-occurrence
    # records carry no move so applying the plan twice is harmless
    plan.actions = moves + occ_actions
    return plan


def eq_pri_sizes(report: ReconReport, mapper: SlotMapper) -> dict[tuple[int, int], int]:
    """|T_v^<| per observed occurrence: equal-priority same-ECU jobs whose frames sit in the window."""
    out = {}
    for w in report.windows:
        okey = mapper.bus_to_ecu(w.bus_slot)
        eq = mapper.schedule.eq_pri.get(okey, frozenset()) if okey is not None else frozenset()
        out[(w.k, w.instance)] = sum(1 for p in window_jobs(w, mapper) if p.key in eq)
    return out


def _in(schedule: Schedule, key: JobKey) -> bool:
    try:
        schedule.slot_of(key)
        return True
    except KeyError:
        return False


@dataclass(frozen=True)
class Evidence:
    time: float
    bus_slot: int
    observed_id: int
    planned_action: ObfRule
    job: JobKey | None = None


@dataclass
class Alarm:
    raised: bool = False
    evidence: list[Evidence] = field(default_factory=list)
    # unexpected frames at instances that were not skipped (logged only)
    logged: list[Evidence] = field(default_factory=list)

    def __post_init__(self):
        if self.raised and not self.evidence:
            raise ValueError("an alarm needs evidence")

    def __bool__(self):
        return self.raised

    def to_rows(self) -> list[list]:
        return [[f"{e.time:.3f}", e.bus_slot, f"{e.observed_id:#05x}", e.planned_action.value]
                for e in self.evidence]


def alarms_csv(alarms: Iterable[Alarm], prefix: Sequence[str] = (), prefix_values: Iterable[Sequence] = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(prefix) + list(ALARM_COLUMNS))
    pv = list(prefix_values)
    for n, a in enumerate(alarms):
        for row in a.to_rows():
            w.writerow(list(pv[n] if pv else ()) + row)
    return buf.getvalue()


def seek(trace: BusTrace, plan: ObfPlan, schedule: Schedule, ids: Iterable[int] | None = None,
         tol: float = 1e-6) -> Alarm:
    """Presence-where-skipped check of one reconnaissance period.

    Each frame of a watched id first claims the earliest unclaimed planned
    release at or before it. A frame left without a claim is attributed to
    the planned job whose release is nearest in time; if that job was
    skipped by the plan the alarm is raised.
    """
    if abs(trace.start - plan.t0) > tol or (plan.horizon and abs(trace.horizon - plan.horizon) > tol):
        raise AlignmentError(f"trace [{trace.start}, +{trace.horizon}) does not match plan "
                             f"[{plan.t0}, +{plan.horizon})")
    jobs = [s for s in schedule.job_slots() if s.job.task.msg_id is not None]
    watched = set(ids) if ids is not None else {s.job.task.msg_id for s in jobs if s.skipped}
    evidence, logged = [], []
    tx = trace.transmissions()
    for vid in sorted(watched):
        own = sorted((s for s in jobs if s.job.task.msg_id == vid), key=lambda s: s.end)
        expected = [s.end for s in own if not s.skipped]
        nxt = 0
        for idx, ev in enumerate(tx):
            if ev.frame.id != vid:
                continue
            if nxt < len(expected) and expected[nxt] <= ev.time + tol:
                nxt += 1
                continue
            if not own:
                continue
            slot = min(own, key=lambda s: (abs(s.end - ev.time), s.end))
            e = Evidence(ev.time, idx, vid, slot.action, slot.job.key)
            (evidence if slot.skipped else logged).append(e)
    for e in evidence:
        log.warning("bus-off attempt suspected: id %#x at %.1f us where %s#%d was skipped",
                    e.observed_id, e.time, e.job[0], e.job[1])
    return Alarm(bool(evidence), evidence, logged)


class Defender:
    """Per-ECU Hide-n-Seek state carried from one reconnaissance period to the next."""

    def __init__(self, ecu: str, tasks: Sequence[TaskSpec], H: float, recon: int, h: float,
                 mode: str = "hns", rng: random.Random | None = None,
                 on_alarm: Callable[[Alarm], None] | None = None):
        self.ecu = ecu
        self.tasks = list(tasks)
        self.H, self.recon, self.h = H, recon, h
        self.mode = mode
        self.rng = rng or random.Random(0)
        self.skip_list = {t.name: t.skip_limit for t in self.tasks}
        self.id_set = sorted(t.msg_id for t in self.tasks if t.is_control)
        self.carry_in: dict[str, int] = {}
        self.on_alarm = on_alarm
        self.alarms: list[Alarm] = []

    def plan(self, reports: Mapping[int, ReconReport], observed: Schedule, trace: BusTrace,
             next_schedule: Schedule) -> tuple[ObfPlan, Schedule]:
        mapper = SlotMapper(observed, trace)
        if self.mode == "hns":
            plan = hide(self.H, self.recon, self.id_set, reports, self.tasks, self.h, self.skip_list,
                        schedule=next_schedule, mapper=mapper, carry_in=self.carry_in)
        elif self.mode == "randomize":
            plan = randomize(self.H, self.recon, self.id_set, reports, self.tasks, self.h,
                             schedule=next_schedule, mapper=mapper, rng=self.rng)
        else:
            plan = ObfPlan(self.ecu, [], next_schedule.t0, next_schedule.horizon)
        applied = apply_obf(next_schedule, plan)
        self.carry_in = {t.name: trailing_skips(applied, t.name, self.carry_in.get(t.name, 0))
                         for t in self.tasks if t.is_control}
        return plan, applied

    def seek(self, trace: BusTrace, plan: ObfPlan, schedule: Schedule) -> Alarm:
        alarm = seek(trace, plan, schedule)
        self.alarms.append(alarm)
        if alarm and self.on_alarm is not None:
            self.on_alarm(alarm)
        return alarm
