"""ECU task sets and non-preemptive schedules over hyper-periods.

A job runs to completion; its message is released to the bus when the job
finishes. Deadlines are implicit (the next release of the same task).
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
import random
from dataclasses import dataclass, field, replace
from functools import reduce
from typing import Iterable, Sequence

from .can import Frame
from .plan import Action, JobKey, ObfPlan, ObfRule

log = logging.getLogger(__name__)

SCHEDULE_COLUMNS = ("slot_index", "start_us", "task", "instance", "obf_action")

# horizons beyond this are almost certainly a unit mistake (> ~31 years in us)
MAX_HORIZON_US = 1 << 60


class Policy(str, enum.Enum):
    STATIC = "static"
    EDF = "edf"


class InfeasibleSchedule(Exception):
    def __init__(self, msg: str, job: Job | None = None):
        super().__init__(msg)
        self.job = job


@dataclass(frozen=True)
class TaskSpec:
    name: str
    period: float
    wcet: float
    ecu_priority: int = 0
    msg_id: int | None = None
    is_control: bool = False
    skip_limit: int = 0
    dlc: int = 8

    def __post_init__(self):
        if self.period <= 0 or self.wcet <= 0:
            raise ValueError(f"{self.name}: period and wcet must be positive")
        if self.wcet > self.period:
            raise ValueError(f"{self.name}: wcet exceeds period")
        if self.is_control and self.msg_id is None:
            raise ValueError(f"{self.name}: control tasks transmit a message")
        if self.skip_limit < 0:
            raise ValueError(f"{self.name}: negative skip limit")


@dataclass(frozen=True)
class Job:
    task: TaskSpec
    instance: int
    release: float
    deadline: float

    @property
    def key(self) -> JobKey:
        return (self.task.name, self.instance)


@dataclass(frozen=True)
class Slot:
    index: int
    start: float
    end: float
    job: Job | None = None  # None marks an idle gap
    action: ObfRule = ObfRule.NONE

    @property
    def task(self) -> TaskSpec | None:
        return None if self.job is None else self.job.task

    @property
    def skipped(self) -> bool:
        return self.action in (ObfRule.OBF1, ObfRule.OBF2)

    @property
    def idle(self) -> bool:
        return self.job is None


# per job: the other same-priority jobs that were ready at one of its decision points
EqPriList = dict[JobKey, frozenset[JobKey]]


@dataclass
class Schedule:
    slots: list[Slot]
    h: float
    horizon: float
    t0: float = 0.0
    ecu: str = ""
    eq_pri: EqPriList = field(default_factory=dict)
    policy: Policy = Policy.EDF

    def job_slots(self) -> list[Slot]:
        return [s for s in self.slots if s.job is not None]

    def slot_of(self, key: JobKey) -> Slot:
        for s in self.slots:
            if s.job is not None and s.job.key == key:
                return s
        raise KeyError(f"no job {key} in schedule")

    def jobs_of(self, task: str) -> list[Job]:
        return sorted((s.job for s in self.job_slots() if s.job.task.name == task), key=lambda j: j.instance)

    def tasks(self) -> dict[str, TaskSpec]:
        return {s.job.task.name: s.job.task for s in self.job_slots()}

    def slot_index(self) -> dict[JobKey, int]:
        return {s.job.key: s.index for s in self.job_slots()}

    def frames(self, jitter_max: float = 0.0, seed: int | str | None = None) -> list[Frame]:
        """Bus releases of every executed transmitting job, in release order.

        Jitter in ``[0, jitter_max]`` is drawn per job from ``(seed, ecu, job)``
        so a job's jitter does not depend on which other jobs were skipped.
        """
        out = []
        for s in self.job_slots():
            t = s.job.task
            if t.msg_id is None or s.skipped:
                continue
            j = 0.0
            if jitter_max > 0:
                j = random.Random(f"{seed}:{self.ecu}:{t.name}:{s.job.instance}").uniform(0.0, jitter_max)
            out.append(Frame(t.msg_id, t.dlc, source=self.ecu, release_time=s.end + j, tag=s.job.key))
        out.sort(key=lambda f: (f.release_time, f.id))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SCHEDULE_COLUMNS)
        for s in self.slots:
            name = "Idle" if s.job is None else s.job.task.name
            inst = "" if s.job is None else s.job.instance
            w.writerow([s.index, f"{s.start:.3f}", name, inst, s.action.value])
        return buf.getvalue()


def hyperperiod(tasks: Iterable[TaskSpec | float]) -> int:
    """Least common multiple of the (integer microsecond) periods."""
    periods = [t.period if isinstance(t, TaskSpec) else t for t in tasks]
    if not periods:
        raise ValueError("empty task set")
    ints = []
    for p in periods:
        if p <= 0:
            raise ValueError("periods must be positive")
        if int(p) != p:
            raise ValueError(f"period {p} is not an integer number of microseconds")
        ints.append(int(p))
    h = reduce(math.lcm, ints)
    if h > MAX_HORIZON_US:
        raise OverflowError(f"hyper-period {h} exceeds the representable horizon")
    return h


def utilization(tasks: Iterable[TaskSpec]) -> float:
    return sum(t.wcet / t.period for t in tasks)


def _key(job: Job, policy: Policy):
    t = job.task
    if policy is Policy.EDF:
        return (job.deadline, t.ecu_priority, job.release, t.name)
    return (t.ecu_priority, job.release, t.name)


def _tie(job: Job, policy: Policy):
    if policy is Policy.EDF:
        return (job.deadline, job.task.ecu_priority)
    return (job.task.ecu_priority,)


def _relabel(slots: list[Slot]) -> list[Slot]:
    return [replace(s, index=i) for i, s in enumerate(slots)]


def build_schedule(tasks: Sequence[TaskSpec], horizon: float, policy: Policy | str = Policy.EDF,
                   t0: float = 0.0, ecu: str = "") -> tuple[Schedule, EqPriList]:
    """Non-preemptive schedule of ``tasks`` over ``[t0, t0 + horizon)``.

    Ties in the policy key are broken by release time, then task name.
    Every decision point where two or more ready jobs tie on priority
    (EDF: same absolute deadline and ECU priority; static: same ECU
    priority) is recorded in the returned equal-priority lists.
    """
    policy = Policy(policy)
    tasks = list(tasks)
    if utilization(tasks) > 1 + 1e-12:
        raise InfeasibleSchedule(f"utilization {utilization(tasks):.3f} exceeds 1")
    h = hyperperiod(tasks)
    if abs(horizon / h - round(horizon / h)) > 1e-9 or horizon <= 0:
        raise ValueError(f"horizon {horizon} is not a positive multiple of the hyper-period {h}")
    jobs = []
    for t in tasks:
        n = int(round(horizon / t.period))
        # instances are numbered from time zero so keys stay unique across horizons
        first = int(round(t0 / t.period))
        for m in range(n):
            r = t0 + m * t.period
            jobs.append(Job(t, first + m + 1, r, r + t.period))
    jobs.sort(key=lambda j: (j.release, j.task.name))
    eq: dict[JobKey, set[JobKey]] = {}
    slots: list[Slot] = []
    now = t0
    remaining = jobs
    while remaining:
        ready = [j for j in remaining if j.release <= now]
        if not ready:
            nxt = min(j.release for j in remaining)
            slots.append(Slot(0, now, nxt))
            now = nxt
            continue
        ready.sort(key=lambda j: _key(j, policy))
        chosen = ready[0]
        tied = [j for j in ready if _tie(j, policy) == _tie(chosen, policy)]
        if len(tied) > 1:
            keys = {j.key for j in tied}
            for j in tied:
                eq.setdefault(j.key, set()).update(keys - {j.key})
        end = now + chosen.task.wcet
        if end > chosen.deadline + 1e-9:
            raise InfeasibleSchedule(
                f"{chosen.task.name}#{chosen.instance} misses its deadline "
                f"({end:.1f} > {chosen.deadline:.1f})", chosen)
        slots.append(Slot(0, now, end, chosen))
        now = end
        remaining = [j for j in remaining if j is not chosen]
    if now < t0 + horizon:
        slots.append(Slot(0, now, t0 + horizon))
    eq_pri = {k: frozenset(v) for k, v in eq.items()}
    sched = Schedule(_relabel(slots), h, horizon, t0, ecu, eq_pri, policy)
    return sched, eq_pri


class Direction(str, enum.Enum):
    BUS_TO_ECU = "bus_to_ecu"
    ECU_TO_BUS = "ecu_to_bus"


class SlotMapper:
    """Correspondence between bus slots and the ECU jobs that produced them.

    Bus slots are 0-based positions in ``trace.transmissions()``. Only frames
    sent by the schedule's own ECU map to jobs; everything else is None.
    """

    def __init__(self, schedule: Schedule, trace):
        self.schedule = schedule
        self._tx = trace.transmissions()
        keys = {s.job.key for s in schedule.job_slots()}
        self._b2e: dict[int, JobKey | None] = {}
        self._e2b: dict[JobKey, int] = {}
        for i, ev in enumerate(self._tx):
            f = ev.frame
            key = f.tag if f is not None and f.source == schedule.ecu and f.tag in keys else None
            self._b2e[i] = key
            if key is not None:
                self._e2b.setdefault(key, i)

    def __len__(self):
        return len(self._tx)

    def bus_to_ecu(self, bus_slot: int) -> JobKey | None:
        if bus_slot not in self._b2e:
            raise LookupError(f"bus slot {bus_slot} not in the observed trace")
        return self._b2e[bus_slot]

    def ecu_to_bus(self, key: JobKey) -> int | None:
        self.schedule.slot_of(key)  # raises for unknown jobs
        return self._e2b.get(key)

    def map(self, slot, direction: Direction | str):
        if Direction(direction) is Direction.BUS_TO_ECU:
            return self.bus_to_ecu(slot)
        return self.ecu_to_bus(slot)


def _move(seq: list[Slot], src: int, dst: int) -> list[Slot]:
    """Move seq[src] so it ends up at position dst (positions before removal)."""
    seq = list(seq)
    item = seq.pop(src)
    if dst > src:
        dst -= 1
    seq.insert(dst, item)
    return seq


def _check_deadlines(slots: Iterable[Slot]):
    for s in slots:
        if s.job is not None and s.end > s.job.deadline + 1e-9:
            raise InfeasibleSchedule(
                f"{s.job.task.name}#{s.job.instance} would miss its deadline "
                f"({s.end:.1f} > {s.job.deadline:.1f})", s.job)


def reorder(schedule: Schedule, victim: JobKey, before: JobKey | None = None,
            after: JobKey | None = None) -> Schedule:
    """Return a schedule where ``victim`` runs right before ``before`` (or right after ``after``)."""
    busy = [s for s in schedule.slots if s.job is not None]
    pos = {s.job.key: i for i, s in enumerate(busy)}
    if victim not in pos:
        raise KeyError(f"no job {victim} in schedule")
    src = pos[victim]
    if before is not None:
        dst = pos[before]
    elif after is not None:
        dst = pos[after] + 1
    else:
        return schedule
    if dst in (src, src + 1):
        return schedule
    vjob = busy[src].job
    lo = min(src, dst)
    if dst < src and busy[dst].start < vjob.release - 1e-9:
        raise InfeasibleSchedule(f"{victim[0]}#{victim[1]} is not released at the start of "
                                 f"{busy[dst].job.task.name}#{busy[dst].job.instance}", vjob)
    new_busy = _move(busy, src, dst)
    original = {s.job.key: s for s in busy}
    new_busy = new_busy[:lo] + _retime(new_busy[lo:], original, victim, busy[lo].start)
    _check_deadlines(new_busy)
    return _with_gaps(schedule, new_busy)


def _retime(tail: list[Slot], original: dict[JobKey, Slot], victim: JobKey, start_at: float) -> list[Slot]:
    # up to and including the victim, jobs start as soon as the processor
    # is free and they are released; after it nobody starts earlier than
    # it did originally
    out = []
    prev_end = start_at
    seen = False
    for s in tail:
        job = s.job
        if seen:
            start = max(prev_end, original[job.key].start)
        else:
            start = max(prev_end, job.release)
            seen = job.key == victim
        out.append(replace(s, start=start, end=start + job.task.wcet))
        prev_end = start + job.task.wcet
    return out


def _with_gaps(schedule: Schedule, busy: list[Slot]) -> Schedule:
    slots = []
    now = schedule.t0
    for s in sorted(busy, key=lambda s: s.start):
        if s.start > now + 1e-9:
            slots.append(Slot(0, now, s.start))
        slots.append(s)
        now = s.end
    if now < schedule.t0 + schedule.horizon - 1e-9:
        slots.append(Slot(0, now, schedule.t0 + schedule.horizon))
    return replace(schedule, slots=_relabel(slots))


def apply_obf(schedule: Schedule, plan: ObfPlan | Iterable[Action]) -> Schedule:
    """Realize a plan: skipped jobs keep their time but release nothing; reorders move the victim.

    Raises InfeasibleSchedule naming the violating job when a reorder would
    miss a deadline.
    """
    actions = list(plan)
    keys = {s.job.key for s in schedule.job_slots()}
    for a in actions:
        for k in (a.skipped, a.move_before, a.move_after):
            if k is not None and k not in keys:
                raise KeyError(f"plan refers to {k}, outside the schedule horizon")
    out = schedule
    for a in actions:
        if a.move_before is not None or a.move_after is not None:
            out = reorder(out, a.victim, before=a.move_before, after=a.move_after)
            if a.rule in (ObfRule.OBF3, ObfRule.RANDOM):
                out = _mark(out, a.victim, a.rule)
    for a in actions:
        if a.rule in (ObfRule.OBF1, ObfRule.OBF2) and a.skipped is not None:
            out = _mark(out, a.skipped, a.rule)
    return out


def _mark(schedule: Schedule, key: JobKey, rule: ObfRule) -> Schedule:
    slots = [replace(s, action=rule) if s.job is not None and s.job.key == key else s for s in schedule.slots]
    return replace(schedule, slots=slots)


def executed_pattern(schedule: Schedule, task: str) -> list[int]:
    """1 for each executed instance of ``task`` in release order, 0 for each skipped one."""
    return [0 if s.skipped else 1
            for s in sorted((s for s in schedule.job_slots() if s.job.task.name == task),
                            key=lambda s: s.job.instance)]
