"""Schedule-based bus-off attacker.

The attacker watches the bus for ``recon`` hyper-periods, measures for every
instance of the victim message how many higher-priority frames ran
back-to-back right before it (its attack window), and then releases a
same-id, dominant-payload frame inside the most promising window of every
following hyper-period.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .can import BusEvent, BusTrace, CanBus, EventKind, Frame, Mode

ATTACKER = "ATK"
EPS = 1e-6

EPISODE_COLUMNS = ("hyper_period", "targeted_instance", "collision", "victim_tec", "attacker_tec", "victim_mode")


class NoVictim(LookupError):
    """The victim id never shows up in the observed trace."""


class NoViableTarget(Exception):
    """Every victim instance is idle- or low-priority-preceded; the attacker stands down."""


@dataclass(frozen=True)
class AttackWindow:
    victim_instance: tuple[int, int]  # (msg id, instance within the hyper-period)
    k: int  # hyper-period within the observation
    window_len: int
    window_slots: tuple[int, ...] = ()  # bus slots (indices into trace.transmissions())
    bus_slot: int = -1  # slot of the victim frame itself
    tbi: int = 0  # transmissions since the previous victim occurrence
    # start of the last higher-priority frame, relative to the hyper-period start
    last_hp_offset: float | None = None

    @property
    def instance(self) -> int:
        return self.victim_instance[1]


def _hp_count(H: float, period: float | None) -> int | None:
    if period is None:
        return None
    q = H / period
    if abs(q - round(q)) > 1e-9:
        raise ValueError(f"victim period {period} does not divide the hyper-period {H}")
    return int(round(q))


def victim_windows(trace: BusTrace, victim: int, H: float, recon: int | None = None, t0: float | None = None,
                   period: float | None = None, exclude_sources: Iterable[str] = ()) -> list[AttackWindow]:
    """Attack window of every victim occurrence in the trace.

    Instances are numbered within their hyper-period. When ``period`` is
    given and frames carry job tags, the tag decides the instance (so a
    skipped instance leaves a hole); otherwise occurrences are counted in
    bus order.
    """
    t0 = trace.start if t0 is None else t0
    per_hp = _hp_count(H, period)
    excluded = set(exclude_sources)
    tx = trace.transmissions()
    # error frames occupy the bus without being slots; a window may span them
    err_start: dict[float, float] = {}
    for e in trace.events:
        if e.kind is EventKind.TX_ERROR:
            key = round(e.end, 3)
            err_start[key] = min(err_start.get(key, e.time), e.time)

    def bridged(a: float, b: float) -> bool:
        t = b
        while t > a + EPS:
            s = err_start.get(round(t, 3))
            if s is None:
                return False
            t = s
        return True

    out: list[AttackWindow] = []
    prev = -1
    seen: dict[int, int] = {}
    for idx, ev in enumerate(tx):
        if ev.frame.id != victim or ev.source in excluded:
            continue
        k = int((ev.time - t0) // H)
        if per_hp is not None and ev.frame.tag is not None:
            g = ev.frame.tag[1] - 1
            k = g // per_hp - int(round(t0 / H))
            inst = g % per_hp + 1
        else:
            seen[k] = seen.get(k, 0) + 1
            inst = seen[k]
        if recon is not None and not 0 <= k < recon:
            prev = idx
            continue
        run: list[int] = []
        nxt = ev
        j = idx - 1
        while j > prev:
            e = tx[j]
            # an idle gap or a lower-priority frame ends the window
            if e.end < nxt.time - EPS and not bridged(e.end, nxt.time):
                break
            if e.source in excluded:
                # excluded frames are transparent: they bridge time but do not count
                nxt = e
                j -= 1
                continue
            if e.frame.id >= victim:
                break
            run.append(j)
            nxt = e
            j -= 1
        run.reverse()
        offset = tx[run[-1]].time - (t0 + k * H) if run else None
        tbi = sum(1 for e in tx[prev + 1:idx] if e.source not in excluded)
        out.append(AttackWindow((victim, inst), k, len(run), tuple(run), idx, tbi, offset))
        prev = idx
    return out


@dataclass
class ReconReport:
    victim: int
    recon: int
    H: float
    windows: list[AttackWindow]
    instances: int
    t0: float = 0.0

    def lengths(self, instance: int) -> list[int]:
        """Window length of ``instance`` in each hyper-period (0 where it did not transmit)."""
        out = [0] * self.recon
        for w in self.windows:
            if w.instance == instance:
                out[w.k] = w.window_len
        return out

    @property
    def averages(self) -> dict[int, int]:
        return {i: math.ceil(sum(self.lengths(i)) / self.recon) for i in range(1, self.instances + 1)}

    def ct(self, k: int, instance: int) -> int:
        return int(any(w.k == k and w.instance == instance for w in self.windows))

    def latest(self, instance: int) -> AttackWindow | None:
        """Most recent non-empty window of an instance (the attacker's timing reference)."""
        cands = [w for w in self.windows if w.instance == instance and w.window_len > 0]
        return max(cands, key=lambda w: w.k) if cands else None


def recon_analyze(trace: BusTrace, victim: int, recon: int, H: float, t0: float | None = None,
                  period: float | None = None, exclude_sources: Iterable[str] = ()) -> ReconReport:
    if recon < 1:
        raise ValueError("recon must be at least 1")
    t0 = trace.start if t0 is None else t0
    wins = victim_windows(trace, victim, H, recon, t0, period, exclude_sources)
    if not wins:
        raise NoVictim(f"id {victim:#x} absent from the observed trace")
    per_hp = _hp_count(H, period)
    instances = per_hp if per_hp is not None else max(w.instance for w in wins)
    return ReconReport(victim, recon, H, wins, instances, t0)


def select_target(report: ReconReport | Sequence[int] | dict[int, int]) -> int:
    """Instance with the longest average window; ties go to the earliest instance."""
    if isinstance(report, ReconReport):
        avgs = report.averages
    elif isinstance(report, dict):
        avgs = dict(report)
    else:
        avgs = {i + 1: a for i, a in enumerate(report)}
    if not avgs:
        raise ValueError("empty report")
    best = max(avgs.values())
    if best <= 0:
        raise NoViableTarget("no instance is preceded by a higher-priority run")
    return min(i for i, a in avgs.items() if a == best)


@dataclass
class AttackPlan:
    victim: int
    targets: tuple[int, ...]
    # release offset of the attack frame per target, relative to the hyper-period start
    offsets: dict[int, float]
    H: float
    dlc: int = 8
    source: str = ATTACKER
    predicted: dict[int, int] = field(default_factory=dict)

    @property
    def target_instance(self) -> int:
        return self.targets[0]

    def frame(self, release: float, tag=None) -> Frame:
        # all-zero payload is dominant against any non-zero victim payload
        return Frame(self.victim, self.dlc, bytes(self.dlc), self.source, release, tag)


def plan_attack(report: ReconReport, dlc: int = 8, source: str = ATTACKER, campaign: str = "best") -> AttackPlan:
    """Turn a reconnaissance report into an attack plan.

    ``campaign="best"`` targets the single most vulnerable instance;
    ``"all"`` targets every instance with a non-zero average window.
    """
    best = select_target(report)
    avgs = report.averages
    if campaign == "best":
        targets = (best,)
    elif campaign == "all":
        targets = tuple(i for i in sorted(avgs) if avgs[i] > 0 and report.latest(i) is not None)
    else:
        raise ValueError(f"unknown campaign {campaign!r}")
    offsets = {}
    for i in targets:
        w = report.latest(i)
        if w is None:
            raise ValueError(f"instance {i} has no type-(i) window to synchronize with")
        offsets[i] = w.last_hp_offset
    return AttackPlan(report.victim, targets, offsets, report.H, dlc, source, {i: avgs[i] for i in targets})


def inject_attack(plan: AttackPlan, bus: CanBus, start: float, hyper_periods: int,
                  victim_source: str | None = None) -> list[Frame]:
    """Queue attack frames for ``hyper_periods`` hyper-periods starting at ``start``.

    Once ``victim_source`` goes bus-off the remaining attack frames are
    withdrawn. Returns the submitted frames.
    """
    for i in plan.targets:
        if plan.predicted.get(i, 1) <= 0:
            raise ValueError(f"instance {i} is idle-preceded; not a synchronizable target")
    k0 = int(round(start / plan.H))
    frames = []
    for k in range(hyper_periods):
        for i in plan.targets:
            t = start + k * plan.H + plan.offsets[i]
            frames.append(plan.frame(t, tag=("atk", (k0 + k) * 1000 + i)))
    frames.sort(key=lambda f: f.release_time)
    if victim_source is not None and bus.states.get(victim_source) is not None \
            and bus.states[victim_source].bus_off:
        return []
    bus.submit(frames)
    if victim_source is not None:
        def stop(ev: BusEvent, src=plan.source, vs=victim_source):
            if ev.source == vs and ev.mode_after is Mode.BUS_OFF:
                bus.withdraw(src)
        bus.listeners.append(stop)
    return frames


@dataclass(frozen=True)
class Episode:
    hyper_period: int
    targeted_instance: int
    collision: int
    victim_tec: int
    attacker_tec: int
    victim_mode: str


def episode_log(events: Sequence[BusEvent], attack_frames: Sequence[Frame], victim_source: str,
                attacker: str = ATTACKER) -> list[Episode]:
    """One row per attack frame: did its first bus appearance collide with the victim?"""
    by_time: dict[float, list[BusEvent]] = {}
    first: dict[int, BusEvent] = {}
    for ev in events:
        by_time.setdefault(ev.time, []).append(ev)
        if ev.source == attacker and ev.frame is not None and ev.kind is not EventKind.ARBITRATION_LOSS:
            first.setdefault(id(ev.frame), ev)
    vtec, vmode, atec = 0, Mode.ERROR_ACTIVE, 0
    rows = []
    # walk events in order, tracking the latest counters of both nodes
    states: dict[float, tuple[int, str, int]] = {}
    for ev in events:
        if ev.frame is None:
            continue
        if ev.source == victim_source:
            vtec, vmode = ev.tec_after, ev.mode_after
        elif ev.source == attacker:
            atec = ev.tec_after
        states[ev.time] = (vtec, vmode.value, atec)
    for f in attack_frames:
        ev = first.get(id(f))
        if ev is None:
            continue
        hit = any(e.kind is EventKind.TX_ERROR and e.source == victim_source for e in by_time[ev.time])
        v, m, a = states[ev.time]
        tag = f.tag[1] if f.tag else 0
        rows.append(Episode(tag // 1000, tag % 1000, int(hit), v, a, m))
    return rows


def episodes_csv(rows: Iterable[Episode]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_COLUMNS)
    for r in rows:
        w.writerow([r.hyper_period, r.targeted_instance, r.collision, r.victim_tec, r.attacker_tec, r.victim_mode])
    return buf.getvalue()
