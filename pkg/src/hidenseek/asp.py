"""Attack success probability of a victim message.

A victim occurrence whose attack window holds ``n`` of the ``tbi``
transmissions since the previous occurrence gives the attacker ``n``
favorable injection points out of ``tbi``. Averaged over the observed
hyper-periods and summed over instances this yields the total ASP.
"""
from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

from .attacker import victim_windows
from .can import BusTrace
from .plan import ObfPlan, ObfRule

log = logging.getLogger(__name__)

ASP_COLUMNS = ("slot_index", "instance", "ct", "n", "tbi", "asp", "obf_rule", "asp_conditional",
               "randomization_bound")

Occ = tuple[int, int]  # (hyper-period within the observation, instance)


class NonExhaustivePlan(ValueError):
    """A vulnerable victim occurrence has no decision in the plan."""


@dataclass(frozen=True)
class SlotStats:
    j: int  # 1-based bus slot of the victim frame within the observation, 0 if absent
    ct: int
    n: int
    tbi: int
    k: int = 0
    instance: int = 1

    def __post_init__(self):
        if self.ct not in (0, 1):
            raise ValueError("ct is 0 or 1")
        if self.n > self.tbi:
            raise ValueError(f"window {self.n} longer than the {self.tbi} transmissions since the last victim")

    @property
    def occurrence(self) -> Occ:
        return (self.k, self.instance)

    def ratio(self, removed: int = 0) -> float:
        if not self.ct or self.tbi == 0:
            return 0.0
        return max(self.n - removed, 0) / self.tbi


def slot_stats(trace: BusTrace, victim: int, recon: int, H: float, t0: float | None = None,
               period: float | None = None, exclude_sources: Iterable[str] = ()) -> list[SlotStats]:
    """Per-occurrence statistics, including ct=0 rows for instances that did not transmit."""
    t0 = trace.start if t0 is None else t0
    wins = victim_windows(trace, victim, H, recon, t0, period, exclude_sources)
    if not wins:
        log.info("victim %#x absent from trace", victim)
        return []
    per_hp = int(round(H / period)) if period is not None else max(w.instance for w in wins)
    found = {(w.k, w.instance): w for w in wins}
    out = []
    for k in range(recon):
        for i in range(1, per_hp + 1):
            w = found.get((k, i))
            if w is None:
                out.append(SlotStats(0, 0, 0, 0, k, i))
            else:
                out.append(SlotStats(w.bus_slot + 1, 1, w.window_len, w.tbi, k, i))
    return out


def slot_asp(stats: Sequence[SlotStats], recon: int) -> float:
    """P(AS_j) for one instance from its per-hyper-period statistics."""
    return sum(s.ct / recon * s.ratio() for s in stats)


def per_slot_asp(stats: Sequence[SlotStats], recon: int) -> dict[int, float]:
    out: dict[int, float] = {}
    for s in stats:
        out[s.instance] = out.get(s.instance, 0.0) + s.ct / recon * s.ratio()
    return out


class AspTotal(NamedTuple):
    total: float
    saturated: bool

    @property
    def clamped(self) -> float:
        return min(self.total, 1.0)


def total_asp(per_slot: Iterable[float] | Mapping[int, float]) -> AspTotal:
    vals = per_slot.values() if isinstance(per_slot, Mapping) else per_slot
    t = float(sum(vals))
    return AspTotal(t, t > 1.0)


def randomization_bound(stats: Sequence[SlotStats], eq_pri_sizes: Mapping[Occ, int] | int,
                        recon: int = 1) -> dict[int, float]:
    """Per-instance ASP floor of attack-unaware reordering: (n - |T_v^<|)/tbi."""
    out: dict[int, float] = {}
    for s in stats:
        g = eq_pri_sizes if isinstance(eq_pri_sizes, int) else eq_pri_sizes.get(s.occurrence, 0)
        out[s.instance] = out.get(s.instance, 0.0) + s.ct / recon * s.ratio(g)
    return out


@dataclass(frozen=True)
class AspRow:
    stats: SlotStats
    asp: float
    rule: ObfRule
    asp_conditional: float
    bound: float

    def csv_row(self) -> list:
        s = self.stats
        return [s.j, s.instance, s.ct, s.n, s.tbi, _f(self.asp), self.rule.value, _f(self.asp_conditional),
                _f(self.bound)]


def _f(x: float) -> str:
    return f"{x:.12g}"


@dataclass
class AspBreakdown:
    rows: list[AspRow]
    recon: int
    # empirical P(O_q) over the vulnerable victim occurrences
    rule_freq: dict[ObfRule, float]

    def per_slot(self) -> dict[int, tuple[float, float, float]]:
        """instance -> (P(AS_j), P(AS_j | Obf), randomization bound)."""
        out: dict[int, list[float]] = {}
        for r in self.rows:
            acc = out.setdefault(r.stats.instance, [0.0, 0.0, 0.0])
            acc[0] += r.asp
            acc[1] += r.asp_conditional
            acc[2] += r.bound
        return {i: tuple(v) for i, v in sorted(out.items())}

    @property
    def total(self) -> AspTotal:
        return total_asp(r.asp for r in self.rows)

    @property
    def total_conditional(self) -> AspTotal:
        return total_asp(r.asp_conditional for r in self.rows)

    @property
    def total_bound(self) -> AspTotal:
        return total_asp(r.bound for r in self.rows)

    def slot_rules(self) -> dict[int, set[ObfRule]]:
        out: dict[int, set[ObfRule]] = {}
        for r in self.rows:
            if r.stats.ct and r.stats.n:
                out.setdefault(r.stats.instance, set()).add(r.rule)
        return out

    def to_csv(self, prefix: Sequence[str] = (), prefix_values: Sequence = ()) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(prefix) + list(ASP_COLUMNS))
        for r in self.rows:
            w.writerow(list(prefix_values) + r.csv_row())
        return buf.getvalue()


def conditional_asp(stats: Sequence[SlotStats], plan: ObfPlan | None, recon: int,
                    eq_pri_sizes: Mapping[Occ, int] | None = None, strict: bool = True,
                    task: str | None = None) -> AspBreakdown:
    """ASP of the observed occurrences once the plan's decisions are applied to them.

    Obf1 removes the occurrence; Obf2 and reorders shorten the window by
    the action's ``reduction``. With ``strict`` every occurrence with a
    non-empty window must carry a decision (None-with-reason counts).
    ``task`` restricts the plan to the decisions about that victim task.
    """
    decided = plan.by_occurrence(task) if plan is not None else {}
    sizes = eq_pri_sizes or {}
    rows = []
    applied: Counter = Counter()
    for s in stats:
        base = s.ct / recon * s.ratio()
        a = decided.get(s.occurrence)
        if a is None and strict and plan is not None and s.ct and s.n > 0:
            raise NonExhaustivePlan(f"instance {s.instance} of hyper-period {s.k} has no plan decision")
        rule = ObfRule.NONE if a is None else a.rule
        if rule is ObfRule.OBF1:
            cond = 0.0
        elif rule is ObfRule.NONE:
            cond = base
        else:
            cond = s.ct / recon * s.ratio(a.reduction)
        if s.ct and s.n > 0:
            applied[rule] += 1
        rows.append(AspRow(s, base, rule, cond, s.ct / recon * s.ratio(sizes.get(s.occurrence, 0))))
    n = sum(applied.values())
    freq = {r: (applied[r] / n if n else 0.0) for r in ObfRule}
    return AspBreakdown(rows, recon, freq)
