"""Obfuscation plan types shared by the scheduler and Hide/Seek."""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Iterator

JobKey = tuple[str, int]  # (task name, 1-based instance counted from time zero)

PLAN_COLUMNS = ("ecu_slot", "task", "instance", "action", "predecessor", "group")


class ObfRule(str, enum.Enum):
    NONE = "none"
    OBF1 = "obf1"  # skip the victim instance
    OBF2 = "obf2"  # skip a higher-priority same-ECU predecessor in the window
    OBF3 = "obf3"  # run the victim ahead of its equal-priority group
    RANDOM = "random"  # attack-unaware reorder (randomization baseline)


@dataclass(frozen=True)
class Action:
    rule: ObfRule
    # the ECU job the action is decided for (the victim instance)
    victim: JobKey
    # job that gets skipped (victim for obf1, predecessor for obf2)
    skipped: JobKey | None = None
    group: tuple[JobKey, ...] = ()
    # obf3 / randomization: place the victim right before / after this job
    move_before: JobKey | None = None
    move_after: JobKey | None = None
    # how many frames the action removes from the victim's window (obf2: 1,
    # obf3: |group members in the window|); negative if it adds frames
    reduction: int = 0
    reason: str = ""
    # victim occurrence (hyper-period k, instance i) the action protects
    occurrence: tuple[int, int] | None = None


@dataclass
class ObfPlan:
    """Per-slot decisions for one reconnaissance period of one ECU."""

    ecu: str = ""
    actions: list[Action] = field(default_factory=list)
    t0: float = 0.0
    horizon: float = 0.0
    # trailing consecutive-skip counts per task carried in from the previous plan
    carry_in: dict[str, int] = field(default_factory=dict)
    # first instance number of each task inside the plan horizon
    first: dict[str, int] = field(default_factory=dict)

    def __iter__(self) -> Iterator[Action]:
        return iter(self.actions)

    def __len__(self):
        return len(self.actions)

    def add(self, action: Action):
        self.actions.append(action)

    def skipped(self) -> set[JobKey]:
        return {a.skipped for a in self.actions if a.rule in (ObfRule.OBF1, ObfRule.OBF2) and a.skipped}

    def reorders(self) -> list[Action]:
        return [a for a in self.actions if a.rule is ObfRule.OBF3 or a.move_before or a.move_after]

    def for_victim(self, key: JobKey) -> Action | None:
        for a in self.actions:
            if a.victim == key:
                return a
        return None

    def by_occurrence(self, task: str | None = None) -> dict[tuple[int, int], Action]:
        """Occurrence decisions, optionally only those of one victim task."""
        return {a.occurrence: a for a in self.actions
                if a.occurrence is not None and (task is None or a.victim[0] == task)}

    def rule_counts(self) -> dict[ObfRule, int]:
        out = {r: 0 for r in ObfRule}
        for a in self.actions:
            out[a.rule] += 1
        return out

    def to_rows(self, slot_index: dict[JobKey, int] | None = None) -> list[list]:
        rows = []
        for a in self.actions:
            key = a.skipped if a.rule is ObfRule.OBF2 else a.victim
            idx = "" if slot_index is None else slot_index.get(key, "")
            rows.append([idx, key[0], key[1], a.rule.value,
                         f"{a.skipped[0]}#{a.skipped[1]}" if a.rule is ObfRule.OBF2 else "",
                         ";".join(f"{g[0]}#{g[1]}" for g in a.group) if a.rule is ObfRule.OBF3 else ""])
        return rows

    def to_csv(self, slot_index: dict[JobKey, int] | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PLAN_COLUMNS)
        w.writerows(self.to_rows(slot_index))
        return buf.getvalue()
