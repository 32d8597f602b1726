import pytest

from hidenseek import walkthrough as wt
from hidenseek.asp import (AspTotal, NonExhaustivePlan, SlotStats, conditional_asp, per_slot_asp,
                           randomization_bound, slot_asp, slot_stats, total_asp)
from hidenseek.plan import Action, ObfPlan, ObfRule


def test_slot_stats_validation():
    with pytest.raises(ValueError):
        SlotStats(1, 2, 0, 1)
    with pytest.raises(ValueError):
        SlotStats(1, 1, 4, 3)
    assert SlotStats(1, 1, 0, 0).ratio() == 0.0  # no transmissions in between: no injection point
    assert SlotStats(0, 0, 0, 0).ratio() == 0.0


def test_slot_asp_hand_computed():
    stats = [SlotStats(4, 1, 3, 6, 0, 1), SlotStats(15, 1, 5, 10, 1, 1)]
    assert slot_asp(stats, 2) == pytest.approx(0.5 * 3 / 6 + 0.5 * 5 / 10)
    assert slot_asp([SlotStats(0, 0, 0, 0, 0, 1), SlotStats(9, 1, 2, 4, 1, 1)], 2) == pytest.approx(0.25)


def test_walkthrough_stats_frozen():
    stats = slot_stats(wt.run().trace, wt.VICTIM_ID, wt.RECON, wt.H, period=10 * 1000.0)
    assert [(s.j, s.ct, s.n, s.tbi) for s in stats] == [
        (3, 1, 0, 2), (6, 1, 0, 2), (10, 1, 3, 3), (16, 1, 5, 5),
        (20, 1, 1, 3), (23, 1, 2, 2), (27, 1, 3, 3), (33, 1, 5, 5)]
    per = per_slot_asp(stats, wt.RECON)
    assert per == pytest.approx({1: 1 / 6, 2: 0.5, 3: 1.0, 4: 1.0})
    tot = total_asp(per)
    assert tot.saturated and tot.clamped == 1.0 and tot.total == pytest.approx(8 / 3)


def test_absent_instance_contributes_zero():
    tr = wt.run().trace
    stats = slot_stats(tr, 0x7FF, 1, wt.H)
    assert stats == []


def test_total_asp_flags_saturation():
    assert total_asp([0.2, 0.3]) == AspTotal(0.5, False)
    assert total_asp({1: 0.7, 2: 0.6}).saturated


def test_randomization_bound():
    stats = [SlotStats(5, 1, 4, 8, 0, 1), SlotStats(5, 1, 1, 8, 0, 2)]
    assert randomization_bound(stats, {(0, 1): 2, (0, 2): 3}) == pytest.approx({1: 2 / 8, 2: 0.0})
    assert randomization_bound(stats, 1) == pytest.approx({1: 3 / 8, 2: 0.0})


def _plan(*actions):
    return ObfPlan("E", list(actions))


def test_conditional_asp_per_rule():
    stats = [SlotStats(5, 1, 4, 8, 0, 1), SlotStats(9, 1, 4, 8, 0, 2), SlotStats(13, 1, 4, 8, 0, 3),
             SlotStats(17, 1, 4, 8, 0, 4), SlotStats(0, 0, 0, 0, 0, 5)]
    plan = _plan(Action(ObfRule.OBF1, ("V", 1), skipped=("V", 1), reduction=4, occurrence=(0, 1)),
                 Action(ObfRule.OBF2, ("V", 2), skipped=("P", 2), reduction=1, occurrence=(0, 2)),
                 Action(ObfRule.OBF3, ("V", 3), group=(("G", 3), ("G", 4)), reduction=2, occurrence=(0, 3)),
                 Action(ObfRule.NONE, ("V", 4), reason="no option", occurrence=(0, 4)))
    bd = conditional_asp(stats, plan, 1, {(0, 3): 2})
    assert [r.asp_conditional for r in bd.rows] == pytest.approx([0.0, 3 / 8, 2 / 8, 4 / 8, 0.0])
    assert [r.asp for r in bd.rows] == pytest.approx([0.5] * 4 + [0.0])
    assert [r.rule for r in bd.rows][:4] == [ObfRule.OBF1, ObfRule.OBF2, ObfRule.OBF3, ObfRule.NONE]
    assert bd.rule_freq[ObfRule.OBF1] == pytest.approx(0.25)
    assert bd.total_conditional.total == pytest.approx(9 / 8)
    assert bd.slot_rules()[1] == {ObfRule.OBF1}
    csv = bd.to_csv(("cycle",), (0,)).splitlines()
    assert csv[0] == "cycle,slot_index,instance,ct,n,tbi,asp,obf_rule,asp_conditional,randomization_bound"
    assert csv[1] == "0,5,1,1,4,8,0.5,obf1,0,0.5"


def test_plan_must_cover_every_vulnerable_occurrence():
    stats = [SlotStats(5, 1, 4, 8, 0, 1), SlotStats(9, 1, 0, 3, 0, 2)]
    with pytest.raises(NonExhaustivePlan):
        conditional_asp(stats, _plan(), 1)
    # empty windows need no decision; no plan means the undefended baseline
    conditional_asp(stats, _plan(Action(ObfRule.NONE, ("V", 1), occurrence=(0, 1))), 1)
    assert conditional_asp(stats, None, 1).total_conditional.total == pytest.approx(0.5)


def test_decisions_are_filtered_by_victim_task():
    stats = [SlotStats(5, 1, 4, 8, 0, 1)]
    plan = _plan(Action(ObfRule.OBF1, ("W", 1), skipped=("W", 1), occurrence=(0, 1)),
                 Action(ObfRule.NONE, ("V", 1), occurrence=(0, 1)))
    assert conditional_asp(stats, plan, 1, task="V").rows[0].asp_conditional == pytest.approx(0.5)
    assert conditional_asp(stats, plan, 1, task="W").rows[0].asp_conditional == 0.0
