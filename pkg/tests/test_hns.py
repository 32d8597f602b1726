import random

import pytest

from hidenseek import walkthrough as wt
from hidenseek.asp import conditional_asp, slot_stats
from hidenseek.attacker import ATTACKER, plan_attack, recon_analyze
from hidenseek.can import CanBus
from hidenseek.ecu import SlotMapper, apply_obf, executed_pattern
from hidenseek.hns import (AlignmentError, Defender, alarms_csv, check_skip_lim, eq_pri_sizes, hide,
                           max_skip_run, randomize, rpt, seek, trailing_skips)
from hidenseek.plan import Action, ObfPlan, ObfRule

MS = 1000.0
SPAN = wt.RECON * wt.H
SKIPS = {t.name: t.skip_limit for t in wt.TASKS}


@pytest.fixture(scope="module")
def observed():
    w = wt.run()
    rep = recon_analyze(w.trace, wt.VICTIM_ID, wt.RECON, wt.H, period=10 * MS)
    return w, rep


def _hide(observed, **kw):
    w, rep = observed
    nxt = wt.schedule(SPAN)
    plan = hide(wt.H, wt.RECON, [0x080, wt.VICTIM_ID], {wt.VICTIM_ID: rep}, wt.TASKS, wt.H, SKIPS,
                schedule=nxt, mapper=SlotMapper(w.schedule, w.trace), **kw)
    return plan, nxt


def test_rpt():
    assert rpt(2, 40, 40) == 2
    assert rpt(3, 60, 40) == 5


def test_walkthrough_plan_frozen(observed):
    plan, nxt = _hide(observed)
    got = [(a.rule, a.victim, a.skipped, a.move_before, a.occurrence) for a in plan]
    assert got == [
        (ObfRule.OBF1, ("T_v", 12), ("T_v", 12), None, (0, 4)),
        (ObfRule.OBF1, ("T_v", 16), ("T_v", 16), None, (1, 4)),
        (ObfRule.OBF1, ("T_v", 11), ("T_v", 11), None, (0, 3)),
        (ObfRule.OBF1, ("T_v", 15), ("T_v", 15), None, (1, 3)),
        (ObfRule.OBF3, ("T_v", 13), None, ("T_green", 4), (1, 1)),
        (ObfRule.OBF2, ("T_v", 14), ("T_hp", 14), None, (1, 2)),
    ]
    applied = apply_obf(nxt, plan)
    assert executed_pattern(applied, "T_v") == [1, 1, 0, 0, 1, 1, 0, 0]
    assert executed_pattern(applied, "T_hp") == [1, 1, 1, 1, 1, 0, 1, 1]
    assert max_skip_run(executed_pattern(applied, "T_v")) <= SKIPS["T_v"]
    assert applied.slot_of(("T_v", 13)).start < applied.slot_of(("T_green", 4)).start


def test_plan_lowers_asp_of_every_vulnerable_occurrence(observed):
    w, rep = observed
    plan, _ = _hide(observed)
    stats = slot_stats(w.trace, wt.VICTIM_ID, wt.RECON, wt.H, period=10 * MS)
    bd = conditional_asp(stats, plan, wt.RECON, eq_pri_sizes(rep, SlotMapper(w.schedule, w.trace)), task="T_v")
    for r in bd.rows:
        assert r.asp_conditional <= r.asp
        if r.stats.n:
            assert r.asp_conditional < r.asp
        if r.rule is ObfRule.OBF1:
            assert r.asp_conditional == 0.0


def test_without_wider_reorder_preference_obf2_comes_first(observed):
    plan, _ = _hide(observed, prefer_wider_reorder=False)
    assert ObfRule.OBF2 in {a.rule for a in plan}


def test_check_skip_lim_counts_carry_in_and_neighbours():
    plan = ObfPlan("E", [Action(ObfRule.OBF1, ("T", 3), skipped=("T", 3))], first={"T": 1})
    assert check_skip_lim("T", 4, plan, {"T": 2})
    assert not check_skip_lim("T", 4, plan, {"T": 1})
    assert not check_skip_lim("T", 3, plan, {"T": 5})
    carried = ObfPlan("E", [], carry_in={"T": 1}, first={"T": 1})
    assert not check_skip_lim("T", 1, carried, {"T": 1})
    assert check_skip_lim("T", 2, carried, {"T": 1})
    with pytest.raises(LookupError):
        check_skip_lim("U", 1, plan, {"T": 1})


def test_skip_run_helpers():
    assert max_skip_run([1, 0, 0, 1, 0]) == 2
    assert max_skip_run([0, 1], carry_in=2) == 3
    s = apply_obf(wt.schedule(0.0), [Action(ObfRule.OBF1, ("T_v", 8), skipped=("T_v", 8))])
    assert trailing_skips(s, "T_v") == 1
    assert trailing_skips(s, "T_hp", carry_in=2) == 0


def _next_period(plan, nxt, attack=None):
    applied = apply_obf(nxt, plan)
    bus = CanBus(wt.BITRATE, [wt.VICTIM_ECU, wt.OTHER_ECU])
    extra = []
    if attack is not None:
        extra = [attack.frame(SPAN + k * wt.H + attack.offsets[i]) for k in range(wt.RECON) for i in attack.targets]
    w = wt.run(SPAN, applied, bus, extra)
    return w, applied


def test_seek_alarms_on_attack_against_skipped_instance(observed):
    _, rep = observed
    plan, nxt = _hide(observed)
    w, applied = _next_period(plan, nxt, plan_attack(rep))
    alarm = seek(w.trace, plan, applied)
    assert alarm
    assert {e.job for e in alarm.evidence} == {("T_v", 12), ("T_v", 16)}
    assert all(e.planned_action is ObfRule.OBF1 for e in alarm.evidence)
    text = alarms_csv([alarm], ("cycle",), [(1,)])
    assert text.splitlines()[0] == "cycle,time_us,bus_slot,observed_id,planned_action"
    assert len(text.splitlines()) == 3


def test_seek_is_quiet_on_clean_traffic(observed):
    plan, nxt = _hide(observed)
    w, applied = _next_period(plan, nxt)
    alarm = seek(w.trace, plan, applied)
    assert not alarm and not alarm.evidence and not alarm.logged


def test_seek_requires_aligned_trace(observed):
    w, _ = observed
    plan, nxt = _hide(observed)
    with pytest.raises(AlignmentError):
        seek(w.trace, plan, apply_obf(nxt, plan))


def test_randomize_never_skips_and_respects_bound(observed):
    w, rep = observed
    mapper = SlotMapper(w.schedule, w.trace)
    stats = slot_stats(w.trace, wt.VICTIM_ID, wt.RECON, wt.H, period=10 * MS)
    sizes = eq_pri_sizes(rep, mapper)
    for seed in range(20):
        plan = randomize(wt.H, wt.RECON, [wt.VICTIM_ID], {wt.VICTIM_ID: rep}, wt.TASKS, wt.H,
                         schedule=wt.schedule(SPAN), mapper=mapper, rng=random.Random(seed))
        assert not plan.skipped()
        bd = conditional_asp(stats, plan, wt.RECON, sizes, task="T_v")
        for r in bd.rows:
            assert r.asp_conditional >= r.bound - 1e-12


def test_defender_carries_skips_over_the_boundary(observed):
    w, rep = observed
    d = Defender(wt.VICTIM_ECU, wt.TASKS, wt.H, wt.RECON, wt.H)
    plan, applied = d.plan({wt.VICTIM_ID: rep}, w.schedule, w.trace, wt.schedule(SPAN))
    assert d.carry_in["T_v"] == 2  # T_v#15 and #16 close the period skipped
    assert d.carry_in["T_hp"] == 0
    off = Defender(wt.VICTIM_ECU, wt.TASKS, wt.H, wt.RECON, wt.H, mode="off")
    plan, _ = off.plan({wt.VICTIM_ID: rep}, w.schedule, w.trace, wt.schedule(SPAN))
    assert len(plan) == 0


def test_attacker_and_error_frames_are_transparent_to_reconnaissance():
    from hidenseek.can import Frame
    bus = CanBus(wt.BITRATE, ["A", "V", ATTACKER])
    bus.submit([Frame(0x050, source="A", release_time=0.0), Frame(0x100, source="V", release_time=0.0),
                Frame(0x100, 8, bytes(8), source=ATTACKER, release_time=0.0)])
    bus.run_until(20 * MS)
    tr = bus.trace(0.0, 20 * MS)
    # 0x050, sixteen error frames, the attacker's frame, then the victim's retransmission
    assert recon_analyze(tr, 0x100, 1, 20 * MS, exclude_sources=[ATTACKER]).averages == {1: 1}
    # unfiltered, the attack frame itself looks like an occurrence and hides the window
    assert recon_analyze(tr, 0x100, 1, 20 * MS).averages == {1: 1, 2: 0}
