import pytest

from hidenseek.can import run_bus
from hidenseek.ecu import (InfeasibleSchedule, Policy, SlotMapper, TaskSpec, apply_obf, build_schedule,
                           executed_pattern, hyperperiod, reorder, utilization)
from hidenseek.plan import Action, ObfPlan, ObfRule

MS = 1000.0
A = TaskSpec("A", 10 * MS, 2 * MS, ecu_priority=1, msg_id=0x10, is_control=True, skip_limit=1)
B = TaskSpec("B", 20 * MS, 3 * MS, ecu_priority=2, msg_id=0x20)
C = TaskSpec("C", 10 * MS, 1 * MS, ecu_priority=1, msg_id=0x30)


def test_hyperperiod_and_utilization():
    assert hyperperiod([A, B]) == 20 * MS
    assert hyperperiod([10, 15, 6]) == 30
    assert utilization([A, B]) == pytest.approx(0.35)


def test_edf_schedule_frozen():
    s, eq = build_schedule([A, B], 20 * MS, Policy.EDF)
    busy = [(sl.job.key, sl.start, sl.end) for sl in s.job_slots()]
    assert busy == [(("A", 1), 0.0, 2000.0), (("B", 1), 2000.0, 5000.0), (("A", 2), 10000.0, 12000.0)]
    assert [sl.idle for sl in s.slots] == [False, False, True, False, True]
    assert eq == {}


def test_instances_are_numbered_from_time_zero():
    s, _ = build_schedule([A, B], 20 * MS, "edf", t0=40 * MS)
    assert sorted(j.key for j in (sl.job for sl in s.job_slots())) == [("A", 5), ("A", 6), ("B", 3)]


def test_static_policy_records_equal_priority_ties():
    s, eq = build_schedule([A, C], 10 * MS, Policy.STATIC)
    assert [sl.job.key for sl in s.job_slots()] == [("A", 1), ("C", 1)]
    assert eq[("C", 1)] == frozenset({("A", 1)})
    assert eq[("A", 1)] == frozenset({("C", 1)})


def test_edf_prefers_earlier_deadline_over_priority():
    long_prio = TaskSpec("L", 20 * MS, 1 * MS, ecu_priority=1, msg_id=0x40)
    short = TaskSpec("S", 5 * MS, 1 * MS, ecu_priority=3, msg_id=0x41)
    s, _ = build_schedule([long_prio, short], 20 * MS, "edf")
    assert s.job_slots()[0].job.key == ("S", 1)
    s, _ = build_schedule([long_prio, short], 20 * MS, "static")
    assert s.job_slots()[0].job.key == ("L", 1)


def test_overload_is_infeasible():
    with pytest.raises(InfeasibleSchedule):
        build_schedule([TaskSpec("X", 10, 6), TaskSpec("Y", 10, 5)], 10)


def test_horizon_must_cover_whole_hyperperiods():
    with pytest.raises(ValueError):
        build_schedule([A, B], 15 * MS)


def test_reorder_moves_victim_and_checks_deadlines():
    s, _ = build_schedule([A, C], 10 * MS, Policy.STATIC)
    r = reorder(s, ("C", 1), before=("A", 1))
    assert [sl.job.key for sl in r.job_slots()] == [("C", 1), ("A", 1)]
    assert r.slot_of(("C", 1)).start == 0.0 and r.slot_of(("A", 1)).start == 1000.0
    tight = TaskSpec("T", 10 * MS, 2 * MS, ecu_priority=1, msg_id=0x50)
    late = TaskSpec("Z", 20 * MS, 9 * MS, ecu_priority=2, msg_id=0x51)
    s2, _ = build_schedule([tight, late], 20 * MS, Policy.STATIC)
    with pytest.raises(InfeasibleSchedule) as err:
        reorder(s2, ("Z", 1), before=("T", 1))
    assert err.value.job.key == ("T", 1)


def test_apply_obf_skip_removes_the_frame_but_keeps_the_slot():
    s, _ = build_schedule([A, B], 20 * MS, Policy.EDF)
    plan = ObfPlan("", [Action(ObfRule.OBF1, ("A", 2), skipped=("A", 2))])
    out = apply_obf(s, plan)
    assert out.slot_of(("A", 2)).skipped
    assert [f.tag for f in out.frames()] == [("A", 1), ("B", 1)]
    assert executed_pattern(out, "A") == [1, 0]
    with pytest.raises(KeyError):
        apply_obf(s, [Action(ObfRule.OBF1, ("A", 9), skipped=("A", 9))])


def test_jitter_is_per_job_and_independent_of_skips():
    s, _ = build_schedule([A, B], 20 * MS, Policy.EDF)
    base = {f.tag: f.release_time for f in s.frames(100.0, seed=3)}
    skipped = apply_obf(s, [Action(ObfRule.OBF1, ("A", 1), skipped=("A", 1))])
    for f in skipped.frames(100.0, seed=3):
        assert f.release_time == base[f.tag]
    assert all(0 <= base[sl.job.key] - sl.end <= 100.0 for sl in s.job_slots())
    assert s.frames(100.0, seed=3) == s.frames(100.0, seed=3)


def test_slot_mapper_roundtrip():
    s, _ = build_schedule([A, B], 20 * MS, Policy.EDF, ecu="E")
    tr = run_bus({"E": s.frames()}, 20 * MS, 250_000)
    m = SlotMapper(s, tr)
    assert len(m) == 3
    for key in [("A", 1), ("B", 1), ("A", 2)]:
        assert m.bus_to_ecu(m.ecu_to_bus(key)) == key
        assert m.map(m.map(key, "ecu_to_bus"), "bus_to_ecu") == key
    with pytest.raises(LookupError):
        m.bus_to_ecu(7)


def test_schedule_csv_has_one_row_per_slot():
    s, _ = build_schedule([A, B], 20 * MS, Policy.EDF)
    lines = s.to_csv().strip().splitlines()
    assert lines[0] == "slot_index,start_us,task,instance,obf_action"
    assert len(lines) == 1 + len(s.slots)
