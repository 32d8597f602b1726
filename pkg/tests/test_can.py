import io

import pytest
from hypothesis import given, settings, strategies as st

from hidenseek.can import (BusTrace, CanBus, EventKind, Frame, MessageId, Mode, NodeState, Outcome, arbitrate,
                           bus_load, frame_bits, frame_time, read_trace_csv, run_bus, update_error_counters)

BITRATE = 250_000


def test_frame_time_dlc8_at_250k():
    assert frame_bits(8) == 135
    assert frame_time(8, BITRATE) == pytest.approx(540.0)


@pytest.mark.parametrize("dlc,bits", [(0, 55), (1, 65), (4, 95), (8, 135)])
def test_frame_bits_frozen(dlc, bits):
    assert frame_bits(dlc) == bits


def test_message_id_range():
    with pytest.raises(ValueError):
        MessageId(0x800)
    with pytest.raises(ValueError):
        Frame(0x800)
    assert str(MessageId(0x1A)) == "0x01a"


def test_lowest_id_wins_arbitration():
    a = Frame(0x200, source="A")
    b = Frame(0x100, source="B")
    arb = arbitrate([a, b])
    assert arb.winner is b and not arb.collision and arb.losers == (a,)


def test_same_id_distinct_sources_collide_and_dominant_payload_wins():
    v = Frame(0x0C4, 8, source="V")
    atk = Frame(0x0C4, 8, bytes(8), source="ATK")
    arb = arbitrate([v, atk])
    assert arb.collision
    assert arb.winner is atk


def test_each_source_offers_its_own_best_frame():
    arb = arbitrate([Frame(0x300, source="A"), Frame(0x050, source="A"), Frame(0x100, source="B")])
    assert arb.winner.id == 0x050 and len(arb.losers) == 1


def test_node_modes():
    assert NodeState(127).mode is Mode.ERROR_ACTIVE
    assert NodeState(128).mode is Mode.ERROR_PASSIVE
    assert NodeState(255).mode is Mode.ERROR_PASSIVE
    assert NodeState(256).mode is Mode.BUS_OFF
    assert NodeState(0, 256).mode is Mode.BUS_OFF


def test_update_counters_active_and_passive():
    tx, rx = update_error_counters([NodeState(0), NodeState(0)], [NodeState(0, 5)], Outcome.BIT_ERROR_ACTIVE)
    assert [n.tec for n in tx] == [8, 8] and rx[0].rec == 6
    tx, rx = update_error_counters([NodeState(130), NodeState(128)], [NodeState(0, 5)],
                                   Outcome.BIT_ERROR_PASSIVE)
    assert [n.tec for n in tx] == [137, 127] and rx[0].rec == 3
    tx, _ = update_error_counters([NodeState(0)], [], Outcome.SUCCESSFUL_TX)
    assert tx[0].tec == 0
    with pytest.raises(ValueError):
        update_error_counters([NodeState(300)], [], Outcome.SUCCESSFUL_TX)


def _attack_stream(periods, period=10_000.0):
    victim = [Frame(0x0C4, 8, source="V", release_time=k * period) for k in range(periods)]
    atk = [Frame(0x0C4, 8, bytes(8), source="ATK", release_time=k * period) for k in range(periods)]
    return victim, atk


def test_attack_drives_victim_to_bus_off_and_it_stays_silent():
    victim, atk = _attack_stream(25)
    bus = CanBus(BITRATE, ["V", "ATK"])
    bus.submit(victim + atk)
    bus.run_until(250_000)
    assert bus.mode("V") is Mode.BUS_OFF
    off = next(e.time for e in bus.events if e.source == "V" and e.mode_after is Mode.BUS_OFF)
    assert not [e for e in bus.events if e.source == "V" and e.time > off]


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=30))
def test_tec_steps_are_bounded_and_modes_monotone(periods):
    victim, atk = _attack_stream(periods)
    bus = CanBus(BITRATE, ["V", "ATK"])
    bus.submit(victim + atk)
    bus.run_until(periods * 10_000.0)
    order = [Mode.ERROR_ACTIVE, Mode.ERROR_PASSIVE, Mode.BUS_OFF]
    prev_tec, prev_mode = 0, Mode.ERROR_ACTIVE
    for e in bus.events:
        if e.source != "V" or e.frame is None:
            continue
        assert e.tec_after - prev_tec <= 8
        # within one uninterrupted attack the victim never goes back to active
        assert order.index(e.mode_after) >= order.index(prev_mode)
        prev_tec, prev_mode = e.tec_after, e.mode_after


def test_identical_frames_from_two_sources_do_not_error():
    bus = CanBus(BITRATE)
    bus.submit([Frame(0x10, source="A"), Frame(0x10, source="B")])
    bus.run_until(10_000)
    assert all(e.kind is EventKind.TX_SUCCESS for e in bus.events if e.frame is not None)
    assert bus.states["A"].tec == bus.states["B"].tec == 0


def test_run_bus_back_to_back_and_idle():
    frames = {"A": [Frame(0x100, source="A", release_time=0.0), Frame(0x100, source="A", release_time=0.0)],
              "B": [Frame(0x050, source="B", release_time=2000.0)]}
    tr = run_bus(frames, 5000.0, BITRATE)
    tx = tr.transmissions()
    assert [e.time for e in tx] == [0.0, 540.0, 2000.0]
    assert [e.kind for e in tr.events].count(EventKind.IDLE) == 1
    assert tr.busy_time() == pytest.approx(3 * 540.0)
    assert tr.utilization() == pytest.approx(3 * 540.0 / 5000.0)


def test_run_bus_rejects_unsorted_streams():
    with pytest.raises(ValueError):
        run_bus({"A": [Frame(1, source="A", release_time=5.0), Frame(1, source="A", release_time=1.0)]},
                100.0, BITRATE)


def test_frames_pending_at_horizon_are_reported_unsent():
    tr = run_bus([Frame(0x10, source="A", release_time=900.0)], 500.0, BITRATE)
    assert len(tr.unsent) == 1 and not tr.transmissions()


def test_trace_csv_roundtrip():
    tr = run_bus([Frame(0x10, source="A", release_time=0.0), Frame(0x20, 4, source="B", release_time=0.0)],
                 2000.0, BITRATE)
    text = tr.to_csv()
    back = read_trace_csv(io.StringIO(text), BITRATE, 2000.0)
    assert back.to_csv() == text
    assert [(e.time, e.end, e.frame.id) for e in back.transmissions()] == \
        [(e.time, e.end, e.frame.id) for e in tr.transmissions()]


def test_bus_load_offered():
    assert bus_load([Frame(1)] * 10, 10_000.0, BITRATE) == pytest.approx(0.54)


def test_bus_state_persists_across_run_until_calls():
    victim, atk = _attack_stream(2)
    bus = CanBus(BITRATE, ["V", "ATK"])
    bus.submit(victim[:1] + atk[:1])
    bus.run_until(10_000)
    tec = bus.states["V"].tec
    bus.submit(victim[1:] + atk[1:])
    bus.run_until(20_000)
    assert bus.states["V"].tec > tec - 1
    assert isinstance(bus.trace(10_000, 20_000), BusTrace)
