"""Frame-granularity CAN bus model.

Arbitration, frame timing, the TEC/REC error-confinement machine and a
deterministic event loop. Times are in microseconds (floats); frame
lengths come from a fixed worst-case stuffing model so that results are
reproducible bit for bit.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

MAX_ID = 0x7FF
PASSIVE_THRESHOLD = 127
BUS_OFF_THRESHOLD = 255

TRACE_COLUMNS = ("time_us", "kind", "id_hex", "dlc", "source", "tec_after", "mode_after")


class Mode(str, enum.Enum):
    ERROR_ACTIVE = "ErrorActive"
    ERROR_PASSIVE = "ErrorPassive"
    BUS_OFF = "BusOff"


class Outcome(str, enum.Enum):
    SUCCESSFUL_TX = "SuccessfulTx"
    BIT_ERROR_ACTIVE = "BitErrorActive"
    BIT_ERROR_PASSIVE = "BitErrorPassive"


class EventKind(str, enum.Enum):
    TX_SUCCESS = "TxSuccess"
    TX_ERROR = "TxError"
    ARBITRATION_LOSS = "ArbitrationLoss"
    IDLE = "Idle"


@dataclass(frozen=True, order=True)
class MessageId:
    """11-bit standard identifier. Smaller raw value wins arbitration."""

    raw: int

    def __post_init__(self):
        if not 0 <= self.raw <= MAX_ID:
            raise ValueError(f"CAN id {self.raw:#x} outside 11-bit range")

    def __int__(self):
        return self.raw

    def __str__(self):
        return f"{self.raw:#05x}"


@dataclass(frozen=True)
class Frame:
    id: int
    dlc: int = 8
    payload: bytes = b""
    source: str = ""
    release_time: float = 0.0
    # (task name, instance) of the job that produced the frame; None for
    # frames not tied to a scheduled job (background traffic, attacker).
    tag: tuple[str, int] | None = None

    def __post_init__(self):
        MessageId(int(self.id))
        if not 0 <= self.dlc <= 8:
            raise ValueError(f"dlc {self.dlc} outside [0, 8]")
        if not self.payload and self.dlc:
            object.__setattr__(self, "payload", bytes([0xAA] * self.dlc))
        if len(self.payload) != self.dlc:
            raise ValueError(f"payload length {len(self.payload)} != dlc {self.dlc}")

    @property
    def payload_value(self) -> int:
        return int.from_bytes(self.payload, "big") if self.payload else 0


@dataclass(frozen=True)
class NodeState:
    tec: int = 0
    rec: int = 0

    def __post_init__(self):
        if self.tec < 0 or self.rec < 0:
            raise ValueError("error counters are non-negative")

    @property
    def mode(self) -> Mode:
        if self.tec > BUS_OFF_THRESHOLD or self.rec > BUS_OFF_THRESHOLD:
            return Mode.BUS_OFF
        if self.tec > PASSIVE_THRESHOLD or self.rec > PASSIVE_THRESHOLD:
            return Mode.ERROR_PASSIVE
        return Mode.ERROR_ACTIVE

    @property
    def bus_off(self) -> bool:
        return self.mode is Mode.BUS_OFF

    def tx_error(self) -> NodeState:
        return replace(self, tec=self.tec + 8)

    def tx_success(self) -> NodeState:
        return replace(self, tec=max(self.tec - 1, 0))

    def rx_error(self) -> NodeState:
        return replace(self, rec=self.rec + 1)

    def rx_success(self) -> NodeState:
        return replace(self, rec=max(self.rec - 1, 0))


def frame_bits(dlc: int) -> int:
    """Worst-case frame length in bits for a standard data frame.

    47 bits of fixed fields (SOF, id, control, CRC, ACK, EOF and the
    3-bit intermission) plus the data field plus worst-case stuff bits
    over the 34 + 8*dlc stuffable bits.
    """
    return 47 + 8 * dlc + (34 + 8 * dlc - 1) // 4


def frame_time(frame: Frame | int, bitrate: float) -> float:
    """Transmission time in microseconds. Accepts a Frame or a bare dlc."""
    if bitrate <= 0:
        raise ValueError("bitrate must be positive")
    dlc = frame.dlc if isinstance(frame, Frame) else int(frame)
    return frame_bits(dlc) * 1e6 / bitrate


@dataclass(frozen=True)
class Arbitration:
    winner: Frame
    # every frame carrying the winning id from a distinct source, winner
    # included; more than one entry means a data-field collision
    contenders: tuple[Frame, ...]
    losers: tuple[Frame, ...]

    @property
    def collision(self) -> bool:
        return len(self.contenders) > 1


def _frame_order(frame: Frame, source_index: Mapping[str, int]):
    return (frame.id, frame.release_time, source_index.get(frame.source, len(source_index)), frame.payload_value)


def arbitrate(pending: Iterable[Frame], source_order: Sequence[str] = ()) -> Arbitration:
    """Resolve bus contention among frames that are all ready to send.

    Each source offers its own highest-priority frame; the numerically
    smallest id wins. Distinct sources offering the same id all survive
    the arbitration field and collide in the data field.
    """
    index = {s: i for i, s in enumerate(source_order)}
    offered: dict[str, Frame] = {}
    for f in pending:
        cur = offered.get(f.source)
        if cur is None or _frame_order(f, index) < _frame_order(cur, index):
            offered[f.source] = f
    if not offered:
        raise ValueError("arbitrate() needs at least one pending frame")
    ranked = sorted(offered.values(), key=lambda f: _frame_order(f, index))
    best = ranked[0].id
    contenders = tuple(f for f in ranked if f.id == best)
    # the dominant (smallest) payload survives the data-field conflict
    winner = min(contenders, key=lambda f: (f.payload_value, _frame_order(f, index)))
    losers = tuple(f for f in ranked if f.id != best)
    return Arbitration(winner, contenders, losers)


def update_error_counters(
    tx_nodes: Sequence[NodeState],
    rx_nodes: Sequence[NodeState],
    outcome: Outcome,
) -> tuple[list[NodeState], list[NodeState]]:
    """Apply one bus outcome to the transmitter(s) and the receivers.

    For ``BIT_ERROR_PASSIVE`` the first transmitter is the victim (the one
    whose recessive payload bit was overwritten, now error passive) and the
    second the node whose frame completed. The victim takes +8 for the error
    and -1 for its following successful retransmission unless the error
    already drove it bus-off.
    """
    tx = list(tx_nodes)
    rx = list(rx_nodes)
    if any(n.bus_off for n in tx):
        raise ValueError("bus-off nodes do not transmit")
    if outcome is Outcome.SUCCESSFUL_TX:
        tx = [n.tx_success() for n in tx]
        rx = [n.rx_success() for n in rx]
    elif outcome is Outcome.BIT_ERROR_ACTIVE:
        tx = [n.tx_error() for n in tx]
        rx = [n.rx_error() for n in rx]
    elif outcome is Outcome.BIT_ERROR_PASSIVE:
        if len(tx) < 2:
            raise ValueError("a passive collision needs the victim and the completing transmitter")
        victim = tx[0].tx_error()
        if not victim.bus_off:
            victim = victim.tx_success()
        tx = [victim] + [n.tx_success() for n in tx[1:]]
        # two valid frames reach the receivers: the completed one and the retransmission
        rx = [n.rx_success().rx_success() for n in rx]
    else:  # pragma: no cover
        raise ValueError(outcome)
    return tx, rx


@dataclass(frozen=True)
class BusEvent:
    time: float
    kind: EventKind
    frame: Frame | None = None
    end: float = 0.0
    source: str = ""
    tec_after: int = 0
    mode_after: Mode = Mode.ERROR_ACTIVE
    passive_flag: bool = False
    # for TxSuccess/TxError: sources that lost arbitration at this instant;
    # for ArbitrationLoss: the winning source
    other: tuple[str, ...] = ()

    @property
    def id(self) -> int | None:
        return None if self.frame is None else self.frame.id


@dataclass
class BusTrace:
    events: list[BusEvent]
    horizon: float
    bitrate: float
    start: float = 0.0
    unsent: list[Frame] = field(default_factory=list)

    def transmissions(self) -> list[BusEvent]:
        """Successful transmissions in bus order; these are the ASP slots."""
        return [e for e in self.events if e.kind is EventKind.TX_SUCCESS]

    def window(self, t0: float, t1: float) -> BusTrace:
        evs = [e for e in self.events if t0 <= e.time < t1]
        return BusTrace(evs, t1 - t0, self.bitrate, start=t0)

    def busy_time(self) -> float:
        return sum(e.end - e.time for e in self.events if e.kind in (EventKind.TX_SUCCESS, EventKind.TX_ERROR)
                   and not (e.kind is EventKind.TX_SUCCESS and e.passive_flag))

    def utilization(self) -> float:
        return self.busy_time() / self.horizon if self.horizon else 0.0

    def to_csv(self, fh=None) -> str:
        buf = fh if fh is not None else io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for e in self.events:
            w.writerow(_trace_row(e))
        return buf.getvalue() if fh is None else ""


def _fmt_time(t: float) -> str:
    return f"{t:.3f}"


def _trace_row(e: BusEvent) -> list:
    if e.frame is None:
        return [_fmt_time(e.time), e.kind.value, "", "", e.source, "", ""]
    return [_fmt_time(e.time), e.kind.value, f"{e.frame.id:#05x}", e.frame.dlc, e.source,
            e.tec_after, e.mode_after.value]


def read_trace_csv(fh, bitrate: float, horizon: float | None = None) -> BusTrace:
    """Rebuild a trace from the CSV export. Frame end times are recomputed."""
    events = []
    for row in csv.DictReader(fh):
        kind = EventKind(row["kind"])
        t = float(row["time_us"])
        if not row["id_hex"]:
            events.append(BusEvent(t, kind, source=row["source"], end=t))
            continue
        frame = Frame(int(row["id_hex"], 16), int(row["dlc"]), source=row["source"], release_time=t)
        end = t + frame_time(frame, bitrate) if kind in (EventKind.TX_SUCCESS, EventKind.TX_ERROR) else t
        events.append(BusEvent(t, kind, frame, end=end, source=row["source"],
                               tec_after=int(row["tec_after"] or 0),
                               mode_after=Mode(row["mode_after"] or Mode.ERROR_ACTIVE.value)))
    if horizon is None:
        horizon = max((e.end for e in events), default=0.0)
    return BusTrace(events, horizon, bitrate)


class CanBus:
    """Stateful event loop. Node error state persists across ``run_until`` calls.

    Frames become eligible at their ``release_time``. At every idle instant
    the bus arbitrates among eligible frames of nodes that are not bus-off;
    a same-id collision costs one frame time, charges the counters and
    leaves the colliding frames pending so they retry at the next idle
    instant.
    """

    def __init__(self, bitrate: float, nodes: Sequence[str] = (), record_losses: bool = True):
        if bitrate <= 0:
            raise ValueError("bitrate must be positive")
        self.bitrate = bitrate
        self.nodes: list[str] = list(nodes)
        self.states: dict[str, NodeState] = {n: NodeState() for n in self.nodes}
        self.now = 0.0
        self.events: list[BusEvent] = []
        self.record_losses = record_losses
        self._pending: list[Frame] = []
        self._seq = 0
        self.listeners: list[Callable[[BusEvent], None]] = []

    def _ensure_node(self, name: str):
        if name not in self.states:
            self.nodes.append(name)
            self.states[name] = NodeState()

    def submit(self, frames: Iterable[Frame]):
        for f in frames:
            self._ensure_node(f.source)
            self._pending.append(f)

    def withdraw(self, source: str, predicate: Callable[[Frame], bool] | None = None) -> list[Frame]:
        keep, gone = [], []
        for f in self._pending:
            (gone if f.source == source and (predicate is None or predicate(f)) else keep).append(f)
        self._pending = keep
        return gone

    @property
    def pending(self) -> list[Frame]:
        return list(self._pending)

    def mode(self, node: str) -> Mode:
        return self.states[node].mode

    def _emit(self, ev: BusEvent):
        self.events.append(ev)
        for cb in self.listeners:
            cb(ev)

    def _eligible(self) -> list[Frame]:
        return [f for f in self._pending
                if f.release_time <= self.now and not self.states[f.source].bus_off]

    def _next_release(self) -> float | None:
        times = [f.release_time for f in self._pending if not self.states[f.source].bus_off]
        return min(times) if times else None

    def run_until(self, t_end: float) -> list[BusEvent]:
        """Advance the bus; every arbitration starting before ``t_end`` completes."""
        first = len(self.events)
        while True:
            ready = self._eligible()
            if not ready:
                nxt = self._next_release()
                if nxt is None or nxt >= t_end:
                    self.now = max(self.now, t_end)
                    break
                if nxt > self.now:
                    self._emit(BusEvent(self.now, EventKind.IDLE, end=nxt))
                self.now = max(self.now, nxt)
                continue
            if self.now >= t_end:
                break
            self._transmit(arbitrate(ready, self.nodes))
        return self.events[first:]

    def _receivers(self, exclude: Iterable[str]) -> list[str]:
        ex = set(exclude)
        return [n for n in self.nodes if n not in ex and not self.states[n].bus_off]

    def _transmit(self, arb: Arbitration):
        t = self.now
        lost_sources = tuple(f.source for f in arb.losers)
        if self.record_losses:
            for f in arb.losers:
                self._emit(BusEvent(t, EventKind.ARBITRATION_LOSS, f, end=t, source=f.source,
                                    tec_after=self.states[f.source].tec,
                                    mode_after=self.states[f.source].mode,
                                    other=(arb.winner.source,)))
        if not arb.collision:
            self._success(arb.winner, t, lost_sources)
            return
        winner = arb.winner
        wpay = winner.payload_value
        # nodes whose recessive payload bits get overwritten detect a bit error
        detecting = [f for f in arb.contenders if f.payload_value != wpay]
        if not detecting:
            # identical frames: indistinguishable on the wire, all succeed
            for f in arb.contenders:
                self._success(f, t, lost_sources, silent=f is not winner)
            return
        duration = max(frame_time(f, self.bitrate) for f in arb.contenders)
        if any(self.states[f.source].mode is Mode.ERROR_ACTIVE for f in detecting):
            # active error flag destroys the frame for every transmitter
            sources = [f.source for f in arb.contenders]
            tx, rx = update_error_counters([self.states[s] for s in sources],
                                           [self.states[r] for r in self._receivers(sources)],
                                           Outcome.BIT_ERROR_ACTIVE)
            rx_names = self._receivers(sources)
            for s, st in zip(sources, tx):
                self.states[s] = st
            for r, st in zip(rx_names, rx):
                self.states[r] = st
            for f in arb.contenders:
                st = self.states[f.source]
                self._emit(BusEvent(t, EventKind.TX_ERROR, f, end=t + duration, source=f.source,
                                    tec_after=st.tec, mode_after=st.mode, other=lost_sources))
            self.now = t + duration
            return
        # passive error flags leave the dominant frame intact
        for f in detecting:
            self.states[f.source] = self.states[f.source].tx_error()
            st = self.states[f.source]
            self._emit(BusEvent(t, EventKind.TX_ERROR, f, end=t + duration, source=f.source,
                                tec_after=st.tec, mode_after=st.mode, passive_flag=True,
                                other=lost_sources))
        self._success(winner, t, lost_sources, advance_to=t + duration)

    def _success(self, f: Frame, t: float, lost_sources, silent: bool = False, advance_to: float | None = None):
        # a listener may already have withdrawn the frame that is on the wire
        if f in self._pending:
            self._pending.remove(f)
        self.states[f.source] = self.states[f.source].tx_success()
        if not silent:
            for r in self._receivers([f.source]):
                self.states[r] = self.states[r].rx_success()
        st = self.states[f.source]
        end = t + frame_time(f, self.bitrate)
        self._emit(BusEvent(t, EventKind.TX_SUCCESS, f, end=end, source=f.source,
                            tec_after=st.tec, mode_after=st.mode, other=lost_sources,
                            passive_flag=silent))
        self.now = max(self.now, end if advance_to is None else advance_to)

    def trace(self, start: float = 0.0, horizon: float | None = None) -> BusTrace:
        h = (self.now if horizon is None else horizon) - start
        evs = [e for e in self.events if e.time >= start]
        return BusTrace(evs, h, self.bitrate, start=start, unsent=list(self._pending))


def run_bus(ecu_queues: Mapping[str, Sequence[Frame]] | Iterable[Frame], horizon: float, bitrate: float,
            nodes: Sequence[str] = ()) -> BusTrace:
    """Simulate the given release streams over ``[0, horizon)``.

    Frames still pending at the horizon (including those of bus-off nodes)
    are returned in ``BusTrace.unsent``.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    streams = ecu_queues.values() if isinstance(ecu_queues, Mapping) else [ecu_queues]
    order = list(nodes) or (list(ecu_queues) if isinstance(ecu_queues, Mapping) else [])
    bus = CanBus(bitrate, order)
    for s in streams:
        s = list(s)
        if any(b.release_time < a.release_time for a, b in zip(s, s[1:])):
            raise ValueError("release streams must be time-sorted")
        bus.submit(s)
    bus.run_until(horizon)
    return bus.trace(0.0, max(horizon, bus.now))


def bus_load(frames: Iterable[Frame], horizon: float, bitrate: float) -> float:
    """Offered load: total frame time over the horizon."""
    return sum(frame_time(f, bitrate) for f in frames) / horizon


__all__ = [
    "Arbitration", "BusEvent", "BusTrace", "CanBus", "EventKind", "Frame", "MessageId", "Mode",
    "NodeState", "Outcome", "arbitrate", "bus_load", "frame_bits", "frame_time", "read_trace_csv",
    "run_bus", "update_error_counters",
]
