"""Bundled two-hyper-period example used by the docs and the acceptance tests.

One victim ECU runs three tasks:

=========  ======  ======  =====  =======  ===========
task       period  wcet    prio   msg id   skip limit
=========  ======  ======  =====  =======  ===========
T_hp       10 ms   0.2 ms  1      0x080    1 (control)
T_green    40 ms   0.8 ms  2      0x0F0    non-control
T_v        10 ms   1.0 ms  2      0x100    2 (control)
=========  ======  ======  =====  =======  ===========

under a static-priority table (``T_green`` and ``T_v`` tie; the name breaks
the tie so ``T_green`` runs first). A second ECU adds a few frames at fixed
offsets, different in each hyper-period, so that the four instances of
``0x100`` see windows of (0, 0, 3, 5) frames in the first hyper-period and
(1, 2, 3, 5) in the second:

* instance 1 follows an idle gap, then a low-priority frame pushes
  ``T_green``'s frame right up against it;
* instance 2 follows a low-priority frame, then ``T_hp`` plus one foreign
  frame;
* instances 3 and 4 always follow ``T_hp`` and two / four foreign frames.
"""
from __future__ import annotations

from dataclasses import dataclass

from .can import BusTrace, CanBus, Frame
from .ecu import Policy, Schedule, TaskSpec, build_schedule

MS = 1000.0
H = 40 * MS
RECON = 2
BITRATE = 250_000
VICTIM_ECU = "ECU_V"
OTHER_ECU = "ECU_O"
VICTIM_ID = 0x100

TASKS = (
    TaskSpec("T_hp", 10 * MS, 0.2 * MS, ecu_priority=1, msg_id=0x080, is_control=True, skip_limit=1),
    TaskSpec("T_green", 40 * MS, 0.8 * MS, ecu_priority=2, msg_id=0x0F0),
    TaskSpec("T_v", 10 * MS, 1.0 * MS, ecu_priority=2, msg_id=VICTIM_ID, is_control=True, skip_limit=2),
)

# (offset within the hyper-period in ms, id) of the foreign frames; both
# hyper-periods share the periodic part
_PERIODIC = [(20.5, 0x010), (20.5, 0x020)] + [(30.5, i) for i in (0x011, 0x012, 0x013, 0x014)]
_FIRST = [(10.7, 0x300)]
_SECOND = [(0.95, 0x300), (10.5, 0x0A0)]

EXPECTED_WINDOWS = ((0, 0, 3, 5), (1, 2, 3, 5))
EXPECTED_AVERAGES = (1, 1, 3, 5)


def foreign_frames(t0: float = 0.0, hyper_periods: int = RECON) -> list[Frame]:
    out = []
    for k in range(hyper_periods):
        extra = _FIRST if k % 2 == 0 else _SECOND
        for off, fid in _PERIODIC + extra:
            out.append(Frame(fid, 8, source=OTHER_ECU, release_time=t0 + k * H + off * MS))
    out.sort(key=lambda f: (f.release_time, f.id))
    return out


@dataclass
class Walkthrough:
    schedule: Schedule
    trace: BusTrace
    bus: CanBus


def schedule(t0: float = 0.0, hyper_periods: int = RECON) -> Schedule:
    return build_schedule(TASKS, hyper_periods * H, Policy.STATIC, t0=t0, ecu=VICTIM_ECU)[0]


def run(t0: float = 0.0, sched: Schedule | None = None, bus: CanBus | None = None,
        extra: list[Frame] = ()) -> Walkthrough:
    """Simulate one reconnaissance period of the example starting at ``t0``."""
    sched = sched if sched is not None else schedule(t0)
    bus = bus if bus is not None else CanBus(BITRATE, [VICTIM_ECU, OTHER_ECU])
    bus.submit(sched.frames())
    bus.submit(foreign_frames(t0))
    bus.submit(extra)
    span = RECON * H
    bus.run_until(t0 + span)
    return Walkthrough(sched, bus.trace(t0, t0 + span), bus)
