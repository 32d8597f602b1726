"""Scenario files and background traffic.

A scenario is a YAML document with a versioned header::

    format: hidenseek-scenario
    version: 1
    seed: 7
    ...

Matrices are row-major nested lists. Times in the file are milliseconds;
everything inside the package runs on microseconds.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .can import Frame, frame_time, run_bus
from .control import DEFAULT_GAMMA, PlantModel, skip_limit
from .ecu import Policy, TaskSpec, build_schedule, hyperperiod

FORMAT = "hidenseek-scenario"
SCHEMA_VERSION = 1
MS = 1000.0
BUSLOAD_TOL = 0.03
DEFENSE_MODES = ("off", "hns", "randomize")


class ScenarioError(ValueError):
    """Schema violation; carries the offending field path and source line when known."""

    def __init__(self, msg: str, path: str = "", line: int | None = None):
        where = path + (f" (line {line})" if line is not None else "")
        super().__init__(f"{where}: {msg}" if where else msg)
        self.path = path
        self.line = line


class InfeasibleBusload(ScenarioError):
    pass


@dataclass(frozen=True)
class AttackerSpec:
    enabled: bool = True
    victim: int = 0xC4
    start_cycle: int = 1
    campaign: str = "best"


@dataclass(frozen=True)
class EcuSpec:
    name: str
    tasks: tuple[TaskSpec, ...]
    aperiodic: tuple[int, ...] = ()
    plants: dict = field(default_factory=dict, compare=False)  # task name -> plant key

    @property
    def h(self) -> int:
        return hyperperiod(self.tasks)


@dataclass
class Scenario:
    name: str
    seed: int
    bitrate: float
    recon: int
    cycles: int
    busload: float
    jitter_us: float
    policy: Policy
    gamma: float
    defense: str
    attacker: AttackerSpec
    ecus: list[EcuSpec]
    plants: dict[str, PlantModel]
    defended: tuple[str, ...]
    raw: dict = field(default_factory=dict, repr=False)
    source: str = ""

    @property
    def H(self) -> int:
        return hyperperiod([t for e in self.ecus for t in e.tasks])

    @property
    def period_span(self) -> float:
        return self.recon * self.H

    @property
    def horizon(self) -> float:
        return self.cycles * self.period_span

    def tasks(self) -> list[TaskSpec]:
        return [t for e in self.ecus for t in e.tasks]

    def ecu(self, name: str) -> EcuSpec:
        for e in self.ecus:
            if e.name == name:
                return e
        raise KeyError(name)

    def owner(self, msg_id: int) -> tuple[EcuSpec, TaskSpec]:
        for e in self.ecus:
            for t in e.tasks:
                if t.msg_id == msg_id:
                    return e, t
        raise KeyError(f"no task sends {msg_id:#x}")

    def with_overrides(self, **kw) -> Scenario:
        raw = copy.deepcopy(self.raw)
        for k, v in kw.items():
            if v is None:
                continue
            if k == "attacker_enabled":
                raw.setdefault("attacker", {})["enabled"] = v
            else:
                raw[k] = v
        return parse_scenario(raw, self.source)

    def echo(self) -> dict:
        """Fully resolved scenario (defaults applied) for the run manifest."""
        return {
            "format": FORMAT, "version": SCHEMA_VERSION, "name": self.name, "seed": self.seed,
            "bitrate": self.bitrate, "recon": self.recon, "cycles": self.cycles, "busload": self.busload,
            "jitter_us": self.jitter_us, "policy": self.policy.value, "gamma": self.gamma,
            "defense": self.defense, "defended_ecus": list(self.defended),
            "attacker": {"enabled": self.attacker.enabled, "victim": f"{self.attacker.victim:#x}",
                         "start_cycle": self.attacker.start_cycle, "campaign": self.attacker.campaign},
            "hyper_period_us": self.H,
            "ecus": [{"name": e.name, "hyper_period_us": e.h, "aperiodic": [f"{i:#x}" for i in e.aperiodic],
                      "tasks": [{"name": t.name, "period_us": t.period, "wcet_us": t.wcet,
                                 "priority": t.ecu_priority,
                                 "id": None if t.msg_id is None else f"{t.msg_id:#x}",
                                 "dlc": t.dlc, "control": t.is_control, "skip_limit": t.skip_limit,
                                 "plant": e.plants.get(t.name)} for t in e.tasks]}
                     for e in self.ecus],
        }


class _Lines:
    """Field path -> source line, from the YAML node tree."""

    def __init__(self, text: str | None):
        self.lines: dict[str, int] = {}
        if text:
            try:
                self._walk(yaml.compose(text), "")
            except yaml.YAMLError:
                pass

    def _walk(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                self._walk(v, f"{path}.{k.value}" if path else str(k.value))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, f"{path}[{i}]")

    def __call__(self, path: str) -> int | None:
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path.rsplit(".", 1)[0] if "." in path else ""
        return None


def _get(d: dict, key: str, path: str, lines: _Lines, typ=None, default=Ellipsis):
    full = f"{path}.{key}" if path else key
    if key not in d:
        if default is Ellipsis:
            raise ScenarioError("required field missing", full, lines(path))
        return default
    v = d[key]
    if typ is not None:
        ok = isinstance(v, typ) and not (typ in (int, float, (int, float)) and isinstance(v, bool))
        if not ok:
            raise ScenarioError(f"expected {getattr(typ, '__name__', typ)}, got {v!r}", full, lines(full))
    return v


def _matrix(v, path, lines) -> np.ndarray:
    try:
        m = np.array(v, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError("matrix must be a row-major list of numeric rows", path, lines(path)) from None
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or not np.isfinite(m).all():
        raise ScenarioError("matrix must be a finite 2-D list", path, lines(path))
    return m


def parse_scenario(raw: dict, source: str = "", text: str | None = None) -> Scenario:
    lines = _Lines(text)
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a mapping")
    if raw.get("format") != FORMAT:
        raise ScenarioError(f"header must declare format: {FORMAT}", "format", lines("format"))
    if raw.get("version") != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported version {raw.get('version')!r}", "version", lines("version"))
    seed = _get(raw, "seed", "", lines, int)
    bitrate = float(_get(raw, "bitrate", "", lines, (int, float), 250_000))
    if bitrate <= 0:
        raise ScenarioError("must be positive", "bitrate", lines("bitrate"))
    recon = _get(raw, "recon", "", lines, int, 3)
    cycles = _get(raw, "cycles", "", lines, int, 4)
    if recon < 1 or cycles < 1:
        raise ScenarioError("recon and cycles must be >= 1", "recon", lines("recon"))
    busload = float(_get(raw, "busload", "", lines, (int, float)))
    if not 0 < busload < 1:
        raise ScenarioError(f"busload {busload} outside (0, 1)", "busload", lines("busload"))
    jitter = float(_get(raw, "jitter_us", "", lines, (int, float), 0.0))
    if jitter < 0:
        raise ScenarioError("must be >= 0", "jitter_us", lines("jitter_us"))
    try:
        policy = Policy(_get(raw, "policy", "", lines, str, "edf"))
    except ValueError:
        raise ScenarioError("policy is 'edf' or 'static'", "policy", lines("policy")) from None
    gamma = float(_get(raw, "gamma", "", lines, (int, float), DEFAULT_GAMMA))
    if not 0 < gamma < 1:
        raise ScenarioError("gamma must lie in (0, 1)", "gamma", lines("gamma"))
    defense = _get(raw, "defense", "", lines, str, "hns")
    if defense not in DEFENSE_MODES:
        raise ScenarioError(f"defense must be one of {DEFENSE_MODES}", "defense", lines("defense"))

    plants = {}
    for name, spec in (_get(raw, "plants", "", lines, dict, {}) or {}).items():
        p = f"plants.{name}"
        if not isinstance(spec, dict):
            raise ScenarioError("plant must be a mapping of A, B, C, K, L", p, lines(p))
        mats = {m: _matrix(_get(spec, m, p, lines), f"{p}.{m}", lines) for m in "ABCKL"}
        try:
            plants[name] = PlantModel(**mats)
        except ValueError as exc:
            raise ScenarioError(str(exc), p, lines(p)) from None

    ecus = []
    raw_ecus = _get(raw, "ecus", "", lines, list)
    if not raw_ecus:
        raise ScenarioError("at least one ECU required", "ecus", lines("ecus"))
    limits: dict[str, int] = {}
    for ei, e in enumerate(raw_ecus):
        p = f"ecus[{ei}]"
        ename = _get(e, "name", p, lines, str)
        tasks = []
        tplants = {}
        for ti, t in enumerate(_get(e, "tasks", p, lines, list)):
            tp = f"{p}.tasks[{ti}]"
            plant = t.get("plant")
            if plant is not None and plant not in plants:
                raise ScenarioError(f"unknown plant {plant!r}", f"{tp}.plant", lines(f"{tp}.plant"))
            if plant is not None and plant not in limits:
                limits[plant] = skip_limit(plants[plant], gamma)
            try:
                task = TaskSpec(
                    name=_get(t, "name", tp, lines, str),
                    period=float(_get(t, "period_ms", tp, lines, (int, float))) * MS,
                    wcet=float(_get(t, "wcet_ms", tp, lines, (int, float))) * MS,
                    ecu_priority=_get(t, "priority", tp, lines, int, 0),
                    msg_id=_get(t, "id", tp, lines, int, None),
                    is_control=plant is not None,
                    skip_limit=limits.get(plant, 0) if plant is not None else 0,
                    dlc=_get(t, "dlc", tp, lines, int, 8),
                )
            except ValueError as exc:
                if isinstance(exc, ScenarioError):
                    raise
                raise ScenarioError(str(exc), tp, lines(tp)) from None
            if plant is not None:
                tplants[task.name] = plant
            tasks.append(task)
        aper = tuple(_get(e, "aperiodic", p, lines, list, []))
        ecus.append(EcuSpec(ename, tuple(tasks), aper, tplants))
    ids = [t.msg_id for e in ecus for t in e.tasks if t.msg_id is not None] + [i for e in ecus for i in e.aperiodic]
    if len(ids) != len(set(ids)):
        raise ScenarioError("message ids must be unique", "ecus", lines("ecus"))

    a = _get(raw, "attacker", "", lines, dict, {}) or {}
    attacker = AttackerSpec(
        enabled=bool(a.get("enabled", True)),
        victim=int(a.get("victim", 0xC4)),
        start_cycle=int(a.get("start_cycle", 1)),
        campaign=str(a.get("campaign", "best")),
    )
    sc = Scenario(str(raw.get("name", Path(source).stem if source else "scenario")), seed, bitrate, recon,
                  cycles, busload, jitter, policy, gamma, defense, attacker, ecus, plants,
                  tuple(raw.get("defended_ecus", [e.name for e in ecus])), copy.deepcopy(raw), source)
    try:
        H = sc.H
        for e in ecus:
            if H % e.h:
                raise ScenarioError(f"ECU hyper-period {e.h} does not divide {H}", "ecus", lines("ecus"))
    except (ValueError, OverflowError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc), "ecus", lines("ecus")) from None
    if attacker.enabled:
        try:
            _, vt = sc.owner(attacker.victim)
        except KeyError:
            raise ScenarioError(f"victim {attacker.victim:#x} is not sent by any task", "attacker.victim",
                                lines("attacker.victim")) from None
        if not vt.is_control:
            raise ScenarioError("victim must be a control message", "attacker.victim", lines("attacker.victim"))
    if attacker.campaign not in ("best", "all"):
        raise ScenarioError("campaign is 'best' or 'all'", "attacker.campaign", lines("attacker.campaign"))
    for d in sc.defended:
        if d not in [e.name for e in ecus]:
            raise ScenarioError(f"unknown ECU {d!r}", "defended_ecus", lines("defended_ecus"))
    return sc


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"invalid YAML: {getattr(exc, 'problem', exc)}", "",
                            None if mark is None else mark.line + 1) from None
    return parse_scenario(raw, str(path), text)


def bundled(name: str = "table1.scn") -> Path:
    return Path(str(resources.files("hidenseek") / "data" / name))


def periodic_frames(sc: Scenario, t0: float = 0.0, horizon: float | None = None) -> dict[str, list[Frame]]:
    """Unobfuscated periodic releases of every ECU over ``[t0, t0 + horizon)``."""
    horizon = sc.horizon if horizon is None else horizon
    out = {}
    for e in sc.ecus:
        sched, _ = build_schedule(e.tasks, horizon, sc.policy, t0=t0, ecu=e.name)
        out[e.name] = sched.frames()
    return out


def periodic_load(sc: Scenario) -> float:
    H = sc.H
    return sum(frame_time(t.dlc, sc.bitrate) * (H / t.period) for t in sc.tasks() if t.msg_id is not None) / H


def _poisson(rng: np.random.Generator, rate: float, horizon: float, pool: Sequence[tuple[str, int]],
             bitrate: float) -> list[Frame]:
    if rate <= 0 or not pool:
        return []
    n = rng.poisson(rate * horizon)
    times = np.sort(rng.uniform(0.0, horizon, n))
    picks = rng.integers(0, len(pool), n)
    payloads = rng.integers(0, 256, (n, 8), dtype=np.uint8)
    return [Frame(pool[p][1], 8, bytes(payloads[i]), pool[p][0], float(t))
            for i, (t, p) in enumerate(zip(times, picks))]


def gen_traffic(sc: Scenario, busload: float | None = None, seed: int | None = None,
                max_rounds: int = 6) -> dict[str, list[Frame]]:
    """Seeded Poisson aperiodic frames topping the periodic load up to the target busload.

    The arrival rate is corrected from the simulated utilization until it
    lands within three percentage points of the target.
    """
    target = sc.busload if busload is None else busload
    seed = sc.seed if seed is None else seed
    base = periodic_load(sc)
    if base > target + BUSLOAD_TOL:
        raise InfeasibleBusload(f"periodic load {base:.3f} alone exceeds the target {target:.3f}", "busload")
    pool = [(e.name, i) for e in sc.ecus for i in e.aperiodic]
    horizon = sc.horizon
    per_frame = frame_time(8, sc.bitrate)
    periodic = periodic_frames(sc)
    want = max(target - base, 0.0)
    rate = want / per_frame
    streams: dict[str, list[Frame]] = {e.name: [] for e in sc.ecus}
    for _ in range(max_rounds):
        # the same seed every round; only the rate changes
        rng = np.random.default_rng([seed, 0xB6])
        frames = _poisson(rng, rate, horizon, pool, sc.bitrate)
        streams = {e.name: [f for f in frames if f.source == e.name] for e in sc.ecus}
        merged = {n: sorted(periodic[n] + streams[n], key=lambda f: f.release_time) for n in periodic}
        got = run_bus(merged, horizon, sc.bitrate).window(0.0, horizon).utilization()
        if abs(got - target) <= BUSLOAD_TOL / 2 or want == 0:
            break
        extra = got - base
        rate = rate * want / extra if extra > 1e-9 else rate + (target - got) / per_frame
    return streams


def measured_busload(sc: Scenario, background: dict[str, Iterable[Frame]]) -> float:
    periodic = periodic_frames(sc)
    merged = {n: sorted(list(periodic[n]) + list(background.get(n, [])), key=lambda f: f.release_time)
              for n in periodic}
    return run_bus(merged, sc.horizon, sc.bitrate).window(0.0, sc.horizon).utilization()


__all__ = ["AttackerSpec", "EcuSpec", "InfeasibleBusload", "Scenario", "ScenarioError", "bundled",
           "gen_traffic", "load_scenario", "measured_busload", "parse_scenario", "periodic_load"]
