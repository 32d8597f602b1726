"""Closed-loop dynamics under control-execution skips.

The augmented state stacks the plant state on the estimator state. An
executed control iteration advances it with ``A1``; a skipped one with
``A0`` (estimate frozen, last input reused). A run ``1 0^(i-1)`` induces
the subsequence matrix ``M_i = A0^(i-1) A1``.

Stability under arbitrary switching among subsequences is certified with a
single quadratic Lyapunov function ``V(X) = X' P X``, searched for by
alternating projections.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as la

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.95
DEFAULT_BUDGET = 10_000
PD_REL_TOL = 1e-8
# rounds without a 0.1% drop in the worst violation before giving up
STALL_ROUNDS = 500


class UnstableBaseline(Exception):
    """Even the always-execute loop misses the requested decay rate."""


@dataclass(frozen=True, eq=False)
class PlantModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    K: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        for name in "ABCKL":
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        n = self.A.shape[0]
        m = self.B.shape[1]
        p = self.C.shape[0]
        expected = {"A": (n, n), "B": (n, m), "C": (p, n), "K": (m, n), "L": (n, p)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def A1(self) -> np.ndarray:
        A, B, C, K, L = self.A, self.B, self.C, self.K, self.L
        return np.block([[A, B @ K], [L @ C, A - L @ C + B @ K]])

    @property
    def A0(self) -> np.ndarray:
        n = self.n
        return np.block([[self.A, self.B @ self.K], [np.zeros((n, n)), np.eye(n)]])

    def subseq(self, i: int) -> np.ndarray:
        """Transition matrix of the subsequence 1 0^(i-1)."""
        if i < 1:
            raise ValueError("subsequence length starts at 1")
        return np.linalg.matrix_power(self.A0, i - 1) @ self.A1

    def key(self) -> bytes:
        return b"".join(np.ascontiguousarray(getattr(self, k)).tobytes() + str(getattr(self, k).shape).encode()
                        for k in "ABCKL")


@dataclass(frozen=True)
class Css:
    """Control skipping sequence: 1 = executed iteration, 0 = skipped."""

    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError("CSS bits are 0 or 1")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def parse(cls, s: str | Iterable[int]) -> Css:
        return cls(tuple(int(c) for c in s))

    def __len__(self):
        return len(self.bits)

    def __str__(self):
        return "".join(map(str, self.bits))

    def max_zero_run(self) -> int:
        best = run = 0
        for b in self.bits:
            run = run + 1 if b == 0 else 0
            best = max(best, run)
        return best

    def subsequences(self) -> list[int]:
        """Lengths of the 1 0^(i-1) blocks; requires a leading 1."""
        if not self.bits or self.bits[0] != 1:
            raise ValueError("a CSS decomposes into subsequences only if it starts with 1")
        out = []
        for b in self.bits:
            if b == 1:
                out.append(1)
            else:
                out[-1] += 1
        return out

    def validate(self, skip_limit: int):
        if not self.bits or self.bits[0] != 1:
            raise ValueError("CSS must start with an executed iteration")
        if self.max_zero_run() > skip_limit:
            raise ValueError(f"CSS {self} has {self.max_zero_run()} consecutive skips > limit {skip_limit}")


@dataclass
class SubseqDynamics:
    i: int
    M: np.ndarray
    P: np.ndarray | None = None
    gamma: float = DEFAULT_GAMMA
    # V(M X) <= (1 + alpha) V(X); mu = 1 with a shared P
    alpha: float | None = None
    mu: float = 1.0

    @classmethod
    def of(cls, plant: PlantModel, i: int, gamma: float = DEFAULT_GAMMA) -> SubseqDynamics:
        return cls(i, plant.subseq(i), gamma=gamma)


def step(plant: PlantModel, X: np.ndarray, executed: bool) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape != (2 * plant.n,):
        raise ValueError(f"augmented state must have length {2 * plant.n}")
    return (plant.A1 if executed else plant.A0) @ X


def simulate_css(plant: PlantModel, css: Css | str, X0) -> list[np.ndarray]:
    css = css if isinstance(css, Css) else Css.parse(css)
    if not len(css):
        raise ValueError("empty CSS")
    traj = [np.asarray(X0, dtype=float)]
    for b in css.bits:
        traj.append(step(plant, traj[-1], bool(b)))
    return traj


def _sym(P):
    return (P + P.T) / 2


def _pd_ok(P: np.ndarray) -> bool:
    n = P.shape[0]
    w = np.linalg.eigvalsh(_sym(P))
    return w.min() > PD_REL_TOL * np.trace(P) / n


def clf_violation(P: np.ndarray, M: np.ndarray, rate: float) -> float:
    """Largest eigenvalue of M'PM - rate^2 P, relative to trace(P)/dim."""
    n = P.shape[0]
    Q = _sym(M.T @ P @ M - rate ** 2 * P)
    return float(np.linalg.eigvalsh(Q).max() / (np.trace(P) / n))


def check_clf(P: np.ndarray, mats: Sequence[np.ndarray], gamma: float,
              lengths: Sequence[int] | None = None) -> bool:
    """Definitional check: P > 0 and M_i' P M_i - rate_i^2 P < 0 for every i.

    ``rate_i`` is ``gamma`` when ``lengths`` is None and ``gamma**len_i``
    otherwise.
    """
    if not _pd_ok(P):
        return False
    n = P.shape[0]
    tol = PD_REL_TOL * np.trace(P) / n
    for k, M in enumerate(mats):
        rate = gamma if lengths is None else gamma ** lengths[k]
        if np.linalg.eigvalsh(_sym(M.T @ P @ M - rate ** 2 * P)).max() >= -tol:
            return False
    return True


@dataclass
class ClfResult:
    feasible: bool
    P: np.ndarray | None = None
    iterations: int = 0
    reason: str = ""
    subseqs: list[SubseqDynamics] = field(default_factory=list)

    def __bool__(self):
        return self.feasible

    @property
    def condition(self) -> float:
        """M constant of the GUES envelope implied by P: sqrt(cond(P))."""
        if self.P is None:
            return float("inf")
        w = np.linalg.eigvalsh(_sym(self.P))
        return float(np.sqrt(w.max() / w.min()))


def _lyap_start(mats, rates):
    n = mats[0].shape[0]
    P = np.zeros((n, n))
    for M, r in zip(mats, rates):
        S = M / r
        if max(abs(np.linalg.eigvals(S))) < 1:
            X = la.solve_discrete_lyapunov(S.T, np.eye(n))
            P += X / np.trace(X)
    if not P.any():
        P = np.eye(n)
    return _sym(P) * n / np.trace(P)


def find_clf(subseqs: Sequence[SubseqDynamics | np.ndarray], gamma: float = DEFAULT_GAMMA,
             budget: int = DEFAULT_BUDGET, per_step: bool = True, margin: float = 1e-3) -> ClfResult:
    """Search for one P certifying every subsequence matrix.

    With ``per_step`` the length-i subsequence must contract V by
    ``gamma**(2i)`` (gamma per sampling step); otherwise by ``gamma**2``
    per subsequence. Either way a returned P satisfies
    ``M_i' P M_i - gamma^2 P < 0``.

    The search alternates between projecting onto the half-space cut out by
    the most violated eigenvector of each LMI and projecting onto
    ``{P : lambda_min(P) >= margin * trace(P)/n}``; ``trace(P)`` is held at
    n. Running out of ``budget`` rounds is reported as infeasible.
    """
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    items = [s if isinstance(s, SubseqDynamics) else SubseqDynamics(k + 1, np.asarray(s, float), gamma=gamma)
             for k, s in enumerate(subseqs)]
    if not items:
        raise ValueError("no subsequences given")
    mats = [np.asarray(s.M, dtype=float) for s in items]
    n = mats[0].shape[0]
    for M in mats:
        if M.ndim != 2 or M.shape != (n, n):
            raise ValueError(f"subsequence matrices must all be {n}x{n}, got {M.shape}")
    lengths = [s.i for s in items] if per_step else [1] * len(items)
    rates = [gamma ** l for l in lengths]

    # necessary condition: V contracts by rate^2 only if rho(M) < rate, and
    # the same holds for every product of two certified matrices
    for a, (Ma, ra) in enumerate(zip(mats, rates)):
        for b in range(a, len(mats)):
            prod = mats[b] @ Ma if b != a else Ma
            r = ra * rates[b] if b != a else ra
            rho = max(abs(np.linalg.eigvals(prod)))
            if rho >= r:
                what = f"subsequence {items[a].i}" if a == b else f"product {items[b].i}*{items[a].i}"
                return ClfResult(False, reason=f"{what}: spectral radius {rho:.4f} >= {r:.4f}", subseqs=items)

    P = _lyap_start(mats, rates)
    check_lengths = lengths if per_step else None
    best, best_at = np.inf, 0
    it = 0
    for it in range(1, budget + 1):
        if check_clf(P, mats, gamma, check_lengths):
            break
        worst = 0.0
        for M, r in zip(mats, rates):
            Q = _sym(M.T @ P @ M - r ** 2 * P)
            w, V = np.linalg.eigh(Q)
            if w[-1] < -margin:
                continue
            worst = max(worst, w[-1] + margin)
            v = V[:, -1]
            Mv = M @ v
            # half-space <G, P> >= margin with G = r^2 vv' - (Mv)(Mv)'
            G = r ** 2 * np.outer(v, v) - np.outer(Mv, Mv)
            gap = margin - float(np.sum(G * P))
            if gap > 0:
                P = P + gap / float(np.sum(G * G)) * G
        w, V = np.linalg.eigh(_sym(P))
        P = (V * np.maximum(w, margin)) @ V.T
        P = _sym(P) * n / np.trace(P)
        if worst < best * (1 - 1e-3):
            best, best_at = worst, it
        elif it - best_at > STALL_ROUNDS:
            log.debug("CLF search stalled at violation %.3g after %d rounds", worst, it)
            break
    if check_clf(P, mats, gamma, lengths if per_step else None) and check_clf(P, mats, gamma):
        for s, M, r in zip(items, mats, rates):
            s.P = P
            s.gamma = gamma
            s.alpha = r ** 2 - 1
        return ClfResult(True, P, it, "", items)
    return ClfResult(False, None, it, f"no certificate within {budget} rounds", items)


_SKIP_CACHE: dict[tuple, tuple[int, ClfResult]] = {}


def skip_limit(plant: PlantModel, gamma: float = DEFAULT_GAMMA, i_max: int = 6,
               budget: int = DEFAULT_BUDGET) -> int:
    """Maximum number of consecutive skips with a common certificate for {1, 10, ..., 10^s}."""
    return skip_certificate(plant, gamma, i_max, budget)[0]


def skip_certificate(plant: PlantModel, gamma: float = DEFAULT_GAMMA, i_max: int = 6,
                     budget: int = DEFAULT_BUDGET) -> tuple[int, ClfResult]:
    """Skip limit plus the certificate found for the longest feasible subsequence set.

    Feasibility is monotone in the subsequence set, so the search stops at
    the first infeasible length. Results are memoized per plant.
    """
    if i_max < 1:
        raise ValueError("i_max must be at least 1")
    key = (plant.key(), float(gamma), int(i_max), int(budget))
    if key in _SKIP_CACHE:
        return _SKIP_CACHE[key]
    best = find_clf([SubseqDynamics.of(plant, 1, gamma)], gamma, budget)
    if not best:
        raise UnstableBaseline(f"closed loop not {gamma}-stable: {best.reason}")
    s = 1
    for i in range(2, i_max + 1):
        res = find_clf([SubseqDynamics.of(plant, j, gamma) for j in range(1, i + 1)], gamma, budget)
        if not res:
            break
        best, s = res, i
    _SKIP_CACHE[key] = (s - 1, best)
    return _SKIP_CACHE[key]


def verify_gues(trajectory: Sequence[np.ndarray], M: float, gamma: float, rtol: float = 1e-9) -> bool:
    """True iff ||X[k]|| <= M * gamma**k * ||X[0]|| along the whole trajectory."""
    if not len(trajectory):
        raise ValueError("empty trajectory")
    x0 = float(np.linalg.norm(trajectory[0]))
    for k, X in enumerate(trajectory):
        bound = M * gamma ** k * x0
        if np.linalg.norm(X) > bound * (1 + rtol) + 1e-300:
            return False
    return True


def gues_envelope(trajectory: Sequence[np.ndarray], M: float, gamma: float) -> list[tuple[int, float, float]]:
    """Rows (k, ||X[k]||, M gamma^k ||X[0]||) for CSV export."""
    x0 = float(np.linalg.norm(trajectory[0]))
    return [(k, float(np.linalg.norm(X)), M * gamma ** k * x0) for k, X in enumerate(trajectory)]
