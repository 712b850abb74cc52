"""Domain types for dynamic resource allocation problems.

A problem instance groups identical users into types. Each type carries a
mass (how many users), a per-user access right (weight), an i.i.d. urgency
process over strictly positive levels, and per-resource rewards for
receiving / not receiving each resource. Long-run allocations are
probability tensors indexed (type, resource, urgency level).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import StructuralError

PROB_SUM_TOL = 1e-12


def _as_float_tuple(values, name: str) -> tuple:
    try:
        out = tuple(float(v) for v in values)
    except (TypeError, ValueError) as exc:
        raise StructuralError(f"{name} must be a sequence of reals") from exc
    if not out:
        raise StructuralError(f"{name} must be non-empty")
    for v in out:
        if not math.isfinite(v):
            raise StructuralError(f"{name} contains a non-finite value")
    return out


@dataclass(frozen=True)
class UrgencyProcess:
    """I.i.d. distribution over strictly positive urgency levels."""

    levels: tuple
    probs: tuple

    def __init__(self, levels: Sequence[float], probs: Sequence[float]):
        object.__setattr__(self, "levels", _as_float_tuple(levels, "levels"))
        object.__setattr__(self, "probs", _as_float_tuple(probs, "probs"))
        if len(self.levels) != len(self.probs):
            raise StructuralError("levels and probs must have the same length")
        if any(u <= 0 for u in self.levels):
            raise StructuralError("urgency levels must be strictly positive")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise StructuralError("urgency levels must be strictly increasing")
        if any(p <= 0 for p in self.probs):
            raise StructuralError("urgency probabilities must be strictly positive")
        if abs(sum(self.probs) - 1.0) > PROB_SUM_TOL:
            raise StructuralError(
                f"urgency probabilities sum to {sum(self.probs)!r}, not 1"
            )

    @property
    def mean(self) -> float:
        return float(sum(u * p for u, p in zip(self.levels, self.probs)))

    def scaled(self, alpha: float) -> "UrgencyProcess":
        """Same dynamics with all levels multiplied by ``alpha``."""
        if alpha <= 0:
            raise StructuralError("scale must be positive")
        return UrgencyProcess([u * alpha for u in self.levels], self.probs)


@dataclass(frozen=True)
class UserType:
    """A group of identical users.

    ``rewards_on[j]`` is the elementary reward for receiving resource j,
    ``rewards_off[j]`` for not receiving it. ``scale`` is optional metadata
    marking the urgency scale of symmetric-up-to-scale families.
    """

    mass: int
    weight: float
    urgency: UrgencyProcess
    rewards_on: tuple
    rewards_off: tuple
    scale: Optional[float] = None
    name: str = ""

    def __init__(self, mass, weight, urgency, rewards_on, rewards_off,
                 scale=None, name=""):
        if int(mass) != mass or mass < 1:
            raise StructuralError("mass must be a positive integer")
        if not (float(weight) > 0):
            raise StructuralError("weight must be positive")
        if not isinstance(urgency, UrgencyProcess):
            raise StructuralError("urgency must be an UrgencyProcess")
        on = _as_float_tuple(rewards_on, "rewards_on")
        off = _as_float_tuple(rewards_off, "rewards_off")
        if len(on) != len(off):
            raise StructuralError("rewards_on and rewards_off must have equal length")
        if scale is not None and not (float(scale) > 0):
            raise StructuralError("scale must be positive when given")
        object.__setattr__(self, "mass", int(mass))
        object.__setattr__(self, "weight", float(weight))
        object.__setattr__(self, "urgency", urgency)
        object.__setattr__(self, "rewards_on", on)
        object.__setattr__(self, "rewards_off", off)
        object.__setattr__(self, "scale", None if scale is None else float(scale))
        object.__setattr__(self, "name", str(name))

    @property
    def n_resources(self) -> int:
        return len(self.rewards_on)

    @property
    def n_levels(self) -> int:
        return len(self.urgency.levels)

    def desires(self, j: int) -> bool:
        """Strict desire: receiving j beats not receiving it."""
        return self.rewards_on[j] > self.rewards_off[j]


@dataclass(frozen=True)
class Problem:
    """A full dynamic resource allocation instance at type granularity."""

    capacities: tuple
    types: tuple
    mutually_exclusive: bool = False
    label: str = ""

    def __init__(self, capacities, types, mutually_exclusive=False, label=""):
        caps = tuple(capacities)
        if not caps:
            raise StructuralError("capacities must be non-empty")
        for c in caps:
            if int(c) != c or c < 1:
                raise StructuralError("capacities must be positive integers")
        tps = tuple(types)
        if not tps:
            raise StructuralError("at least one user type is required")
        for k, t in enumerate(tps):
            if not isinstance(t, UserType):
                raise StructuralError(f"types[{k}] is not a UserType")
            if t.n_resources != len(caps):
                raise StructuralError(
                    f"types[{k}] has {t.n_resources} reward entries "
                    f"but there are {len(caps)} resources"
                )
        object.__setattr__(self, "capacities", tuple(int(c) for c in caps))
        object.__setattr__(self, "types", tps)
        object.__setattr__(self, "mutually_exclusive", bool(mutually_exclusive))
        object.__setattr__(self, "label", str(label))

    @property
    def n_resources(self) -> int:
        return len(self.capacities)

    @property
    def n_types(self) -> int:
        return len(self.types)

    @property
    def n_users(self) -> int:
        return sum(t.mass for t in self.types)

    def desiring_mass(self, j: int) -> int:
        """Number of users strictly preferring resource j over its fallback."""
        return sum(t.mass for t in self.types if t.desires(j))


# ---------------------------------------------------------------------------
# Array view used by the numerical modules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemArrays:
    """Padded numpy view of a problem. Padded (type, level) cells carry
    sigma == 0 and never influence objectives, demand, or budgets."""

    n_types: int
    m: int
    qmax: int
    mass: np.ndarray        # (n_types,)
    weight: np.ndarray      # (n_types,) per-user access right
    q: np.ndarray           # (n_types,) number of levels per type
    sigma: np.ndarray       # (n_types, qmax), zero padded
    u: np.ndarray           # (n_types, qmax), zero padded
    delta: np.ndarray       # (n_types, m) reward improvements r - r0
    cap: np.ndarray         # (m,)
    me: bool
    valid: np.ndarray       # (n_types, qmax) bool

    @property
    def total_weight(self) -> float:
        return float(np.dot(self.mass, self.weight))


def as_arrays(problem: Problem) -> ProblemArrays:
    nT = problem.n_types
    m = problem.n_resources
    qmax = max(t.n_levels for t in problem.types)
    mass = np.array([t.mass for t in problem.types], dtype=np.float64)
    weight = np.array([t.weight for t in problem.types], dtype=np.float64)
    q = np.array([t.n_levels for t in problem.types], dtype=np.int64)
    sigma = np.zeros((nT, qmax))
    u = np.zeros((nT, qmax))
    delta = np.zeros((nT, m))
    for i, t in enumerate(problem.types):
        sigma[i, : t.n_levels] = t.urgency.probs
        u[i, : t.n_levels] = t.urgency.levels
        delta[i] = np.asarray(t.rewards_on) - np.asarray(t.rewards_off)
    cap = np.array(problem.capacities, dtype=np.float64)
    valid = np.arange(qmax)[None, :] < q[:, None]
    return ProblemArrays(nT, m, qmax, mass, weight, q, sigma, u, delta, cap,
                         problem.mutually_exclusive, valid)


# ---------------------------------------------------------------------------
# Long-run allocations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LongRunAllocation:
    """Probability tensor chi[type, resource, level] of receiving each
    resource per urgency level. Padded levels must stay at zero."""

    chi: np.ndarray

    def __init__(self, chi: np.ndarray):
        arr = np.array(chi, dtype=np.float64)
        if arr.ndim != 3:
            raise StructuralError("chi must have shape (types, resources, levels)")
        if np.any(arr < -1e-12) or np.any(arr > 1 + 1e-12):
            raise StructuralError("chi entries must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "chi", arr)

    def validate_for(self, problem: Problem, tol: float = 1e-8) -> None:
        """Raise if the allocation violates the problem's feasibility set."""
        pa = as_arrays(problem)
        if self.chi.shape != (pa.n_types, pa.m, pa.qmax):
            raise StructuralError(
                f"chi shape {self.chi.shape} does not match problem "
                f"({pa.n_types}, {pa.m}, {pa.qmax})"
            )
        if np.any(np.abs(self.chi * ~pa.valid[:, None, :]) > 0):
            raise StructuralError("chi must be zero on padded urgency levels")
        excess = demand(problem, self) - pa.cap
        if np.any(excess > tol):
            j = int(np.argmax(excess))
            raise StructuralError(f"ex-ante capacity exceeded on resource {j}")
        if pa.me:
            rows = self.chi.sum(axis=1)
            if np.any(rows > 1 + tol):
                raise StructuralError("mutually exclusive row sums exceed 1")


def demand(problem: Problem, alloc: LongRunAllocation) -> np.ndarray:
    """Ex-ante demand per resource, in expected users per step."""
    pa = as_arrays(problem)
    return np.einsum("i,iu,iju->j", pa.mass, pa.sigma, alloc.chi)


def reward_improvements(problem: Problem, alloc: LongRunAllocation) -> np.ndarray:
    """Per-user expected average reward improvement over no allocation."""
    pa = as_arrays(problem)
    return np.einsum("iu,iu,iju,ij->i", pa.sigma, pa.u, alloc.chi, pa.delta)


def nash_objective(problem: Problem, alloc: LongRunAllocation) -> float:
    """Sum of mass * weight * log(improvement); -inf if any improvement <= 0."""
    pa = as_arrays(problem)
    rho = reward_improvements(problem, alloc)
    if np.any(rho <= 0):
        return -np.inf
    return float(np.dot(pa.mass * pa.weight, np.log(rho)))


# ---------------------------------------------------------------------------
# Standing-assumption validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationCheck:
    assumption: str
    ok: bool
    severity: str      # "error" | "warning" | "ok"
    message: str
    indices: tuple = ()


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return not any(c.severity == "error" for c in self.checks)

    @property
    def warnings(self) -> tuple:
        return tuple(c for c in self.checks if c.severity == "warning")

    @property
    def errors(self) -> tuple:
        return tuple(c for c in self.checks if c.severity == "error")

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            tag = "PASS" if c.ok else c.severity.upper()
            lines.append(f"[{tag}] assumption {c.assumption}: {c.message}")
        return "\n".join(lines)


def validate(problem: Problem, strict_assumption1: bool = False) -> ValidationReport:
    """Check the standing competitive-setting assumptions.

    Structural invariants (lengths, probability sums, positivity) are already
    hard construction errors; this reports on the contest assumptions:

    * 1.1 every type strictly desires at least one resource;
    * 1.2 every resource with any desiring user is contested (capacity below
      the desiring mass); a resource that no user strictly desires is flagged
      as non-contested-by-strict-inequality, which is a warning because the
      running example deliberately exhibits it.
    """
    checks = []

    lazy = tuple(i for i, t in enumerate(problem.types)
                 if not any(t.desires(j) for j in range(problem.n_resources)))
    if lazy:
        checks.append(ValidationCheck(
            "1.1", False, "error",
            "some types strictly desire no resource", lazy))
    else:
        checks.append(ValidationCheck(
            "1.1", True, "ok", "every type strictly desires a resource"))

    uncontested = []
    undesired = []
    for j in range(problem.n_resources):
        nj = problem.desiring_mass(j)
        if nj == 0:
            undesired.append(j)
        elif problem.capacities[j] >= nj:
            uncontested.append(j)
    if undesired:
        checks.append(ValidationCheck(
            "1.2", False, "warning",
            "resource(s) give the same reward as the fallback for every "
            "type (not contested by strict inequality)", tuple(undesired)))
    if uncontested:
        severity = "error" if strict_assumption1 else "warning"
        checks.append(ValidationCheck(
            "1.2", False, severity,
            "capacity meets or exceeds the desiring-user count "
            "('each resource is contested' violated)", tuple(uncontested)))
    if not undesired and not uncontested:
        checks.append(ValidationCheck(
            "1.2", True, "ok", "every resource is contested"))

    return ValidationReport(tuple(checks))


# ---------------------------------------------------------------------------
# Built-in scenario
# ---------------------------------------------------------------------------

def rush_hour_scenario() -> Problem:
    """Morning rush-hour priority-lane scenario.

    9000 users choose among 10 mutually exclusive departure intervals of
    capacity 180 each. Everyone prefers interval 9 and dislikes late more
    than early departures; skipping the priority lanes costs 8. Four
    equal-mass groups share a mean urgency of 2 but differ in dynamics:
    constant 2, {1,3} at 50%, {1,5} at 25%, and {1,9} at 12.5%.
    """
    m = 10
    j_star = 9
    rewards_on = tuple(
        float(-max(j_star - j, 4 * (j - j_star))) for j in range(1, m + 1)
    )
    rewards_off = tuple(-8.0 for _ in range(m))
    groups = [
        ("constant-2", UrgencyProcess([2.0], [1.0])),
        ("spike-3", UrgencyProcess([1.0, 3.0], [0.5, 0.5])),
        ("spike-5", UrgencyProcess([1.0, 5.0], [0.75, 0.25])),
        ("spike-9", UrgencyProcess([1.0, 9.0], [0.875, 0.125])),
    ]
    types = tuple(
        UserType(mass=2250, weight=1.0, urgency=proc,
                 rewards_on=rewards_on, rewards_off=rewards_off, name=name)
        for name, proc in groups
    )
    return Problem(
        capacities=(180,) * m,
        types=types,
        mutually_exclusive=True,
        label="rush-hour",
    )
