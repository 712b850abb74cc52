"""Agent-based simulation of the karma mechanism.

Each step: every agent draws an urgency from its type's process, bids per
the equilibrium policy (bid the stationary clearing bid of a resource with
the equilibrium allocation probability), each resource goes to its
capacity-many highest bidders with uniform random rationing among ties at
the realized clearing bid, winners pay that clearing bid, and the total
payment is redistributed proportionally to access rights. Randomness is
counter-based: agent ``a`` at step ``t`` reads fixed positions of a Philox
stream keyed by the seed, so draws are independent of processing order and
runs are reproducible bit for bit on a given backend.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import _kernels
from .errors import SimInvariantError, StructuralError
from .ke import KarmaEquilibrium
from .model import Problem, UserType, as_arrays

SHORTFALL_RULES = ("cap", "skip")
CHUNK_STEPS = 256


@dataclass(frozen=True)
class SimConfig:
    horizon: int
    seed: int
    mean_karma: float
    policy: KarmaEquilibrium
    shortfall_rule: str = "cap"
    burn_in: Optional[int] = None
    trace_every: int = 1

    def __post_init__(self):
        if self.horizon < 1:
            raise StructuralError("horizon must be >= 1")
        if not self.mean_karma > 0:
            raise StructuralError("mean karma must be positive")
        if self.shortfall_rule not in SHORTFALL_RULES:
            raise StructuralError(f"shortfall rule must be one of {SHORTFALL_RULES}")
        if self.burn_in is not None and not (0 <= self.burn_in < self.horizon):
            raise StructuralError("burn-in must lie in [0, horizon)")
        if self.trace_every < 1:
            raise StructuralError("trace-every must be >= 1")

    @property
    def effective_burn_in(self) -> int:
        return self.horizon // 10 if self.burn_in is None else self.burn_in


@dataclass(frozen=True)
class SimState:
    karma: np.ndarray
    t: int
    seed: int


@dataclass(frozen=True)
class StepRecord:
    clearing_bids: np.ndarray
    total_payment: float
    payments: np.ndarray
    redistribution: np.ndarray
    shortfalls: int
    allocations: np.ndarray  # (types, resources, levels) win counts this step


@dataclass(frozen=True)
class SimStats:
    alloc_frequency: np.ndarray     # empirical P(allocated | type, urgency)
    intent_frequency: np.ndarray
    alloc_counts: np.ndarray
    urgency_counts: np.ndarray
    clearing_bid_trace: np.ndarray
    total_payment_trace: np.ndarray
    trace_steps: np.ndarray
    shortfall_count: int
    shortfall_rate: float
    payments_by_type: np.ndarray
    redistributions_by_type: np.ndarray
    recorded_steps: int
    horizon: int
    karma_total: float
    backend: str


def default_mean_karma(ke: KarmaEquilibrium, factor: float = 10.0) -> float:
    """Default endowment: a multiple of the largest stationary bid."""
    top = float(np.max(ke.bids)) if len(ke.bids) else 0.0
    if top <= 0:
        return 1.0
    return factor * top


def policy_bid(agent_type: UserType, urgency: float, ke: KarmaEquilibrium,
               karma_available: float, rng: np.random.Generator,
               mutually_exclusive: bool, shortfall_rule: str = "cap",
               type_index: Optional[int] = None):
    """Reference single-agent bid draw; returns (bid vector, shortfall flag).

    Mutually exclusive mode samples at most one resource from the
    allocation row; independent mode draws each resource separately. The
    batch kernels implement the same decision rule. ``type_index`` selects
    the agent's row of the policy tensor (optional when there is one type).
    """
    if shortfall_rule not in SHORTFALL_RULES:
        raise StructuralError(f"shortfall rule must be one of {SHORTFALL_RULES}")
    levels = list(agent_type.urgency.levels)
    if urgency not in levels:
        raise StructuralError("urgency is not one of the type's levels")
    u = levels.index(urgency)
    if type_index is None:
        if ke.chi.chi.shape[0] != 1:
            raise StructuralError(
                "type_index is required for multi-type policies")
        type_index = 0
    ti = type_index
    m = agent_type.n_resources
    bids = np.zeros(m)
    chi_row = ke.chi.chi[ti, :, u]
    shortfall = False
    if mutually_exclusive:
        pick = float(rng.random())
        cum = np.cumsum(chi_row)
        j = int(np.searchsorted(cum, pick, side="right"))
        if j < m:
            want = float(ke.bids[j])
            if want > karma_available:
                shortfall = True
                if shortfall_rule == "cap" and karma_available > 0:
                    bids[j] = karma_available
            else:
                bids[j] = want
    else:
        draws = rng.random(m)
        left = karma_available
        for j in range(m):
            if draws[j] >= chi_row[j]:
                continue
            want = float(ke.bids[j])
            if want > left:
                shortfall = True
                if shortfall_rule == "skip":
                    continue
                val = left
            else:
                val = want
            if val > 0 or want <= 0:
                bids[j] = val
            left -= val
    return bids, shortfall


def _agent_layout(problem: Problem):
    pa = as_arrays(problem)
    type_idx = np.concatenate([
        np.full(t.mass, i, dtype=np.int64) for i, t in enumerate(problem.types)
    ])
    share = pa.weight[type_idx] / pa.total_weight
    return pa, type_idx, share


def _policy_tables(pa, ke: KarmaEquilibrium):
    sigma_cum = np.cumsum(pa.sigma, axis=1)
    for i in range(pa.n_types):
        sigma_cum[i, int(pa.q[i]) - 1:] = 1.0
    chi = np.ascontiguousarray(ke.chi.chi)
    pick_cum = np.ascontiguousarray(np.cumsum(chi, axis=1).transpose(0, 2, 1))
    return sigma_cum, chi, pick_cum


def _uniform_block(seed: int, t0: int, steps: int, n: int, k: int) -> np.ndarray:
    """Uniforms for steps [t0, t0+steps): agent a at step t reads stream
    positions [(t*n + a)*k, (t*n + a + 1)*k) of the Philox stream keyed by
    the seed, so draws are addressable per (seed, agent, t)."""
    out = np.empty((steps, n, k))
    for s in range(steps):
        bg = np.random.Philox(key=seed)
        bg.advance((t0 + s) * n * k)
        out[s] = np.random.Generator(bg).random((n, k))
    return out


def _draws_per_agent(problem: Problem) -> int:
    m = problem.n_resources
    return 3 if problem.mutually_exclusive else 1 + 2 * m


def _run_span(problem: Problem, config: SimConfig, karma: np.ndarray,
              t0: int, steps: int, record_from: int,
              accumulators, traces) -> None:
    pa, type_idx, share = accumulators["layout"]
    sigma_cum, chi, pick_cum = accumulators["tables"]
    n = len(type_idx)
    k = _draws_per_agent(problem)
    kbar_target = config.mean_karma * n
    bstar = np.asarray(config.policy.bids, dtype=np.float64)
    cap = np.asarray(problem.capacities, dtype=np.int64)
    skip_flag = config.shortfall_rule == "skip"

    done = 0
    while done < steps:
        span = min(CHUNK_STEPS, steps - done)
        t_start = t0 + done
        uniforms = _uniform_block(config.seed, t_start, span, n, k)
        record_flags = (np.arange(t_start, t_start + span) >= record_from
                        ).astype(np.uint8)
        clearing = np.zeros((span, pa.m))
        paytot = np.zeros(span)
        status = _kernels.run_chunk(
            karma, type_idx, share, sigma_cum, pick_cum, chi, bstar, cap,
            problem.mutually_exclusive, skip_flag, uniforms, record_flags,
            kbar_target,
            accumulators["alloc"], accumulators["intent"],
            accumulators["urgency"], clearing, paytot,
            accumulators["pay_type"], accumulators["redist_type"],
            accumulators["counters"],
        )
        if status >= 0:
            raise SimInvariantError(
                f"karma conservation broke at step {t_start + int(status)}: "
                f"sum {karma.sum():.12e} vs target {kbar_target:.12e}"
            )
        traces["clearing"].append(clearing)
        traces["paytot"].append(paytot)
        done += span


def _fresh_accumulators(problem: Problem, config: SimConfig):
    pa, type_idx, share = _agent_layout(problem)
    if config.policy.chi.chi.shape != (pa.n_types, pa.m, pa.qmax):
        raise StructuralError("policy tensor does not match the problem")
    if len(config.policy.bids) != pa.m:
        raise StructuralError("policy bid vector does not match the problem")
    return {
        "layout": (pa, type_idx, share),
        "tables": _policy_tables(pa, config.policy),
        "alloc": np.zeros((pa.n_types, pa.m, pa.qmax), dtype=np.int64),
        "intent": np.zeros((pa.n_types, pa.m, pa.qmax), dtype=np.int64),
        "urgency": np.zeros((pa.n_types, pa.qmax), dtype=np.int64),
        "pay_type": np.zeros(pa.n_types),
        "redist_type": np.zeros(pa.n_types),
        "counters": np.zeros(1, dtype=np.int64),
    }


def initial_state(problem: Problem, config: SimConfig) -> SimState:
    n = problem.n_users
    return SimState(karma=np.full(n, config.mean_karma), t=0, seed=config.seed)


def step(state: SimState, problem: Problem, config: SimConfig):
    """Advance one auction round; returns (new state, step record)."""
    acc = _fresh_accumulators(problem, config)
    karma = state.karma.copy()
    before = karma.copy()
    traces = {"clearing": [], "paytot": []}
    _run_span(problem, config, karma, state.t, 1, record_from=0,
              accumulators=acc, traces=traces)
    pa, type_idx, share = acc["layout"]
    p_tot = float(traces["paytot"][0][0])
    gains = share * p_tot
    payments = before + gains - karma  # k' = k - p + g  =>  p = k - k' + g
    record = StepRecord(
        clearing_bids=traces["clearing"][0][0],
        total_payment=p_tot,
        payments=payments,
        redistribution=gains,
        shortfalls=int(acc["counters"][0]),
        allocations=acc["alloc"].copy(),
    )
    return SimState(karma=karma, t=state.t + 1, seed=state.seed), record


def run(problem: Problem, config: SimConfig) -> SimStats:
    """Simulate the full horizon and aggregate statistics after burn-in."""
    acc = _fresh_accumulators(problem, config)
    karma = np.full(problem.n_users, float(config.mean_karma))
    traces = {"clearing": [], "paytot": []}
    burn = config.effective_burn_in
    _run_span(problem, config, karma, 0, config.horizon, record_from=burn,
              accumulators=acc, traces=traces)

    pa, type_idx, _ = acc["layout"]
    clearing = np.concatenate(traces["clearing"], axis=0)
    paytot = np.concatenate(traces["paytot"], axis=0)
    keep = np.arange(0, config.horizon, config.trace_every)

    urg = acc["urgency"]
    denom = np.where(urg > 0, urg, 1)[:, None, :]
    alloc_freq = acc["alloc"] / denom
    intent_freq = acc["intent"] / denom
    recorded = config.horizon - burn
    n = problem.n_users
    return SimStats(
        alloc_frequency=alloc_freq,
        intent_frequency=intent_freq,
        alloc_counts=acc["alloc"],
        urgency_counts=acc["urgency"],
        clearing_bid_trace=clearing[keep],
        total_payment_trace=paytot[keep],
        trace_steps=keep,
        shortfall_count=int(acc["counters"][0]),
        shortfall_rate=float(acc["counters"][0]) / (n * config.horizon),
        payments_by_type=acc["pay_type"],
        redistributions_by_type=acc["redist_type"],
        recorded_steps=recorded,
        horizon=config.horizon,
        karma_total=float(karma.sum()),
        backend=_kernels.backend_name(),
    )


def write_stats_csv(problem: Problem, stats: SimStats, freq_path, trace_path,
                    ke: Optional[KarmaEquilibrium] = None) -> None:
    """Two CSV exports: per-cell frequencies and per-step clearing traces."""
    import csv

    with open(freq_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["type", "resource", "urgency", "frequency", "intent",
                  "occurrences"]
        if ke is not None:
            header.append("chi_star")
        writer.writerow(header)
        for i, t in enumerate(problem.types):
            for j in range(problem.n_resources):
                for u, level in enumerate(t.urgency.levels):
                    row = [i, j, level,
                           float(stats.alloc_frequency[i, j, u]),
                           float(stats.intent_frequency[i, j, u]),
                           int(stats.urgency_counts[i, u])]
                    if ke is not None:
                        row.append(float(ke.chi.chi[i, j, u]))
                    writer.writerow(row)
    with open(trace_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "resource", "clearing_bid", "total_payment"])
        for k, t_step in enumerate(stats.trace_steps):
            for j in range(problem.n_resources):
                writer.writerow([int(t_step), j,
                                 float(stats.clearing_bid_trace[k, j]),
                                 float(stats.total_payment_trace[k])])
