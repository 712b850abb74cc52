"""Dynamic resource allocation under long-run Nash welfare with karma economies."""

__version__ = "0.1.0"

from .errors import (DimensionalityError, EmptyFeasibleSetError,
                     InfeasibleImprovementError, KarmaAllocError,
                     NoKeFoundError, NotNashBalancedError, SimInvariantError,
                     SolverError, StructuralError)
from .ke import (CouplingReport, KarmaEquilibrium, NashBalanceReport,
                 VerificationReport, check_nash_balance, compare_coupling,
                 construct_ke_from_mlnw, find_ke, merge_problems,
                 solve_user_problem, verify_ke)
from .mlnw import (KktResidualReport, MlnwSolution, kkt_residuals,
                   single_shot_nash_welfare, solve_mlnw, utilitarian)
from .model import (LongRunAllocation, Problem, UrgencyProcess, UserType,
                    ValidationReport, demand, nash_objective,
                    reward_improvements, rush_hour_scenario, validate)
from .oracle import (DominanceReport, TwoShotGameSpec, mlnw_oracle,
                     two_shot_check)
from .sim import (SimConfig, SimState, SimStats, StepRecord,
                  default_mean_karma, initial_state, policy_bid, run, step,
                  write_stats_csv)

__all__ = [
    "CouplingReport", "DimensionalityError", "DominanceReport",
    "EmptyFeasibleSetError", "InfeasibleImprovementError", "KarmaAllocError",
    "KarmaEquilibrium", "KktResidualReport", "LongRunAllocation",
    "MlnwSolution", "NashBalanceReport", "NoKeFoundError",
    "NotNashBalancedError", "Problem", "SimConfig", "SimInvariantError",
    "SimState", "SimStats", "SolverError", "StepRecord", "StructuralError",
    "TwoShotGameSpec", "UrgencyProcess", "UserType", "ValidationReport",
    "VerificationReport", "check_nash_balance", "compare_coupling",
    "construct_ke_from_mlnw", "default_mean_karma", "demand", "find_ke",
    "initial_state", "kkt_residuals", "merge_problems", "mlnw_oracle",
    "nash_objective", "policy_bid", "reward_improvements",
    "rush_hour_scenario", "run", "single_shot_nash_welfare",
    "solve_mlnw", "solve_user_problem", "step", "two_shot_check",
    "utilitarian", "validate", "verify_ke", "write_stats_csv",
]
