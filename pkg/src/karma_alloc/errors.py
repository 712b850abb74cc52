"""Exception types shared across the package."""


class KarmaAllocError(Exception):
    """Base class for all package errors."""


class StructuralError(KarmaAllocError, ValueError):
    """A domain object violates a hard structural invariant."""


class InfeasibleImprovementError(KarmaAllocError):
    """A user type strictly desires no resource, so its log-improvement is undefined."""


class SolverError(KarmaAllocError):
    """Solver did not certify optimality within its iteration budget.

    Carries the best residual report found so far in ``report``.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NoKeFoundError(KarmaAllocError):
    """Equilibrium search gave up. Carries final diagnostics."""

    def __init__(self, message, excess_demand=None, budget_imbalance=None,
                 bids=None, iterations=0):
        super().__init__(message)
        self.excess_demand = excess_demand
        self.budget_imbalance = budget_imbalance
        self.bids = bids
        self.iterations = iterations


class NotNashBalancedError(KarmaAllocError):
    """The Nash-balance condition failed; ``report`` holds the balance report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DimensionalityError(KarmaAllocError):
    """Brute-force oracle refused an instance above its variable cap."""


class EmptyFeasibleSetError(KarmaAllocError):
    """No feasible point with positive improvement for every type exists."""


class SimInvariantError(KarmaAllocError):
    """A simulator conservation invariant was breached mid-run."""
