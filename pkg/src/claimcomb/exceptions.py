"""Exception hierarchy shared by all modules."""


class ClaimCombError(Exception):
    """Base class for package errors."""


class InvalidInputError(ClaimCombError, ValueError):
    """Shapes, finiteness or sign constraints violated."""


class UndefinedMetricError(ClaimCombError, ValueError):
    """A metric denominator or scale is zero (e.g. all-zero responses)."""


class SchemaError(ClaimCombError, ValueError):
    """Input file is missing columns or holds unparseable values."""


class InfeasibleConfigError(ClaimCombError, ValueError):
    """Simulator or split configuration cannot be satisfied."""


class SolverError(ClaimCombError, RuntimeError):
    """A numeric solver failed."""


class RankDeficientError(SolverError):
    """Design matrix is numerically rank deficient."""


class ConvergenceError(SolverError):
    """Iterative solver hit its iteration cap.

    ``last_objective`` holds the objective at the final iterate.
    """

    def __init__(self, message, last_objective=float("nan")):
        super().__init__(message)
        self.last_objective = last_objective
