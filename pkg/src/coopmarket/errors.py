"""Exception hierarchy shared across the package."""


class CoopMarketError(Exception):
    """Base class for all package errors."""


class ParseError(CoopMarketError):
    """Scenario file could not be parsed (bad JSON, bad schema, malformed matrix)."""


class ScenarioValidationError(CoopMarketError):
    """Scenario failed semantic validation; carries the full report."""

    def __init__(self, report):
        self.report = report
        super().__init__("scenario validation failed:\n" + report.describe())


class DimensionMismatch(CoopMarketError):
    pass


class TooManyPlayers(CoopMarketError):
    """Enumerative guard tripped; use the constraint-generation path instead."""


class EmptyCoalition(CoopMarketError):
    pass


class ModeMismatch(CoopMarketError):
    """Dispatch mode incompatible with the requested coalition."""


class NotPositiveDefinite(CoopMarketError):
    pass


class SolverFailure(CoopMarketError):
    """Backend reported a non-optimal terminal status."""

    def __init__(self, message, solution=None):
        self.solution = solution
        super().__init__(message)


class InfeasibleModel(SolverFailure):
    """Model proved infeasible; message carries the diagnosed row class."""


class UnboundedModel(SolverFailure):
    pass
