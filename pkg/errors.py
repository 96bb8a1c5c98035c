class PlannerError(Exception):
    """Base class for every error the planner reports to the user."""

    exit_code = 1


class ConfigError(PlannerError, ValueError):
    exit_code = 2


class FitError(PlannerError, ValueError):
    exit_code = 2


class FitQualityError(PlannerError):
    exit_code = 3


class InversionError(PlannerError, ValueError):
    exit_code = 2


class ScoringError(PlannerError, ValueError):
    exit_code = 2


class ShapeError(PlannerError, ValueError):
    exit_code = 2


class SimulationError(PlannerError, RuntimeError):
    exit_code = 4


class InvariantViolation(PlannerError, AssertionError):
    exit_code = 4
