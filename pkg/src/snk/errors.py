"""Exception hierarchy shared by all modules."""


class SnkError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SnkError, ValueError):
    pass


class ContractError(SnkError, ValueError):
    """An input violates a documented precondition (e.g. non-symmetric matrix)."""


class NumericalError(SnkError, ArithmeticError):
    """An iterative kernel failed to converge."""


class DegenerateSketchError(SnkError, ArithmeticError):
    pass


class NonFiniteLossError(SnkError, FloatingPointError):
    def __init__(self, message, w_norm=None):
        super().__init__(message if w_norm is None else f"{message} (|w|={w_norm:.3e})")
        self.w_norm = w_norm


class RegularizationError(SnkError, ArithmeticError):
    """gamma cancels a retained eigenvalue, leaving the shifted system singular."""

    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class StepRejectedError(SnkError, FloatingPointError):
    def __init__(self, message, alpha=None, step_norm=None):
        super().__init__(message)
        self.alpha = alpha
        self.step_norm = step_norm


class AccountingError(SnkError, AssertionError):
    """Metered sweeps disagree with the cost formulas."""


class ConfigError(SnkError, ValueError):
    pass
