"""
Error hierarchy
Every error carries the process exit code the command-line driver maps it to
"""


class SimulationError(Exception):
    """Base class for toolkit errors"""

    exit_code = 1


class ConfigurationError(SimulationError, ValueError):
    """Invalid or missing configuration"""

    exit_code = 2


class DomainError(ConfigurationError):
    """Parameters outside the domain where a quantity is defined"""


class NumericalFailure(SimulationError, ArithmeticError):
    """A numerical procedure failed to reach its tolerance"""

    exit_code = 3


class IntegrityError(NumericalFailure):
    """Cached state disagrees with a full recomputation"""

    def __init__(self, message: str, state_dump: dict = None):
        super().__init__(message)
        self.state_dump = state_dump or {}


class BudgetRefusal(SimulationError):
    """Work or memory estimate above the configured cap"""

    exit_code = 4

    def __init__(self, message: str, estimate: float = None):
        super().__init__(message)
        self.estimate = estimate
