"""
Exceptions and warning categories for grbLMM
"""

from typing import Any, Optional

from constants import EXIT_ARGUMENT, EXIT_DATA, EXIT_NUMERICAL


class GrbLmmError(Exception):
    """Base class for errors the CLI turns into an exit code"""

    exit_code = 1
    code = "ERROR"


class ConfigError(GrbLmmError):
    """Invalid argument or configuration value"""

    exit_code = EXIT_ARGUMENT
    code = "ARGUMENT_ERROR"


class DataError(GrbLmmError):
    """Malformed or inconsistent input data"""

    exit_code = EXIT_DATA
    code = "DATA_ERROR"

    def __init__(self, message: str, row: Optional[int] = None):
        super().__init__(message)
        self.row = row


class NumericalError(GrbLmmError):
    """Ill-conditioned variance state or failed factorization"""

    exit_code = EXIT_NUMERICAL
    code = "NUMERICAL_FAILURE"


class StoppingError(NumericalError):
    """No admissible stopping iteration"""

    code = "STOPPING_FAILURE"


class FitAborted(NumericalError):
    """A boosting step failed; the trace recorded so far is attached"""

    def __init__(self, message: str, trace: Any = None):
        super().__init__(message)
        self.trace = trace


class DegenerateDesignWarning(UserWarning):
    pass


class VarianceFloorWarning(UserWarning):
    pass


class ConvergenceWarning(UserWarning):
    pass


class MonotonicityWarning(UserWarning):
    pass


class AicDomainWarning(UserWarning):
    pass
