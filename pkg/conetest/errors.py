"""
Exception hierarchy for conetest.

Two families map onto the command-line exit codes:
- ValidationError: bad inputs (exit code 2)
- NumericalError: a computation failed on valid inputs (exit code 3)
"""


class ConetestError(Exception):
    """Base class for all conetest errors"""


class ValidationError(ConetestError):
    """Inputs are malformed or inconsistent"""


class NumericalError(ConetestError):
    """A numerical step failed"""


class ConfigurationError(ValidationError):
    pass


class DataParseError(ValidationError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class NestednessError(ValidationError):
    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class SummaryError(ValidationError):
    def __init__(self, message, paths=None):
        super().__init__(message)
        self.paths = paths or []


class FimInputError(ValidationError):
    pass


class EvaluationError(NumericalError):
    def __init__(self, message, individual=None):
        super().__init__(
            message if individual is None else f"individual {individual}: {message}"
        )
        self.individual = individual


class MetricError(NumericalError):
    pass


class ProjectionError(NumericalError):
    pass


class EstimationError(NumericalError):
    pass


class BootstrapError(NumericalError):
    def __init__(self, message, failures=0):
        super().__init__(message)
        self.failures = failures


class StudyError(NumericalError):
    pass


class FimUnavailableError(ValidationError):
    pass
