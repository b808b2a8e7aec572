"""
Exception hierarchy for conformal-control.

Every error carries an ``exit_code`` category so the CLI can map failures
to process exit codes without inspecting messages.
"""


class ConformalControlError(Exception):
    """Base class for all conformal-control errors"""

    exit_code = 1


class InvalidInputError(ConformalControlError, ValueError):
    """Non-finite values, length mismatches, malformed streams"""

    exit_code = 2


class InvalidParameterError(ConformalControlError, ValueError):
    """A hyperparameter outside its admissible range"""

    exit_code = 3


class InsufficientDataError(ConformalControlError, ValueError):
    """Empty streams, short series, empty calibration buffers"""

    exit_code = 4


class ShapeError(ConformalControlError, ValueError):
    """Tensor shape incompatibility"""

    exit_code = 5


class PipelineOrderError(ConformalControlError, RuntimeError):
    """An online step was called out of order (e.g. no stored forecast)"""

    exit_code = 6


class StateError(ConformalControlError, RuntimeError):
    """Optimizer or controller state is not ready for the requested call"""

    exit_code = 6


class SchemaError(ConformalControlError, ValueError):
    """CSV or results file does not follow the documented schema"""

    exit_code = 7


class ConfigError(ConformalControlError, ValueError):
    """Invalid experiment configuration"""

    exit_code = 8
