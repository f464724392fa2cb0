"""Exception hierarchy. The CLI maps each family to an exit code."""


class GSASVError(Exception):
    """Base class for all package errors."""


class ConfigError(GSASVError, ValueError):
    pass


class ShapeError(ConfigError):
    pass


class DataError(GSASVError):
    """Bad or missing input data (exit code 2)."""


class FormatError(DataError):
    pass


class ProtocolError(DataError):
    pass


class VocabularyError(DataError):
    pass


class EvaluationError(DataError):
    pass


class NumericalError(GSASVError, ArithmeticError):
    """Non-finite loss or gradient (exit code 3)."""
