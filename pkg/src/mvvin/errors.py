"""Exception types shared across the package."""


class MvvinError(Exception):
    """Base class for package errors."""


class ShapeError(MvvinError, ValueError):
    pass


class ArgumentError(MvvinError, ValueError):
    pass


class NumericError(MvvinError, ArithmeticError):
    pass


class SceneParseError(MvvinError, ValueError):
    pass


class SceneValidationError(MvvinError, ValueError):
    pass


class NoTargetError(MvvinError, LookupError):
    pass


class UnknownWordError(MvvinError, KeyError):
    pass


class UnreachableError(MvvinError, RuntimeError):
    pass


class ConfigError(MvvinError, ValueError):
    pass


class CheckpointError(MvvinError, ValueError):
    pass


class CompatibilityError(CheckpointError):
    pass


class OracleError(MvvinError, RuntimeError):
    pass


class SplitOverlapError(MvvinError, ValueError):
    pass
