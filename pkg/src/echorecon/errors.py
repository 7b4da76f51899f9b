"""Exception types shared across the package."""


class EchoReconError(Exception):
    pass


class ShapeError(EchoReconError, ValueError):
    pass


class ParameterError(EchoReconError, ValueError):
    pass


class DataError(EchoReconError, ValueError):
    pass


class StateError(EchoReconError, RuntimeError):
    pass


class FormatError(EchoReconError, ValueError):
    pass


class NumericError(EchoReconError, FloatingPointError):
    pass


class ConfigError(EchoReconError, ValueError):
    pass
