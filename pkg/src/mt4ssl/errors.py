"""Exception types shared across the package."""


class MT4SSLError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MT4SSLError, ValueError):
    pass


class LabelError(MT4SSLError, ValueError):
    pass


class ParamSetError(MT4SSLError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class EmptyOutputError(MT4SSLError, ValueError):
    pass


class InputTooShortError(MT4SSLError, ValueError):
    pass


class MaskIndexError(MT4SSLError, IndexError):
    pass


class InsufficientDataError(MT4SSLError, ValueError):
    pass


class AlignmentError(MT4SSLError, ValueError):
    pass


class ConfigError(MT4SSLError, ValueError):
    pass


class FormatError(MT4SSLError, ValueError):
    pass


class CheckpointError(MT4SSLError):
    pass


class ChecksumError(CheckpointError):
    pass


class NonFiniteLossError(MT4SSLError, FloatingPointError):
    pass
