"""Exception hierarchy shared by every module."""


class MattingError(Exception):
    """Base class for all errors raised by this package."""

    kind = "error"


class DimensionError(MattingError, ValueError):
    kind = "dimension"


class ContractError(MattingError, ValueError):
    kind = "contract"


class ConfigError(MattingError, ValueError):
    kind = "config"


class StateError(MattingError, RuntimeError):
    kind = "state"


class NonFiniteError(MattingError, FloatingPointError):
    kind = "nonfinite"


class FormatError(MattingError, ValueError):
    kind = "format"


class MalformedHeaderError(FormatError):
    kind = "malformed-header"


class IndexGapError(FormatError):
    kind = "index-gap"


class DimensionMismatchError(FormatError):
    kind = "dimension-mismatch"


class CheckpointError(MattingError, ValueError):
    kind = "checkpoint"
