"""Exception hierarchy shared by all modules."""


class CondenseError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CondenseError, ValueError):
    pass


class ContractError(CondenseError, ValueError):
    """A documented precondition of an operation was violated."""


class ParameterError(CondenseError, ValueError):
    pass


class ConfigError(CondenseError, ValueError):
    """Invalid model or training configuration."""


class DataError(CondenseError, ValueError):
    pass


class FormatError(DataError):
    """Malformed bytes in a dataset file or checkpoint."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(FormatError):
    pass


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TrainingError(CondenseError, RuntimeError):
    pass
