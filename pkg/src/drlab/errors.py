"""Exception hierarchy shared by every drlab module."""


class DrlabError(Exception):
    pass


class ConfigurationError(DrlabError, ValueError):
    """Invalid configuration, hyperparameter or empty input."""


class DimensionError(DrlabError, ValueError):
    pass


class DegenerateInputError(DrlabError, ValueError):
    """Zero-norm vectors, empty classes and similar inputs with no defined answer."""


class NonFiniteError(DrlabError, ValueError):
    pass


class DeterminismError(DrlabError, RuntimeError):
    pass


class ContractViolationError(DrlabError, ValueError):
    pass


class ProtocolViolationError(DrlabError, RuntimeError):
    """Breaks the incremental protocol (class overlap, missing prototypes, ...)."""


class CheckpointError(DrlabError, IOError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass
