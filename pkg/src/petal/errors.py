"""Exception hierarchy shared across the package."""


class PetalError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(PetalError, ValueError):
    pass


class NumericError(PetalError, ArithmeticError):
    pass


class ContractError(PetalError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(PetalError, ValueError):
    pass


class TapeError(PetalError, RuntimeError):
    pass


class OracleError(PetalError, RuntimeError):
    """A verification oracle could not produce a trustworthy answer."""


class InvariantBreach(PetalError, RuntimeError):
    """Something that must never change (e.g. a frozen weight) changed."""


class CheckpointError(PetalError, OSError):
    pass


class FormatError(CheckpointError):
    pass


class CorruptionError(CheckpointError):
    pass


class IncompatibleCheckpoint(CheckpointError):
    pass
