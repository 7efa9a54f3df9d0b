"""Exception types shared across the package."""


class ShotboardError(Exception):
    """Base class for all package errors."""


class ShapeError(ShotboardError, ValueError):
    pass


class RangeError(ShotboardError, IndexError):
    pass


class DomainError(ShotboardError, ValueError):
    pass


class TapeError(ShotboardError, RuntimeError):
    pass


class ContractError(ShotboardError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(ShotboardError, ValueError):
    pass


class VocabularyError(ShotboardError, ValueError):
    pass


class PackingError(ShotboardError, ValueError):
    pass


class ModeError(ShotboardError, ValueError):
    pass


class UsageError(ShotboardError, ValueError):
    """Missing prerequisite for a command; message carries the remedy."""


class CheckpointError(ShotboardError, RuntimeError):
    pass


class TrainingError(ShotboardError, RuntimeError):
    pass
