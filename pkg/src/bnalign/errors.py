"""Exception types shared across the package."""


class BnalignError(Exception):
    """Base class for all package errors."""


class ShapeError(BnalignError):
    """A tensor dimension does not match what an operation requires.

    The message always names the offending dimension so shape bugs can be
    located without a debugger.
    """

    def __init__(self, dimension: str, expected, got):
        self.dimension = dimension
        self.expected = expected
        self.got = got
        super().__init__(f"{dimension}: expected {expected}, got {got}")


class ConfigError(BnalignError):
    """Invalid configuration value or combination of values."""


class DegenerateBatchError(BnalignError):
    """A normalization batch has too few example/spatial slots per channel."""


class UsageError(BnalignError):
    """API misuse, e.g. backward called before a training forward pass."""


class TrainingDivergedError(BnalignError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


class IdxParseError(BnalignError):
    """Malformed IDX file; the message includes the byte offset of the problem."""
