"""Exception hierarchy shared across the package."""


class LordNetError(Exception):
    """Base class for every error raised by lordnet."""


class DomainError(LordNetError, ValueError):
    """Argument outside the domain of a math primitive (e.g. non-finite)."""


class ShapeError(LordNetError, ValueError):
    pass


class ValidationError(LordNetError, ValueError):
    """Parameters or files that violate a documented invariant."""


class ParseError(ValidationError):
    pass


class ConfigError(LordNetError, ValueError):
    pass


class CapacityError(LordNetError):
    """Exhaustive search requested beyond the enumeration guard."""


class ConsistencyError(LordNetError):
    """A trace does not belong to the parameters it is replayed with."""


class NumericalError(LordNetError, ArithmeticError):
    pass


class TrainingError(NumericalError):
    """Training loss became non-finite."""

    def __init__(self, message, epoch=None, stage=None):
        super().__init__(message)
        self.epoch = epoch
        self.stage = stage
