"""Exception hierarchy shared across the package."""


class MMVDError(Exception):
    """Base class for all package errors."""


class ShapeError(MMVDError, ValueError):
    pass


class NumericDomainError(MMVDError, ArithmeticError):
    pass


class ConfigError(MMVDError, ValueError):
    pass


class ContractError(MMVDError, ValueError):
    """A precondition of an operation was violated by the caller."""


class VocabularyError(MMVDError, KeyError):
    pass


class FormatError(MMVDError, IOError):
    """A persisted file is missing, truncated, or has the wrong layout."""


class UndefinedMetricError(MMVDError, ValueError):
    pass


class TrainingDivergenceError(MMVDError, RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
