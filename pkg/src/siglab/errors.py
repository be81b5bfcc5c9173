"""Exception types shared across the package."""


class SiglabError(Exception):
    """Base class for all package errors."""


class ShapeError(SiglabError, ValueError):
    pass


class NumericError(SiglabError, ArithmeticError):
    pass


class ContractError(SiglabError, ValueError):
    """A caller broke an operation's precondition."""


class GenerationError(SiglabError):
    pass


class ParseError(SiglabError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EstimationError(SiglabError):
    pass


class TrainingError(NumericError):
    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        self.epoch = epoch
        self.batch = batch
        if epoch is not None:
            message = f"{message} (epoch {epoch}, batch {batch})"
        super().__init__(message)


class MetricError(SiglabError):
    pass
