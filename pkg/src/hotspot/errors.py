"""Exception types shared across the package."""


class HotspotError(Exception):
    """Base class for all package errors."""


class InvalidArgument(HotspotError, ValueError):
    pass


class Unsupported(HotspotError, NotImplementedError):
    pass


class DegenerateCloudError(HotspotError, ValueError):
    pass


class ParseError(HotspotError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(message)
        self.line = line


class InvalidConfig(HotspotError, ValueError):
    pass


class NumericalFailure(HotspotError, ArithmeticError):
    def __init__(self, message: str, detail: float | None = None):
        super().__init__(message)
        self.detail = detail


class TrainingDivergence(HotspotError, ArithmeticError):
    """Raised on non-finite gradients or losses; carries the last good checkpoint if any."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointError(HotspotError, ValueError):
    pass


class DomainError(InvalidArgument):
    """Argument outside the mathematical domain of a function (e.g. log of a nonpositive value)."""
