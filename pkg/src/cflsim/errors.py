"""Exception types shared across the package."""


class CFLError(Exception):
    """Base class for simulator errors."""


class DimensionError(CFLError, ValueError):
    pass


class NumericError(CFLError, ArithmeticError):
    pass


class DegenerateAggregationError(CFLError, ValueError):
    pass


class FormatError(CFLError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class PartitionError(CFLError, ValueError):
    pass


class RoundError(CFLError, RuntimeError):
    """A communication round could not complete."""


class ClientDivergenceError(NumericError):
    def __init__(self, client_id: str, step: int, detail: str = ""):
        self.client_id = client_id
        self.step = step
        msg = f"client {client_id!r} diverged at local step {step}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class ConfigError(CFLError, ValueError):
    """Invalid experiment configuration; ``path`` points at the offending key."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
