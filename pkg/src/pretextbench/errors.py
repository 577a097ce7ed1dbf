"""Exception hierarchy shared by every subsystem."""


class BenchError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(BenchError, ValueError):
    pass


class DomainError(BenchError, ValueError):
    pass


class BatchSizeError(BenchError, ValueError):
    pass


class NonFiniteError(BenchError, FloatingPointError):
    pass


class EmptyInputError(BenchError, ValueError):
    pass


class DecodeError(BenchError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.message = message
        self.offset = offset


class RangeError(BenchError, ValueError):
    pass


class TooShortError(BenchError, ValueError):
    pass


class SamplingError(BenchError, RuntimeError):
    pass


class ConfigError(BenchError, ValueError):
    pass


class UndefinedMetricError(BenchError, ValueError):
    pass


class CheckpointError(BenchError):
    pass


class NumericAbort(BenchError, FloatingPointError):
    """Training stopped because a loss or gradient went non-finite."""

    def __init__(self, objective: str, step: int, detail: str):
        super().__init__(f"non-finite value in objective {objective!r} at step {step}: {detail}")
        self.objective = objective
        self.step = step
        self.detail = detail
