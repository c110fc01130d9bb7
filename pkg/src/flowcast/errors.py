"""Exception types shared across the package.

Every failure mode surfaced to callers has a named type so that the CLI can
map categories onto stable exit codes and tests can assert on the precise
failure instead of a bare ValueError.
"""


class FlowcastError(Exception):
    """Base class for all package errors."""


class DimensionError(FlowcastError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(FlowcastError):
    """Input value outside the mathematical domain (e.g. log of x <= 0)."""


class ContractError(FlowcastError):
    """A documented precondition was violated by the caller."""


class RangeError(FlowcastError):
    """Query point outside the supported range (no extrapolation)."""


class NonconvergenceError(FlowcastError):
    """Adaptive integration exhausted its step budget.

    Carries ``t_last``, the time reached before giving up.
    """

    def __init__(self, message: str, t_last: float):
        super().__init__(message)
        self.t_last = t_last


class NumericError(FlowcastError):
    """A computation produced NaN or Inf."""


class DegeneracyError(FlowcastError):
    """A quantity required to be invertible or normalizable collapsed."""


class FormatError(FlowcastError):
    """An input file does not match its documented schema."""


class ParseError(FlowcastError):
    """A cell in an input file could not be parsed.

    Carries ``row`` (1-based line number in the source file) when known.
    """

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class DivergenceError(FlowcastError):
    """Training produced a non-finite loss.

    Carries the epoch and batch index at which the divergence occurred.
    """

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class CheckpointError(FlowcastError):
    """Checkpoint file is missing, malformed, or version-incompatible."""


class ConfigError(FlowcastError):
    """Run configuration failed validation.

    Carries the full list of offending keys/messages so a user sees every
    problem at once.
    """

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)
