"""Exception hierarchy shared by the factorization, filter and estimation layers."""

from __future__ import annotations


class SvdKfError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatchError(SvdKfError, ValueError):
    pass


class NotSymmetricError(SvdKfError, ValueError):
    pass


class NotPSDError(SvdKfError, ValueError):
    pass


class NotPDError(SvdKfError, ValueError):
    pass


class ConfigError(SvdKfError, ValueError):
    pass


class FilterError(SvdKfError, ArithmeticError):
    """A numerical failure that aborts a filter run.

    ``step`` is the 1-based time index where the failure was detected (0 for the
    initial step) and ``stage`` names the pre-array or update involved, when known.
    """

    def __init__(self, message: str, *, step: int | None = None, stage: str | None = None):
        self.base_message = message
        self.step = step
        self.stage = stage
        where = []
        if step is not None:
            where.append(f"step {step}")
        if stage is not None:
            where.append(stage)
        if where:
            message = f"{message} [{', '.join(where)}]"
        super().__init__(message)

    def at(self, step: int | None = None, stage: str | None = None) -> "FilterError":
        """Copy of this error tagged with a location, keeping any existing tags."""
        return type(self)(
            self.base_message,
            step=self.step if self.step is not None else step,
            stage=self.stage if self.stage is not None else stage,
        )


class RankDeficientError(FilterError):
    pass


class DegenerateSingularValuesError(FilterError):
    pass


class ZeroSingularValueError(FilterError):
    pass


class SingularInnovationCovarianceError(FilterError):
    pass


class NonFiniteStateError(FilterError):
    pass


class DidNotConvergeError(SvdKfError):
    pass
