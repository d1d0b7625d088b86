"""Exception types raised across the package."""
from __future__ import annotations


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class NumericFailureError(ArithmeticError):
    """A numerical evaluation produced a non-finite value."""


class GeometryInfeasibleError(ValueError):
    """Class prototypes could not be placed under the requested separation."""


class UndefinedAngleError(ValueError):
    """The angle between two vectors is undefined (one of them is zero)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss.

    Carries the step index and the offending loss breakdown so callers can
    report where the run went wrong.
    """

    def __init__(self, step: int, breakdown=None, message: str | None = None):
        self.step = step
        self.breakdown = breakdown
        if message is None:
            message = f"non-finite loss at step {step}"
            if breakdown is not None:
                message += (
                    f" (kd={breakdown.kd!r}, entropy={breakdown.manifold_entropy!r},"
                    f" total={breakdown.total!r})"
                )
        super().__init__(message)
