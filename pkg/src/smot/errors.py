"""Exception types raised across the package."""

from __future__ import annotations


class SmotError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(SmotError):
    """Invalid user input (configuration, family parameters, grids)."""

    exit_code = 2


class DomainError(SmotError, ValueError):
    """Argument outside the region where an operation is defined."""

    exit_code = 2


class OrderViolation(ValidationError):
    """Marginals fail the convex-decreasing order check."""

    def __init__(self, s: float, t: float, strike: float, gap: float):
        self.s, self.t, self.strike, self.gap = s, t, strike, gap
        super().__init__(
            f"convex-decreasing order violated between t={s:.6g} and t={t:.6g} "
            f"at strike k={strike:.6g} (put price drops by {gap:.3e})"
        )


class NumericalError(SmotError):
    """Base class for non-convergence style failures."""

    exit_code = 3


class ConvergenceError(NumericalError):
    pass


class RootBracketError(NumericalError):
    """No sign change on the requested bracket."""

    def __init__(self, message: str, lo: float = float("nan"), hi: float = float("nan"),
                 f_lo: float = float("nan"), f_hi: float = float("nan")):
        self.lo, self.hi, self.f_lo, self.f_hi = lo, hi, f_lo, f_hi
        super().__init__(f"{message} [bracket ({lo:.6g}, {hi:.6g}), values ({f_lo:.3e}, {f_hi:.3e})]")


class NoTransition(NumericalError):
    """The mean residual never changes sign: the pair is a pure martingale pair."""


class MonotonicityViolation(NumericalError):
    pass


class MultipleExtrema(NumericalError):
    pass


class InversionError(NumericalError):
    pass


class StepOverflow(NumericalError):
    pass


class QuadratureWarning(UserWarning):
    pass


class DispersionWarning(UserWarning):
    pass
