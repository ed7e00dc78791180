"""Exception taxonomy shared across the package.

Scientific outcomes that a caller may want to branch on (breakdown of the
equilibrium condition, absence of an equilibrium of the assumed form) are
dedicated exception types carrying their diagnostics, so the CLI can map
them to distinct exit codes.
"""

from __future__ import annotations


class EmeqError(Exception):
    """Base class for all package errors."""


class SchemaError(EmeqError):
    """Configuration document is structurally invalid (missing/unknown field)."""


class ValidationError(EmeqError):
    """Configuration parsed but violates a numeric precondition."""


class EmptyMeasure(EmeqError):
    """Operation requires a non-empty sample set."""


class FloorHit(EmeqError):
    """A sample coincides exactly with the wealth floor."""


class FloorSingularity(EmeqError):
    """Kernel evaluated at z equal to the wealth floor."""


class FloorBreach(EmeqError):
    """Euler-Maruyama proposal crossed the wealth floor; use the exact scheme
    or a finer grid."""


class OverflowGuard(EmeqError):
    """Exponential-utility evaluation would overflow/underflow."""


class DomainError(EmeqError):
    """Argument outside the declared domain of a function."""


class NonFiniteNode(EmeqError):
    """Integrand non-finite at a quadrature node."""


class QuadratureNonConvergence(EmeqError):
    """Adaptive quadrature failed to reach the requested tolerance."""


class NonFiniteRhs(EmeqError):
    """ODE right-hand side returned a non-finite value."""


class StepUnderflow(EmeqError):
    """Adaptive step fell below 1e-12 times the horizon length."""


class WindowOverflow(EmeqError):
    """Spike window [t, t+eps) extends beyond the horizon."""


class EquilibriumBreakdown(EmeqError):
    """Validity condition h'(sqrt(Lambda)) > 0 failed along the trajectory."""

    def __init__(self, message: str, breakdown_time: float | None = None):
        super().__init__(message)
        self.breakdown_time = breakdown_time


class NoEquilibriumOfThisForm(EmeqError):
    """Only the zero branch of the equilibrium ODE exists; there is no
    equilibrium of the assumed (wealth-independent / proportional) form.

    This is a scientific result, not a fault; the CLI reports it with a
    dedicated exit code.
    """

    def __init__(self, message: str, diagnostic: str = "zero branch"):
        super().__init__(message)
        self.diagnostic = diagnostic
