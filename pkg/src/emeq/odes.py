"""Backward integration of the equilibrium ODEs.

The generic integrator is classical RK4 with step-doubling error control,
marching from the terminal node to t0 and landing exactly on every grid
node.  On top of it sit the two equilibrium equations:

    rank-dependent:   L'(t) = -alpha^2 [ (mu/sigma) h(sqrt L)/h'(sqrt L) ]^2 L,
                      L(T) = 0,
    mean-ES:          L'(t) = -L [ (mu/sigma) (1 + (g/a0) Phi(c - sqrt L))
                                   / ((g/a0) phi(c - sqrt L)) ]^2,
                      L(T) = seed,  c = Phi^{-1}(a0).

Near L = 0 the rank-dependent ratio h/h' is a 0/0 limit resolved by the
series h(x) ~ 1 + h'(0) x, h'(x) ~ h'(0) + h''(0) x: if h'(0) is zero the
right-hand side has a finite nonzero limit (the Merton-type branch), while
h'(0) > 0 makes L = 0 a fixed point and only the zero branch starts from
the terminal condition; a nontrivial profile then requires the shooting
mode, which integrates forward from a guessed L(t0) and bisects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EquilibriumBreakdown,
    NonFiniteRhs,
    StepUnderflow,
    ValidationError,
)
from .gaussians import h_pair, h_series_coeffs, std_normal_cdf, std_normal_pdf, std_normal_ppf
from .market import Family, ProblemSpec, TimeGrid

_SERIES_X = 1e-6  # sqrt(Lambda) below this switches h/h' to its series
_H1_ZERO = 1e-10  # |h'(0)| below this counts as the degenerate 0/0 regime


@dataclass
class OdeDiagnostics:
    converged: bool = True
    breakdown_time: float | None = None
    max_rhs: float = 0.0
    step_rejections: int = 0
    mode: str = "backward"
    zero_branch: bool = False
    has_positive_solution: bool | None = None
    notes: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class OdeSolution:
    grid: TimeGrid
    values: np.ndarray
    diagnostics: OdeDiagnostics

    def __post_init__(self):
        v = self.values
        if v.shape != (self.grid.n_steps + 1,):
            raise ValidationError("one value per grid node required")

    def value_at(self, t: float) -> float:
        return float(np.interp(t, self.grid.nodes, self.values))

    def to_csv(self, path, rhs=None, h_prime_check=None) -> None:
        """Columns t, Lambda, rhs, h_prime_check; the last two are filled
        from the supplied callables (rhs(t, y) and h'(sqrt(y))) when given."""
        import csv as _csv

        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["t", "Lambda", "rhs", "h_prime_check"])
            for t, y in zip(self.grid.nodes, self.values):
                r = rhs(float(t), float(y)) if rhs is not None else ""
                hp = h_prime_check(float(y)) if h_prime_check is not None else ""
                writer.writerow(
                    [
                        "%.17g" % t,
                        "%.17g" % y,
                        "%.17g" % r if r != "" else "",
                        "%.17g" % hp if hp != "" else "",
                    ]
                )


def _rk4_step(rhs, t: float, y: float, h: float) -> float:
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_backward(
    rhs,
    terminal_value: float,
    grid: TimeGrid,
    tolerance: float = 1e-9,
    atol: float = 1e-12,
    adaptive: bool = True,
    substeps: int = 1,
) -> OdeSolution:
    """March y' = rhs(t, y) from y(T) = terminal_value down to t0.

    Adaptive mode controls the local error per step with the standard
    step-doubling (Richardson) estimate err = |y_half2 - y_full| / 15 and
    accepts when err <= atol + tolerance * |y|; sub-steps always land on
    grid nodes, so the dense output at the nodes is exact.  Non-adaptive
    mode takes ``substeps`` fixed RK4 steps per cell (used for measuring
    the convergence order).
    """
    nodes = grid.nodes
    values = np.empty(nodes.shape)
    values[-1] = terminal_value
    diag = OdeDiagnostics(mode="backward" if adaptive else "fixed-step")
    min_h = 1e-12 * (grid.T - grid.t0)

    def eval_rhs(t, y):
        v = rhs(t, y)
        if not np.isfinite(v):
            raise NonFiniteRhs(f"rhs non-finite at t={t:.6g}, y={y:.6g}")
        diag.max_rhs = max(diag.max_rhs, abs(v))
        return v

    y = float(terminal_value)
    for k in range(grid.n_steps, 0, -1):
        t_hi, t_lo = nodes[k], nodes[k - 1]
        if not adaptive:
            h = (t_lo - t_hi) / substeps
            for j in range(substeps):
                y = _rk4_step(eval_rhs, t_hi + j * h, y, h)
            values[k - 1] = y
            continue
        t = t_hi
        h = t_lo - t_hi  # negative
        while t > t_lo + 1e-15 * max(1.0, abs(t_lo)):
            h = -min(-h, t - t_lo)
            if -h < min_h:
                raise StepUnderflow(
                    f"step {abs(h):.3e} below 1e-12 of the horizon at t={t:.6g}"
                )
            y_full = _rk4_step(eval_rhs, t, y, h)
            y_half = _rk4_step(eval_rhs, t, y, 0.5 * h)
            y_half2 = _rk4_step(eval_rhs, t + 0.5 * h, y_half, 0.5 * h)
            err = abs(y_half2 - y_full) / 15.0
            budget = atol + tolerance * max(abs(y), abs(y_half2))
            if err <= budget:
                t += h
                y = y_half2
                growth = 5.0 if err == 0.0 else min(5.0, 0.9 * (budget / err) ** 0.2)
                h *= max(growth, 0.2)
            else:
                diag.step_rejections += 1
                h *= max(0.2, 0.9 * (budget / err) ** 0.2)
        values[k - 1] = y
    return OdeSolution(grid=grid, values=values, diagnostics=diag)


# ---------------------------------------------------------------------------
# rank-dependent utility equation
# ---------------------------------------------------------------------------


class _RdutRatio:
    """h(sqrt L)/h'(sqrt L) with breakdown certification and series limit."""

    def __init__(self, distortion, alpha: float):
        self.dist = distortion
        self.alpha = alpha
        self.h0, self.h1, self.h2 = h_series_coeffs(distortion, alpha)

    @property
    def degenerate_at_zero(self) -> bool:
        return abs(self.h1) <= _H1_ZERO

    def ratio_sq_times_L(self, t: float, L: float) -> float:
        """(h/h')^2 * L, the L-dependent factor of the right-hand side."""
        L = max(L, 0.0)
        x = np.sqrt(L)
        if x < _SERIES_X:
            h = self.h0 + self.h1 * x
            hp_lin = self.h1 + self.h2 * x
            if self.degenerate_at_zero:
                if self.h2 <= 0.0:
                    raise EquilibriumBreakdown(
                        "h''(0) <= 0: validity fails at the terminal point",
                        breakdown_time=t,
                    )
                # (h/h')^2 L -> (h / h2)^2 with one x cancelled
                return (h / self.h2) ** 2
            if self.h1 < 0.0:
                raise EquilibriumBreakdown(
                    f"h'(0) = {self.h1:.3e} < 0: validity fails as Lambda -> 0",
                    breakdown_time=t,
                )
            return (h / hp_lin) ** 2 * L
        h, hp = h_pair(self.dist, self.alpha, float(x))
        if hp <= 0.0:
            raise EquilibriumBreakdown(
                f"h'(sqrt Lambda) = {hp:.3e} <= 0 at t = {t:.6g}",
                breakdown_time=t,
            )
        return (h / hp) ** 2 * L

    def lam_coeff(self, L: float) -> float:
        """Risk-premium reduction coefficient lambda = alpha^2 sqrt(L) h/h'."""
        a2 = self.alpha**2
        x = np.sqrt(max(L, 0.0))
        if x < _SERIES_X:
            h = self.h0 + self.h1 * x
            if self.degenerate_at_zero:
                return a2 * h / self.h2
            return a2 * x * h / (self.h1 + self.h2 * x)
        h, hp = h_pair(self.dist, self.alpha, float(x))
        return a2 * x * h / hp

    def h_prime_at(self, L: float) -> float:
        x = np.sqrt(max(L, 0.0))
        if x < _SERIES_X:
            return self.h1 + self.h2 * x
        return h_pair(self.dist, self.alpha, float(x))[1]


def solve_lambda_rdut(
    spec: ProblemSpec,
    tolerance: float = 1e-9,
    mode: str = "auto",
    shooting_bracket: float = 10.0,
) -> OdeSolution:
    """Solve the rank-dependent Lambda equation with terminal value zero.

    mode "auto"/"backward": direct backward integration, resolving the
    Lambda -> 0 limit by series.  When h'(0) > 0 the zero solution is the
    only one reaching Lambda(T) = 0 from the terminal side, and it is
    returned with ``zero_branch`` set.  mode "shooting": bisect Lambda(t0)
    so that the forward integral matches Lambda(T) = 0 within tolerance,
    exposing the nontrivial branch where the backward start is degenerate.
    """
    if spec.family is not Family.RDUT:
        raise ValidationError("solve_lambda_rdut requires an RDUT problem")
    payload = spec.payload
    ratio = _RdutRatio(payload.distortion, payload.alpha)
    mu, sig = spec.market.mu, spec.market.sigma
    a2 = payload.alpha**2

    def rhs(t, L):
        r = (mu(t) / sig(t)) ** 2
        return -a2 * r * ratio.ratio_sq_times_L(t, max(L, 0.0))

    if mode in ("auto", "backward"):
        if not ratio.degenerate_at_zero and ratio.h1 < 0.0:
            raise EquilibriumBreakdown(
                f"h'(0) = {ratio.h1:.3e} < 0: the concavity certificate fails "
                "at the terminal point",
                breakdown_time=spec.grid.T,
            )
        if ratio.degenerate_at_zero or mode == "backward":
            sol = integrate_backward(rhs, 0.0, spec.grid, tolerance=tolerance)
            sol.diagnostics.notes.append("direct backward with series limit")
        else:
            # h'(0) > 0: Lambda = 0 is a fixed point of the backward flow
            diag = OdeDiagnostics(mode="backward", zero_branch=True)
            diag.has_positive_solution = False
            diag.notes.append(
                "h'(0) > 0 makes Lambda = 0 a fixed point; only the zero "
                "branch starts from Lambda(T) = 0 (use mode='shooting' for "
                "the nontrivial candidate)"
            )
            sol = OdeSolution(spec.grid, np.zeros(spec.grid.n_steps + 1), diag)
    elif mode == "shooting":
        sol = _solve_rdut_shooting(spec, rhs, tolerance, shooting_bracket)
    else:
        raise ValidationError(f"unknown mode {mode!r}")

    _assert_monotone_nonnegative(sol)
    sol.diagnostics.has_positive_solution = bool(np.any(sol.values > 0.0))
    return sol


def _integrate_forward(rhs, initial_value: float, grid: TimeGrid, tolerance: float):
    """Forward companion of integrate_backward via time reversal."""
    rev = TimeGrid(t0=-grid.T, T=-grid.t0, n_steps=grid.n_steps)
    sol = integrate_backward(
        lambda s, y: -rhs(-s, y), initial_value, rev, tolerance=tolerance
    )
    return sol.values[::-1], sol.diagnostics


def _solve_rdut_shooting(spec, rhs, tolerance: float, bracket: float) -> OdeSolution:
    """Bisect Lambda(t0) so the forward solve hits Lambda(T) = 0.

    The forward flow is made absorbing at zero, so the residual
    Lambda(T; L0) is non-decreasing in L0 and the solution is the largest
    start whose residual stays within tolerance (absorption exactly at T).
    """
    target_tol = max(tolerance, 1e-12)

    def rhs_absorbing(t, L):
        return 0.0 if L <= 0.0 else rhs(t, L)

    def terminal(l0: float):
        return _integrate_forward(rhs_absorbing, l0, spec.grid, tolerance)

    hi = bracket
    values_hi, diag_hi = terminal(hi)
    expansions = 0
    while values_hi[-1] <= target_tol and expansions < 6:
        hi *= 4.0
        values_hi, diag_hi = terminal(hi)
        expansions += 1
    if values_hi[-1] <= target_tol:
        best_values, best_diag = values_hi, diag_hi  # flow absorbs however high
    else:
        lo = 0.0
        best_values, best_diag = None, None
        for _ in range(120):
            mid = 0.5 * (lo + hi)
            values_mid, diag_mid = terminal(mid)
            if values_mid[-1] <= target_tol:
                lo = mid  # reaches zero; the solution is the largest such start
                best_values, best_diag = values_mid, diag_mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * max(1.0, hi):
                break
        if best_values is None:
            best_values, best_diag = terminal(lo)
    best_values = np.maximum(best_values, 0.0)
    best_values[-1] = 0.0
    best_diag.mode = "shooting"
    best_diag.notes.append(f"bisected Lambda(t0) = {best_values[0]:.12g}")
    return OdeSolution(spec.grid, best_values, best_diag)


def rdut_lambda_coefficients(spec: ProblemSpec, sol: OdeSolution) -> np.ndarray:
    """lambda(t) = alpha^2 sqrt(Lambda) h(sqrt Lambda)/h'(sqrt Lambda) at
    the grid nodes, with the series limit at Lambda = 0."""
    ratio = _RdutRatio(spec.payload.distortion, spec.payload.alpha)
    return np.array([ratio.lam_coeff(v) for v in sol.values])


def rdut_validity(spec: ProblemSpec, sol: OdeSolution) -> np.ndarray:
    """Per-node certificate h'(sqrt Lambda) > 0 (series limit at zero)."""
    ratio = _RdutRatio(spec.payload.distortion, spec.payload.alpha)
    out = np.empty(sol.values.shape, dtype=bool)
    for i, v in enumerate(sol.values):
        if v <= _SERIES_X**2 and ratio.degenerate_at_zero:
            out[i] = ratio.h2 > 0.0
        else:
            out[i] = ratio.h_prime_at(v) > 0.0
    return out


# ---------------------------------------------------------------------------
# mean-ES equation
# ---------------------------------------------------------------------------


def mes_rhs_factory(spec: ProblemSpec):
    payload = spec.payload
    rho = payload.gamma / payload.alpha0
    c = std_normal_ppf(payload.alpha0)
    mu, sig = spec.market.mu, spec.market.sigma

    def rhs(t, L):
        L = max(L, 0.0)
        x = np.sqrt(L)
        num = 1.0 + rho * std_normal_cdf(c - x)
        den = rho * std_normal_pdf(c - x)
        return -L * (mu(t) / sig(t) * num / den) ** 2

    return rhs


def solve_lambda1_mes(
    spec: ProblemSpec, terminal_seed: float = 0.0, tolerance: float = 1e-9
) -> OdeSolution:
    """Solve the mean-ES Lambda1 equation backward from Lambda1(T) = seed.

    The right-hand side vanishes identically at Lambda1 = 0 and is locally
    Lipschitz there (the denominator phi(c - sqrt L) is bounded away from
    zero), so seed = 0 yields the zero solution analytically and is
    flagged ``has_positive_solution = False``.  Positive seeds support the
    perturbation study of the zero branch.
    """
    if spec.family is not Family.MEAN_ES:
        raise ValidationError("solve_lambda1_mes requires a MeanES problem")
    if terminal_seed < 0.0:
        raise ValidationError("terminal_seed must be >= 0")
    if terminal_seed == 0.0:
        diag = OdeDiagnostics(mode="analytic", zero_branch=True)
        diag.has_positive_solution = False
        diag.notes.append("RHS(t, 0) = 0: Lambda1 := 0 is the unique solution")
        return OdeSolution(spec.grid, np.zeros(spec.grid.n_steps + 1), diag)
    sol = integrate_backward(
        mes_rhs_factory(spec), terminal_seed, spec.grid, tolerance=tolerance
    )
    _assert_monotone_nonnegative(sol)
    sol.diagnostics.has_positive_solution = True
    return sol


def _assert_monotone_nonnegative(sol: OdeSolution) -> None:
    v = sol.values
    if np.any(v < 0.0):
        raise ValidationError("Lambda solution went negative")
    slack = 1e-12 * max(1.0, float(np.max(v)))
    if np.any(np.diff(v) > slack):
        raise ValidationError("Lambda solution must be non-increasing in t")
