"""Equilibrium assembly, lifted derivatives, the master-equation operator,
the spike-variation verifier, and policy iteration.

For a candidate wealth-independent strategy theta the auxiliary function f
is Gaussian-explicit in each family, and its lifted derivatives at a point
mass reduce to

    rank-dependent:  d_mu   =  exp(-a(G + x)) h(sqrt L)
                     d_v_mu = -exp(-a(G + x)) h'(sqrt L) / (a sqrt L)
    mean-ES:         d_mu   =  exp(G1) [F1 + (g/a0) F2](sqrt L1)
                     d_v_mu =  (g/(a0 (x - floor))) exp(G1) F3(sqrt L1)
    nonlinear-exp:   d_mu   =  dx h1 + F'(h2) dx h2,   d_v_mu = dxx h1

The verifier never differentiates f in time: along the equilibrium flow
(d/dt + L^theta) f = 0, so dt_f = -L^theta f and the spike-variation
derivative at (t, delta_x) is L^u f - L^theta f, a concave quadratic in
the control whose maximum must not exceed the tolerance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from .errors import (
    DomainError,
    EquilibriumBreakdown,
    NoEquilibriumOfThisForm,
    QuadratureNonConvergence,
    ValidationError,
)
from .gaussians import (
    HermiteRule,
    _open_unit_clip,
    h_pair,
    h_series_coeffs,
    p_mu,
    p_mu_complement,
    std_normal_cdf,
    std_normal_pdf,
    std_normal_ppf,
    truncated_exp_moments,
)
from .market import (
    DynamicsSpec,
    Family,
    ProblemSpec,
    TimeGrid,
    WealthIndependent,
    gamma_and_lambda_integrals,
)
from .measures import EmpiricalMeasure
from .odes import (
    OdeSolution,
    _SERIES_X,
    rdut_lambda_coefficients,
    rdut_validity,
    solve_lambda1_mes,
    solve_lambda_rdut,
)

_FMT = "%.17g"


# ---------------------------------------------------------------------------
# profile container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EquilibriumProfile:
    """Time grids of the equilibrium objects plus solver diagnostics.

    ``lambda_coeff`` is the risk-premium reduction coefficient for the
    rank-dependent family, the analogous proportional multiplier
    (F1 + (g/a0) F2)/(-(g/a0) F3) for mean-ES, and NaN where the notion is
    not defined (nonlinear expectations).
    """

    family: Family
    grid: TimeGrid
    theta: np.ndarray
    lambda_coeff: np.ndarray
    Lambda: np.ndarray
    Gamma: np.ndarray
    validity: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.grid.n_steps + 1
        for name in ("theta", "lambda_coeff", "Lambda", "Gamma", "validity"):
            if getattr(self, name).shape != (n,):
                raise ValidationError(f"{name} must have one entry per grid node")
        if not np.all(np.isfinite(self.theta)):
            raise ValidationError("theta must be finite at all nodes")

    def theta_strategy(self) -> WealthIndependent:
        return WealthIndependent.from_nodes(self.grid, self.theta)

    def theta_at(self, t: float) -> float:
        return float(np.interp(t, self.grid.nodes, self.theta))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "theta", "lambda", "Lambda", "valid"])
            for k, t in enumerate(self.grid.nodes):
                writer.writerow(
                    [
                        _FMT % t,
                        _FMT % self.theta[k],
                        _FMT % self.lambda_coeff[k],
                        _FMT % self.Lambda[k],
                        int(self.validity[k]),
                    ]
                )

    @staticmethod
    def theta_from_csv(path: str | Path) -> np.ndarray:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValidationError(f"profile CSV {path} is empty")
        return np.array([float(r["theta"]) for r in rows])


@dataclass(frozen=True)
class LiftedDerivatives:
    """Values of the lifted derivative pair at an evaluation point."""

    d_mu: float
    d_v_d_mu: float
    t: float
    y: float


# ---------------------------------------------------------------------------
# family contexts: (Gamma, Lambda) from a candidate theta
# ---------------------------------------------------------------------------


def family_convention(family: Family) -> str:
    return "mes" if family is Family.MEAN_ES else "rdut"


def context_from_theta(spec: ProblemSpec, theta: WealthIndependent):
    """(Gamma, Lambda) node arrays of the auxiliary function built on theta."""
    return gamma_and_lambda_integrals(
        theta, spec.market, spec.grid, convention=family_convention(spec.family)
    )


# ---------------------------------------------------------------------------
# lifted derivatives, general measures
# ---------------------------------------------------------------------------

_GH_DERIV_ORDERS = (40, 80, 160)


def lifted_derivs_rdut(
    t: float,
    m: EmpiricalMeasure,
    y: float,
    gamma: float,
    lam: float,
    dist,
    alpha: float,
) -> LiftedDerivatives:
    """Gauss-Hermite evaluation of the rank-dependent lifted derivatives,

        d_mu(y)   = E_eta w'(p_mu(t, s eta + G + y)) exp(-a (s eta + G + y))
        d_v_mu(y) = E_eta [... same ...] * eta / s,     s = sqrt(Lambda),

    with the 1/sqrt(Lambda) prefactor on the second derivative (the
    variant the finite-difference oracle confirms).
    """
    if lam <= 0.0:
        raise DomainError("lifted_derivs_rdut requires Lambda > 0")
    s = np.sqrt(lam)
    prev = None
    for order in _GH_DERIV_ORDERS:
        rule = HermiteRule.of_order(order)
        z = s * rule.nodes + gamma + y
        p = p_mu(z, gamma, lam, m.samples, m.weights)
        # complementary mixture computed directly so w' survives saturation
        q = p_mu_complement(z, gamma, lam, m.samples, m.weights)
        core = dist.dw(_open_unit_clip(p), _open_unit_clip(q)) * np.exp(-alpha * z)
        d_mu = float(rule.weights @ core)
        d_vd = float(rule.weights @ (core * rule.nodes)) / s
        cur = (d_mu, d_vd)
        if prev is not None:
            # the second derivative may cross zero; gauge both agreements
            # against the pair's natural scale
            scale = max(abs(cur[0]), abs(cur[1]) * s, 1e-12)
            if all(abs(c - p0) <= 1e-9 * scale for c, p0 in zip(cur, prev)):
                return LiftedDerivatives(d_mu=cur[0], d_v_d_mu=cur[1], t=t, y=y)
        prev = cur
    raise QuadratureNonConvergence(
        f"lifted derivatives did not stabilize at order {_GH_DERIV_ORDERS[-1]}"
    )


def mes_alpha0_quantile(
    m: EmpiricalMeasure, gamma1: float, lam1: float, alpha0: float, floor: float
):
    """The unique z with P(X_T <= z) = alpha0 for the lognormal mixture
    X_T = floor + (xi - floor) exp(G1 + sqrt(L1) eta), all atoms above the
    floor."""
    if np.any(m.samples <= floor):
        raise DomainError("mes quantile requires all samples above the floor")
    s = np.sqrt(lam1)
    logs = np.log(m.samples - floor)

    def cdf_minus(zlog: float) -> float:
        return float(
            m.weights @ std_normal_cdf((zlog - logs - gamma1) / s)
        ) - alpha0

    lo = float(np.min(logs)) + gamma1 - 12.0 * s
    hi = float(np.max(logs)) + gamma1 + 12.0 * s
    zlog = optimize.brentq(cdf_minus, lo, hi, xtol=1e-14, rtol=8.881784197001252e-16)
    return floor + np.exp(zlog)


def lifted_derivs_mes(
    t: float,
    m: EmpiricalMeasure,
    y: float,
    gamma1: float,
    lam1: float,
    gamma: float,
    alpha0: float,
    floor: float,
) -> LiftedDerivatives:
    """Mean-ES lifted derivatives for a general measure above the floor.

    The z-integrals of dH/dy and d2H/dy2 up to the alpha0-quantile q of
    X_T reduce, by the substitution z = floor + (y-floor) exp(sqrt(L1) s
    + G1), to truncated Gaussian exponential moments with upper limit
    S_q = (log((q-floor)/(y-floor)) - G1)/sqrt(L1); at mu = delta_x the
    limit is Phi^{-1}(alpha0) and the F1/F2/F3 closed forms reappear.
    """
    if lam1 <= 0.0:
        raise DomainError("lifted_derivs_mes requires Lambda1 > 0")
    if y <= floor:
        raise DomainError("evaluation point must lie above the floor")
    s = np.sqrt(lam1)
    q = mes_alpha0_quantile(m, gamma1, lam1, alpha0, floor)
    s_q = (np.log(q - floor) - np.log(y - floor) - gamma1) / s
    i0, i1 = truncated_exp_moments(s, s_q)
    rho = gamma / alpha0
    eg = np.exp(gamma1)
    d_mu = eg * np.exp(0.5 * lam1) + rho * eg * i0
    d_vd = rho * eg * i1 / (y - floor)
    return LiftedDerivatives(d_mu=float(d_mu), d_v_d_mu=float(d_vd), t=t, y=y)


@dataclass(frozen=True)
class SpaceFunction:
    """A function of (t, x) with first and second space derivatives."""

    val: callable
    dx: callable
    dxx: callable


def lifted_derivs_nonlexp(
    t: float,
    m: EmpiricalMeasure,
    y: float,
    h1: SpaceFunction,
    h2: SpaceFunction,
    F_prime,
) -> LiftedDerivatives:
    """d_mu = dx h1(t,y) + F'(E h2(t,xi)) dx h2(t,y); second derivative
    analogous.  E h2 runs over the empirical measure."""
    eh2 = float(m.weights @ np.asarray(h2.val(t, m.samples), dtype=float))
    fp = F_prime(eh2)
    d_mu = float(h1.dx(t, y)) + fp * float(h2.dx(t, y))
    d_vd = float(h1.dxx(t, y)) + fp * float(h2.dxx(t, y))
    return LiftedDerivatives(d_mu=d_mu, d_v_d_mu=d_vd, t=t, y=y)


# ---------------------------------------------------------------------------
# diagonal (delta_x) derivatives per family, with Lambda -> 0 limits
# ---------------------------------------------------------------------------


class _RdutDiagonal:
    def __init__(self, spec: ProblemSpec):
        self.alpha = spec.payload.alpha
        self.dist = spec.payload.distortion
        self.h0, self.h1, self.h2 = h_series_coeffs(self.dist, self.alpha)

    def derivs(self, t: float, x: float, gamma: float, lam: float) -> LiftedDerivatives:
        a = self.alpha
        pref = np.exp(-a * (gamma + x))
        sq = np.sqrt(max(lam, 0.0))
        if sq < _SERIES_X:
            h = self.h0 + self.h1 * sq
            if abs(self.h1) <= 1e-10:
                d_vd = -pref * self.h2 / a  # h'(x)/(a x) -> h''(0)/a
            else:
                d_vd = -np.inf if self.h1 > 0 else np.inf
        else:
            h, hp = h_pair(self.dist, a, float(sq))
            d_vd = -pref * hp / (a * sq)
        return LiftedDerivatives(
            d_mu=float(pref * h), d_v_d_mu=float(d_vd), t=t, y=x
        )


class _MesDiagonal:
    def __init__(self, spec: ProblemSpec):
        self.rho = spec.payload.gamma / spec.payload.alpha0
        self.alpha0 = spec.payload.alpha0
        self.floor = spec.market.floor_x
        self.c = std_normal_ppf(self.alpha0)

    def derivs(self, t: float, x: float, gamma1: float, lam1: float) -> LiftedDerivatives:
        if x <= self.floor:
            raise DomainError("state must lie above the floor")
        eg = np.exp(gamma1)
        sq = np.sqrt(max(lam1, 0.0))
        if sq == 0.0:
            d_mu = eg * (1.0 + self.rho * self.alpha0)
            d_vd = -np.inf  # F3 -> -phi(c)/x diverges; argmax degenerates to 0
        else:
            f1 = np.exp(0.5 * lam1)
            f2 = f1 * std_normal_cdf(self.c - sq)
            f3 = -f1 * std_normal_pdf(self.c - sq) / sq
            d_mu = eg * (f1 + self.rho * f2)
            d_vd = self.rho * eg * f3 / (x - self.floor)
        return LiftedDerivatives(d_mu=float(d_mu), d_v_d_mu=float(d_vd), t=t, y=x)


class _NonlexpDiagonal:
    """h1, h2 induced by a wealth-independent strategy under the
    amount-invested dynamics:  h2(t,x) = x + Gamma(t) and h1(t,x) =
    E g(x + Gamma(t) + sqrt(Lambda(t)) Z), with space derivatives by
    Gaussian integration by parts (E[g Z]/sqrt(L), E[g (Z^2-1)]/L) for
    positive Lambda and by central differences at Lambda = 0."""

    _STEIN_MIN_SQ = 1e-5

    def __init__(self, spec: ProblemSpec):
        self.reward = spec.payload.reward
        self.rule = HermiteRule.of_order(80)

    def _h1_parts(self, x: float, gamma: float, lam: float):
        g = self.reward.g
        sq = np.sqrt(max(lam, 0.0))
        if sq >= self._STEIN_MIN_SQ:
            z = self.rule.nodes
            gv = np.asarray(g(x + gamma + sq * z), dtype=float)
            h1 = float(self.rule.weights @ gv)
            dx = float(self.rule.weights @ (gv * z)) / sq
            dxx = float(self.rule.weights @ (gv * (z * z - 1.0))) / lam
            return h1, dx, dxx
        # Lambda ~ 0: h1(t, x) = g(x + Gamma); derivatives by differences
        eps = 1e-6 * max(1.0, abs(x) + abs(gamma))

        def h1_of(xx):
            if sq == 0.0:
                return float(np.asarray(g(xx + gamma), dtype=float))
            z = self.rule.nodes
            return float(self.rule.weights @ np.asarray(g(xx + gamma + sq * z), dtype=float))

        f0 = h1_of(x)
        fp = h1_of(x + eps)
        fm = h1_of(x - eps)
        return f0, (fp - fm) / (2.0 * eps), (fp - 2.0 * f0 + fm) / (eps * eps)

    def derivs(self, t: float, x: float, gamma: float, lam: float) -> LiftedDerivatives:
        _, dx1, dxx1 = self._h1_parts(x, gamma, lam)
        h2 = x + gamma  # E h2 over delta_x equals h2(t, x)
        fp = self.reward.F_prime(h2)
        return LiftedDerivatives(
            d_mu=float(dx1 + fp * 1.0), d_v_d_mu=float(dxx1), t=t, y=x
        )


def diagonal_derivs_factory(spec: ProblemSpec):
    if spec.family is Family.RDUT:
        return _RdutDiagonal(spec)
    if spec.family is Family.MEAN_ES:
        return _MesDiagonal(spec)
    return _NonlexpDiagonal(spec)


# ---------------------------------------------------------------------------
# master-equation operator at a point mass
# ---------------------------------------------------------------------------


def master_operator_at_delta(
    u_bar: float,
    t: float,
    x: float,
    derivs: LiftedDerivatives,
    dynamics: DynamicsSpec,
    dt_f: float = 0.0,
) -> float:
    """dt_f + b(t,x,u) d_mu + (1/2) s(t,x,u)^2 d_v_mu at mu = delta_x.

    A vanishing diffusion coefficient contributes zero even when the
    second derivative is infinite (the degenerate Lambda = 0 limit).
    """
    b = float(dynamics.b(t, np.asarray(x), np.asarray(u_bar)))
    s = float(dynamics.s(t, np.asarray(x), np.asarray(u_bar)))
    diff_term = 0.0 if s == 0.0 else 0.5 * s * s * derivs.d_v_d_mu
    return dt_f + b * derivs.d_mu + diff_term


def _operator_coefficients(t, x, derivs, dynamics):
    """(linear, quadratic) coefficients of u -> L^u f(t, delta_x)."""
    b1 = float(dynamics.b(t, np.asarray(x), np.asarray(1.0)))
    s1 = float(dynamics.s(t, np.asarray(x), np.asarray(1.0)))
    return b1 * derivs.d_mu, 0.5 * s1 * s1 * derivs.d_v_d_mu


def quadratic_argmax(t, x, derivs, dynamics) -> float:
    """Analytic first-order condition of the concave quadratic in the
    control.  Requires d_v_d_mu < 0 (possibly -inf, giving 0)."""
    lin, quad = _operator_coefficients(t, x, derivs, dynamics)
    if not quad < 0.0:
        raise ValidationError("quadratic_argmax requires a negative quadratic term")
    if np.isinf(quad):
        return 0.0
    return -lin / (2.0 * quad)


# ---------------------------------------------------------------------------
# equilibrium solves
# ---------------------------------------------------------------------------


def _profile_from_ode_rdut(spec: ProblemSpec, sol: OdeSolution) -> EquilibriumProfile:
    nodes = spec.grid.nodes
    lam_coeff = rdut_lambda_coefficients(spec, sol)
    alpha = spec.payload.alpha
    theta = spec.market.mu(nodes) / (alpha * spec.market.sigma(nodes) ** 2) * lam_coeff
    strat = WealthIndependent.from_nodes(spec.grid, theta)
    gamma, _ = context_from_theta(spec, strat)
    validity = rdut_validity(spec, sol)
    diag = {
        "ode": sol.diagnostics,
        "zero_branch": sol.diagnostics.zero_branch,
    }
    return EquilibriumProfile(
        family=spec.family,
        grid=spec.grid,
        theta=np.asarray(theta, dtype=float),
        lambda_coeff=lam_coeff,
        Lambda=sol.values.copy(),
        Gamma=gamma,
        validity=validity,
        diagnostics=diag,
    )


def mes_profile_from_lambda1(spec: ProblemSpec, sol: OdeSolution) -> EquilibriumProfile:
    """Assemble the proportional-form profile from a (possibly seeded)
    Lambda1 solution via the theta closed form."""
    payload = spec.payload
    rho = payload.gamma / payload.alpha0
    c = std_normal_ppf(payload.alpha0)
    nodes = spec.grid.nodes
    mu = np.asarray(spec.market.mu(nodes), dtype=float)
    sig = np.asarray(spec.market.sigma(nodes), dtype=float)
    sq = np.sqrt(np.maximum(sol.values, 0.0))
    lam_coeff = np.empty(sq.shape)
    pos = sq > 0.0
    lam_coeff[pos] = (1.0 + rho * std_normal_cdf(c - sq[pos])) * sq[pos] / (
        rho * std_normal_pdf(c - sq[pos])
    )
    lam_coeff[~pos] = 0.0
    theta = mu / sig**2 * lam_coeff
    strat = WealthIndependent.from_nodes(spec.grid, theta)
    gamma1, _ = context_from_theta(spec, strat)
    validity = np.ones(theta.shape, dtype=bool)  # F3 < 0 for Lambda1 > 0
    return EquilibriumProfile(
        family=spec.family,
        grid=spec.grid,
        theta=theta,
        lambda_coeff=lam_coeff,
        Lambda=sol.values.copy(),
        Gamma=gamma1,
        validity=validity,
        diagnostics={"ode": sol.diagnostics, "zero_branch": sol.diagnostics.zero_branch},
    )


def solve_equilibrium(spec: ProblemSpec, mode: str = "auto") -> EquilibriumProfile:
    """Family dispatch: rank-dependent via the Lambda equation and the
    theta closed form; mean-ES via zero-branch detection (raising
    NoEquilibriumOfThisForm when only Lambda1 = 0 exists); nonlinear
    expectations via policy iteration from zero."""
    if spec.family is Family.RDUT:
        sol = solve_lambda_rdut(spec, mode=mode)
        profile = _profile_from_ode_rdut(spec, sol)
        if sol.diagnostics.zero_branch and not sol.diagnostics.has_positive_solution:
            profile.diagnostics["warning"] = (
                "only the zero branch starts from Lambda(T) = 0 for this "
                "distortion; see mode='shooting'"
            )
        return profile
    if spec.family is Family.MEAN_ES:
        sol = solve_lambda1_mes(spec, terminal_seed=0.0)
        if not sol.diagnostics.has_positive_solution:
            raise NoEquilibriumOfThisForm(
                "only the zero solution Lambda1 = 0 found; no equilibrium of "
                "the proportional form",
                diagnostic="zero branch",
            )
        return mes_profile_from_lambda1(spec, sol)  # pragma: no cover
    profile, _ = policy_iteration(spec, WealthIndependent.constant(0.0))
    return profile


def profile_from_theta(spec: ProblemSpec, theta_nodes) -> EquilibriumProfile:
    """Wrap externally supplied theta node values (e.g. read back from a
    profile CSV) as a profile, deriving the context columns from theta."""
    theta = np.asarray(theta_nodes, dtype=float)
    strat = WealthIndependent.from_nodes(spec.grid, theta)
    gamma_arr, lam_arr = context_from_theta(spec, strat)
    nodes = spec.grid.nodes
    if spec.family is Family.RDUT:
        lam_coeff = (
            theta
            * spec.payload.alpha
            * np.asarray(spec.market.sigma(nodes)) ** 2
            / np.asarray(spec.market.mu(nodes))
        )
    else:
        lam_coeff = np.full(theta.shape, np.nan)
    diag = diagonal_derivs_factory(spec)
    lo, _ = spec.allowed_set
    x_ref = (spec.market.floor_x + 1.0) if np.isfinite(lo) else 1.0
    n = spec.grid.n_steps
    validity = np.empty(theta.shape, dtype=bool)
    for k in range(n + 1):
        kk = min(k, n - 1)
        d = diag.derivs(float(nodes[kk]), x_ref, float(gamma_arr[kk]), float(lam_arr[kk]))
        validity[k] = d.d_v_d_mu < 0.0
    return EquilibriumProfile(
        family=spec.family,
        grid=spec.grid,
        theta=theta,
        lambda_coeff=lam_coeff,
        Lambda=lam_arr,
        Gamma=gamma_arr,
        validity=validity,
        diagnostics={"source": "external theta"},
    )


# ---------------------------------------------------------------------------
# spike-variation verifier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VerificationReport:
    """Grid of spike-variation derivatives (dt + L^u) f(t, delta_x).

    ``rows`` holds (t, x, u, operator_value); a cell passes when its
    maximum over controls (analytic argmax included whenever the concavity
    certificate holds) does not exceed the tolerance.
    """

    rows: np.ndarray  # shape (n, 4)
    cell_max: np.ndarray  # shape (m, 3): t, x, max value
    tolerance: float
    passed: bool
    max_value: float
    argmax_info: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "x", "u", "operator_value"])
            for t, x, u, v in self.rows:
                writer.writerow([_FMT % t, _FMT % x, _FMT % u, _FMT % v])


def verify_spike(
    spec: ProblemSpec,
    profile: EquilibriumProfile,
    t_grid=None,
    x_grid=None,
    u_offsets=(0.0, 0.5, 1.0, 2.0),
    tolerance: float = 1e-8,
) -> VerificationReport:
    """Check the equilibrium master-equation inequality on a grid.

    The auxiliary-function context (Gamma, Lambda) is rebuilt from the
    profile's theta, so the report genuinely certifies the candidate
    strategy rather than trusting stored columns.  dt_f is eliminated by
    the flow identity dt_f = -L^theta f; a pass certifies the
    no-profitable-spike property on the tested grid.
    """
    nodes = spec.grid.nodes
    strat = profile.theta_strategy()
    gamma_arr, lam_arr = context_from_theta(spec, strat)
    diag = diagonal_derivs_factory(spec)
    dynamics = spec.dynamics()

    if t_grid is None:
        step = max(1, spec.grid.n_steps // 8)
        t_idx = list(range(0, spec.grid.n_steps, step))
    else:
        t_idx = [int(np.argmin(np.abs(nodes - t))) for t in t_grid]
        t_idx = [min(i, spec.grid.n_steps - 1) for i in t_idx]
    if x_grid is None:
        lo, hi = spec.allowed_set
        base = spec.market.floor_x if np.isfinite(lo) else 0.0
        x_grid = [base + 0.5, base + 1.0, base + 2.0]
    for x in x_grid:
        if not (spec.allowed_set[0] < x):
            raise ValidationError(f"x = {x} outside the allowed set")

    rows = []
    cell_max = []
    worst = -np.inf
    argmax_info = {}
    for k in t_idx:
        t = float(nodes[k])
        th = float(profile.theta[k])
        for x in x_grid:
            d = diag.derivs(t, float(x), float(gamma_arr[k]), float(lam_arr[k]))
            l_theta = master_operator_at_delta(th, t, x, d, dynamics)
            dt_f = -l_theta
            u_list = [th + off * sgn for off in u_offsets for sgn in ((1.0,) if off == 0.0 else (1.0, -1.0))]
            cmax = -np.inf
            if d.d_v_d_mu < 0.0:
                u_star = quadratic_argmax(t, x, d, dynamics)
                val_star = master_operator_at_delta(u_star, t, x, d, dynamics, dt_f)
                rows.append((t, x, u_star, val_star))
                cmax = max(cmax, val_star)
                argmax_info[(t, x)] = (u_star, val_star)
            for u in u_list:
                val = master_operator_at_delta(float(u), t, x, d, dynamics, dt_f)
                rows.append((t, x, float(u), val))
                cmax = max(cmax, val)
            cell_max.append((t, x, cmax))
            worst = max(worst, cmax)
    rows = np.array(rows)
    cell_max = np.array(cell_max)
    return VerificationReport(
        rows=rows,
        cell_max=cell_max,
        tolerance=tolerance,
        passed=bool(worst <= tolerance),
        max_value=float(worst),
        argmax_info=argmax_info,
    )


# ---------------------------------------------------------------------------
# policy iteration (Theta_2 o Theta_1 fixed point)
# ---------------------------------------------------------------------------


def policy_iteration(
    spec: ProblemSpec,
    theta0: WealthIndependent,
    u_grid=None,
    max_iter: int = 50,
    tol: float = 1e-9,
    x_ref: float | None = None,
):
    """Iterate policy evaluation (build f from theta_k) and policy
    improvement (pointwise argmax of the operator at the diagonal).

    The improvement uses the analytic quadratic argmax whenever the
    concavity certificate d_v_d_mu < 0 holds and falls back to the
    supplied control grid otherwise.  The terminal node inherits the last
    interior argmax (the diagonal derivatives degenerate at Lambda(T) = 0,
    and strategies are right-continuous in time).  Non-convergence within
    ``max_iter`` is reported through the diagnostics flag, returning the
    best iterate.
    """
    nodes = spec.grid.nodes
    n = spec.grid.n_steps
    diag = diagonal_derivs_factory(spec)
    dynamics = spec.dynamics()
    if x_ref is None:
        lo, _ = spec.allowed_set
        x_ref = (spec.market.floor_x + 1.0) if np.isfinite(lo) else 1.0

    theta = np.asarray(theta0(nodes), dtype=float)
    trace: list[float] = []
    converged = False
    for _ in range(max_iter):
        strat = WealthIndependent.from_nodes(spec.grid, theta)
        gamma_arr, lam_arr = context_from_theta(spec, strat)
        new = np.empty_like(theta)
        for k in range(n):
            t = float(nodes[k])
            d = diag.derivs(t, x_ref, float(gamma_arr[k]), float(lam_arr[k]))
            if d.d_v_d_mu < 0.0:
                new[k] = quadratic_argmax(t, x_ref, d, dynamics)
            else:
                if u_grid is None:
                    raise EquilibriumBreakdown(
                        "concavity certificate failed and no control grid "
                        "was supplied",
                        breakdown_time=t,
                    )
                vals = [
                    master_operator_at_delta(float(u), t, x_ref, d, dynamics)
                    for u in u_grid
                ]
                new[k] = float(u_grid[int(np.argmax(vals))])
        new[n] = new[n - 1]
        change = float(np.max(np.abs(new - theta)))
        trace.append(change)
        theta = new
        if change <= tol:
            converged = True
            break

    strat = WealthIndependent.from_nodes(spec.grid, theta)
    gamma_arr, lam_arr = context_from_theta(spec, strat)
    lam_coeff = np.full(theta.shape, np.nan)
    validity = np.empty(theta.shape, dtype=bool)
    for k in range(n + 1):
        kk = min(k, n - 1)  # terminal node certified by its left limit
        d = diag.derivs(float(nodes[kk]), x_ref, float(gamma_arr[kk]), float(lam_arr[kk]))
        validity[k] = d.d_v_d_mu < 0.0
    if spec.family is Family.RDUT:
        lam_coeff = theta * spec.payload.alpha * spec.market.sigma(nodes) ** 2 / spec.market.mu(nodes)
    profile = EquilibriumProfile(
        family=spec.family,
        grid=spec.grid,
        theta=theta,
        lambda_coeff=lam_coeff,
        Lambda=lam_arr,
        Gamma=gamma_arr,
        validity=validity,
        diagnostics={
            "iterations": len(trace),
            "converged": converged,
            "max_iter_exceeded": not converged,
            "trace": trace,
        },
    )
    return profile, trace
