"""Distortion and utility functions, and the three reward functionals on
empirical measures.

The rank-dependent value of a law mu is the two-sided Choquet integral

    g(mu) = int_0^inf w(P(xi >= z)) u'(z) dz
          + int_{-inf}^0 [w(P(xi >= z)) - 1] u'(z) dz,

which for a step cdf collapses to the exact sum
sum_i u(x_(i)) [w(tail_i) - w(tail_{i+1})] - u(0) over sorted atoms.  Note
the convention g(delta_0) = 0 baked into the integral form; test oracles
rely on that constant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import (
    DomainError,
    EmptyMeasure,
    OverflowGuard,
    QuadratureNonConvergence,
    ValidationError,
)
from .gaussians import std_normal_cdf
from .measures import EmpiricalMeasure

_EXP_GUARD = 700.0  # alpha * x beyond this over/underflows exp


# ---------------------------------------------------------------------------
# distortions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GrowthCertificate:
    """Numeric witness (C, beta) for w'(p) <= C (p^{beta-1} + (1-p)^{beta-1}).

    The bound is sufficient, not necessary, so ``ok = False`` is a warning
    condition rather than an error: the solver may still run.
    """

    C: float
    beta: float
    ok: bool


@dataclass(frozen=True)
class Distortion:
    """Probability distortion w with derivative and growth certificate.

    Construction validates w(0) = 0, w(1) = 1 (to 1e-12), monotonicity on a
    10^4-point grid, and that w_prime matches centered differences of w.

    ``w_prime_pq(p, q)`` with q = 1 - p supplied separately lets quadrature
    kernels evaluate endpoint-singular derivatives without losing the
    complementary probability to float saturation; it defaults to
    w_prime(p).
    """

    name: str
    w: Callable[[np.ndarray], np.ndarray]
    w_prime: Callable[[np.ndarray], np.ndarray]
    params: tuple[float, ...] = ()
    growth: GrowthCertificate | None = None
    w_prime_pq: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def dw(self, p: np.ndarray, q: np.ndarray | None = None) -> np.ndarray:
        if self.w_prime_pq is not None and q is not None:
            return np.asarray(self.w_prime_pq(p, q), dtype=float)
        return np.asarray(self.w_prime(p), dtype=float)

    def __post_init__(self):
        _validate_distortion(self.w, self.w_prime, self.name)
        if self.growth is None:
            object.__setattr__(self, "growth", growth_certificate(self))
        if not self.growth.ok:
            warnings.warn(
                f"distortion {self.name!r}: no finite growth certificate found; "
                "tail behaviour may defeat the quadrature",
                RuntimeWarning,
                stacklevel=2,
            )


def _validate_distortion(w, w_prime, name: str) -> None:
    for p, target in ((0.0, 0.0), (1.0, 1.0)):
        val = float(w(np.array([p]))[0])
        if abs(val - target) > 1e-12:
            raise ValidationError(f"distortion {name!r}: w({p}) = {val}, want {target}")
    grid = np.linspace(0.0, 1.0, 10_001)
    vals = np.asarray(w(grid), dtype=float)
    if np.any(np.diff(vals) < -1e-14):
        raise ValidationError(f"distortion {name!r}: w not non-decreasing")
    # derivative consistency away from the (possibly singular) endpoints
    p = np.linspace(0.01, 0.99, 197)
    eps = 1e-6
    fd = (np.asarray(w(p + eps)) - np.asarray(w(p - eps))) / (2.0 * eps)
    wp = np.asarray(w_prime(p), dtype=float)
    err = np.max(np.abs(fd - wp) / np.maximum(1.0, np.abs(wp)))
    if err > 1e-6:
        raise ValidationError(
            f"distortion {name!r}: w_prime deviates from finite differences "
            f"by {err:.2e}"
        )


def growth_certificate(dist_like, ok_margin: float = 10.0) -> GrowthCertificate:
    """Search (C, beta) on log-spaced grids pushed to the float floor.

    Accepts a Distortion (its two-argument derivative keeps the
    complementary probability accurate near one) or a bare w' callable.
    For each candidate beta the implied constant is the sup of
    w'(p) / (p^{beta-1} + (1-p)^{beta-1}) over both tails; if the sup is
    still being set inside the last decades (ratio to the bulk above
    ``ok_margin``), no finite certificate exists on the reachable range
    and the family is flagged.
    """

    def dw(p, q):
        if hasattr(dist_like, "dw"):
            return np.asarray(dist_like.dw(p, q), dtype=float)
        return np.asarray(dist_like(p), dtype=float)

    # lower tail: p tiny (down to the float floor); upper tail: q tiny
    p_tail = np.geomspace(1e-300, 0.4, 700)
    q_tail = 1.0 - p_tail
    bulk_lo = p_tail > 1e-4
    p_mid = np.linspace(0.05, 0.95, 181)
    with np.errstate(over="ignore", divide="ignore"):
        wp_lo = dw(p_tail, q_tail)
        wp_hi = dw(q_tail, p_tail)
        wp_mid = dw(p_mid, 1.0 - p_mid)
    best = None
    for beta in np.linspace(0.05, 0.95, 19):
        with np.errstate(over="ignore"):
            env_tail = p_tail ** (beta - 1.0)
            r_lo = wp_lo / np.maximum(env_tail, 1.0)
            r_hi = wp_hi / np.maximum(env_tail, 1.0)
            r_mid = wp_mid / (
                p_mid ** (beta - 1.0) + (1.0 - p_mid) ** (beta - 1.0)
            )
        c_all = float(max(np.max(r_lo), np.max(r_hi), np.max(r_mid)))
        c_bulk = float(
            max(np.max(r_lo[bulk_lo]), np.max(r_hi[bulk_lo]), np.max(r_mid))
        )
        diverging = (not np.isfinite(c_all)) or c_all > ok_margin * max(
            c_bulk, 1e-300
        )
        cand = (c_all, float(beta), diverging)
        if best is None or (best[2] and not diverging) or (
            best[2] == diverging and c_all < best[0]
        ):
            best = cand
    c_all, beta, diverging = best
    return GrowthCertificate(C=c_all, beta=beta, ok=not diverging)


def identity_distortion() -> Distortion:
    # dtype-preserving (the finite-difference oracle feeds long doubles)
    return Distortion(
        "identity",
        w=lambda p: np.asarray(p) + 0.0,
        w_prime=lambda p: np.ones_like(np.asarray(p, dtype=np.result_type(p, float))),
        w_prime_pq=lambda p, q: np.ones_like(np.asarray(p, dtype=float)),
    )


def power_distortion(beta: float) -> Distortion:
    """w(p) = p^beta for beta in (0, 1]."""
    if not 0.0 < beta <= 1.0:
        raise ValidationError("power distortion requires beta in (0, 1]")

    def w(p):
        return np.power(np.asarray(p), beta)

    def w_prime(p):
        p = np.asarray(p)
        with np.errstate(divide="ignore"):
            return beta * np.power(p, beta - 1.0)

    return Distortion(
        "power", w, w_prime, params=(beta,), w_prime_pq=lambda p, q: w_prime(p)
    )


def tversky_kahneman_distortion(delta: float) -> Distortion:
    """w(p) = p^d / (p^d + (1-p)^d)^(1/d); monotone for d > 0.279."""
    if delta <= 0.279:
        raise ValidationError("tversky-kahneman distortion needs delta > 0.279")

    def w(p):
        p = np.asarray(p)
        a = np.power(p, delta)
        b = np.power(1.0 - p, delta)
        return a / np.power(a + b, 1.0 / delta)

    # w = a * s^{-1/d}, so w' = da * s^{-1/d} - (a/d) * s^{-1/d-1} * (da + db)
    def w_prime_pq(p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        a = np.power(p, delta)
        b = np.power(q, delta)
        s = a + b
        with np.errstate(divide="ignore", invalid="ignore"):
            da = delta * np.power(p, delta - 1.0)
            db = -delta * np.power(q, delta - 1.0)
            out = da * np.power(s, -1.0 / delta) - (a / delta) * np.power(
                s, -1.0 / delta - 1.0
            ) * (da + db)
        return out

    def w_prime(p):
        p = np.asarray(p, dtype=float)
        return w_prime_pq(p, 1.0 - p)

    return Distortion(
        "tversky_kahneman", w, w_prime, params=(delta,), w_prime_pq=w_prime_pq
    )


def prelec_distortion(a: float, b: float) -> Distortion:
    """w(p) = exp(-a (-ln p)^b); violates the growth bound for b < 1."""
    if a <= 0.0 or b <= 0.0:
        raise ValidationError("prelec distortion requires a > 0 and b > 0")

    def w(p):
        p = np.asarray(p) + 0.0
        out = np.zeros_like(p)
        pos = p > 0.0
        with np.errstate(divide="ignore"):
            out[pos] = np.exp(-a * np.power(-np.log(p[pos]), b))
        out[p >= 1.0] = 1.0
        return out

    def w_prime(p):
        p = np.asarray(p, dtype=float)
        out = np.zeros_like(p)
        pos = (p > 0.0) & (p < 1.0)
        lp = -np.log(p[pos])
        out[pos] = np.exp(-a * np.power(lp, b)) * a * b * np.power(lp, b - 1.0) / p[pos]
        return out

    def w_prime_pq(p, q):
        # -log(p) recovered from the complementary probability keeps the
        # p -> 1 end accurate: -log(1 - q) = -log1p(-q)
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        out = np.zeros_like(p)
        pos = (p > 0.0) & (q > 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            lp = np.where(p[pos] < 0.5, -np.log(p[pos]), -np.log1p(-q[pos]))
        out[pos] = (
            np.exp(-a * np.power(lp, b)) * a * b * np.power(lp, b - 1.0) / p[pos]
        )
        return out

    return Distortion("prelec", w, w_prime, params=(a, b), w_prime_pq=w_prime_pq)


_DISTORTION_FACTORIES = {
    "identity": lambda params: identity_distortion(),
    "power": lambda params: power_distortion(params["beta"]),
    "tversky_kahneman": lambda params: tversky_kahneman_distortion(params["delta"]),
    "prelec": lambda params: prelec_distortion(params["a"], params["b"]),
}


def distortion_from_config(spec) -> Distortion:
    """Build a distortion from its JSON form: a bare name or
    {"name": ..., <params>}."""
    if isinstance(spec, str):
        name, params = spec, {}
    elif isinstance(spec, dict):
        if "name" not in spec:
            raise ValidationError("distortion object needs a 'name' key")
        name = spec["name"]
        params = {k: v for k, v in spec.items() if k != "name"}
    else:
        raise ValidationError(f"unrecognized distortion spec: {spec!r}")
    try:
        factory = _DISTORTION_FACTORIES[name]
    except KeyError:
        raise ValidationError(f"unknown distortion {name!r}") from None
    try:
        return factory(params)
    except KeyError as exc:
        raise ValidationError(f"distortion {name!r} missing parameter {exc}") from None


# ---------------------------------------------------------------------------
# utilities and reward payloads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpUtility:
    """u(x) = 1 - exp(-alpha x)/alpha with u'(x) = exp(-alpha x)."""

    alpha: float

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValidationError("exponential utility requires alpha > 0")

    def u(self, x):
        return 1.0 - np.exp(-self.alpha * np.asarray(x, dtype=float)) / self.alpha

    def u_prime(self, x):
        return np.exp(-self.alpha * np.asarray(x, dtype=float))


@dataclass(frozen=True)
class NonlinearExpectationReward:
    """Reward g(mu) = E g(xi) + F(E xi) with F' validated against finite
    differences of F on the declared domain interval."""

    g: Callable[[np.ndarray], np.ndarray]
    F: Callable[[float], float]
    F_prime: Callable[[float], float]
    f_domain: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self):
        lo, hi = self.f_domain
        ys = np.linspace(lo, hi, 101)
        eps = 1e-6 * max(1.0, hi - lo)
        for y in ys:
            fd = (self.F(y + eps) - self.F(y - eps)) / (2.0 * eps)
            fp = self.F_prime(y)
            if abs(fd - fp) > 1e-6 * max(1.0, abs(fp)):
                raise ValidationError(
                    f"F_prime deviates from finite differences at y={y:.3g}"
                )


def mean_variance_reward(gamma: float) -> NonlinearExpectationReward:
    """The mean-variance benchmark: g(x) = x - (gamma/2) x^2,
    F(y) = (gamma/2) y^2, so the reward equals E X - (gamma/2) Var X."""
    if gamma <= 0.0:
        raise ValidationError("mean-variance instance requires gamma > 0")
    # dtype-preserving on purpose (oracles evaluate g on long doubles)
    return NonlinearExpectationReward(
        g=lambda x: np.asarray(x) - 0.5 * gamma * np.square(np.asarray(x)),
        F=lambda y: 0.5 * gamma * y * y,
        F_prime=lambda y: gamma * y,
    )


# ---------------------------------------------------------------------------
# reward functionals on empirical measures
# ---------------------------------------------------------------------------


def rdu_value(m: EmpiricalMeasure, dist: Distortion, util: ExpUtility) -> float:
    """Rank-dependent value of an empirical law, exact for step cdfs."""
    if m.n == 0:
        raise EmptyMeasure("rdu_value needs a non-empty measure")
    if util.alpha * float(m._sorted_samples[0]) < -_EXP_GUARD:
        raise OverflowGuard("alpha * min(sample) below the exp underflow guard")
    xs = m._sorted_samples
    cw = m._cumweights
    # tail_i = weight at or above atom i (sorted ascending)
    tails = np.concatenate(([1.0], 1.0 - cw[:-1], [0.0]))
    wt = np.asarray(dist.w(np.clip(tails, 0.0, 1.0)), dtype=float)
    increments = wt[:-1] - wt[1:]
    return float(util.u(xs) @ increments - util.u(0.0))


def rdu_value_weighted(
    sorted_samples: np.ndarray,
    sorted_weights: np.ndarray,
    dist: Distortion,
    util: ExpUtility,
) -> float:
    """rdu_value on a pre-sorted support with arbitrary positive weights
    summing to one (used by the bootstrap, which reweights rather than
    resorts)."""
    cw = np.cumsum(sorted_weights)
    tails = np.concatenate(([1.0], 1.0 - cw[:-1], [0.0]))
    wt = np.asarray(dist.w(np.clip(tails, 0.0, 1.0)), dtype=float)
    return float(util.u(sorted_samples) @ (wt[:-1] - wt[1:]) - util.u(0.0))


def mean_es_value(m: EmpiricalMeasure, gamma: float, alpha0: float) -> float:
    """mean(m) - gamma * ES_{alpha0}(m)."""
    if gamma < 0.0:
        raise ValidationError("mean_es_value requires gamma >= 0")
    es = m.expected_shortfall(alpha0) if gamma != 0.0 else 0.0
    return m.mean() - gamma * es


def nonlinear_exp_value(m: EmpiricalMeasure, reward: NonlinearExpectationReward) -> float:
    """E g(xi) + F(E xi) over the empirical law."""
    if m.n == 0:
        raise EmptyMeasure("nonlinear_exp_value needs a non-empty measure")
    gx = np.asarray(reward.g(m.samples), dtype=float)
    if not np.all(np.isfinite(gx)):
        raise DomainError("g non-finite on the sample range")
    mean = m.mean()
    fy = reward.F(mean)
    if not np.isfinite(fy):
        raise DomainError("F undeclared (non-finite) at the sample mean")
    return float(m.weights @ gx + fy)


def rdu_value_gaussian_terminal(
    x: float,
    gamma: float,
    lam: float,
    dist: Distortion,
    util: ExpUtility,
    tol: float = 1e-9,
) -> float:
    """f(t, delta_x): rank-dependent value of N(x + Gamma, Lambda).

    Evaluates the two-sided integral with p(z) = 1 - Phi((z-x-Gamma)/
    sqrt(Lambda)) by adaptive quadrature; the degenerate case Lambda = 0
    returns u(x + Gamma) - u(0).
    """
    if lam < 0.0:
        raise ValidationError("rdu_value_gaussian_terminal requires Lambda >= 0")
    if lam == 0.0:
        return float(util.u(x + gamma) - util.u(0.0))
    s = np.sqrt(lam)
    loc = x + gamma
    alpha = util.alpha

    def upper(z):
        p = std_normal_cdf((loc - np.asarray(z)) / s)
        return np.asarray(dist.w(p)) * util.u_prime(z)

    def lower(z):
        p = std_normal_cdf((loc - np.asarray(z)) / s)
        return (np.asarray(dist.w(p)) - 1.0) * util.u_prime(z)

    # Effective support: the distorted Gaussian tail decays like
    # exp(-beta d^2 / (2 Lambda)) against the exp(alpha |z|) growth of u',
    # so beyond d solving beta d^2/(2L) - alpha(d + |loc|) = 60 the
    # integrand underflows; keeps the improper integrals finite-domain.
    beta = dist.growth.beta if dist.growth is not None else 0.3
    beta = max(beta, 0.05)
    a_eff = alpha * lam / beta
    d = a_eff + np.sqrt(a_eff**2 + 2.0 * lam * (60.0 + alpha * abs(loc)) / beta)
    d = max(d, 12.0 * s)
    z_lo, z_hi = loc - d, loc + d
    value = 0.0
    err = 0.0
    if z_hi > 0.0:
        v, e = integrate.quad(
            upper, max(0.0, z_lo), z_hi, epsabs=tol, epsrel=tol, limit=400
        )
        value += v
        err += e
    if z_lo < 0.0:
        v, e = integrate.quad(
            lower, z_lo, min(0.0, z_hi), epsabs=tol, epsrel=tol, limit=400
        )
        value += v
        err += e
    # plateau pieces outside [z_lo, z_hi]: w(p) ~ 1 below, ~ 0 above
    if z_lo > 0.0:
        value += float(util.u(z_lo) - util.u(0.0))
    if z_hi < 0.0:
        value += float(util.u(z_hi) - util.u(0.0))
    if err > 100.0 * max(tol, tol * abs(value)):
        raise QuadratureNonConvergence(
            f"gaussian terminal value error estimate {err:.2e} exceeds "
            f"tolerance {tol:.1e}"
        )
    return float(value)
