"""Gaussian special functions and quadrature kernels.

Everything downstream that touches a normal law goes through here: the
cdf/pdf/inverse-cdf triple, Gauss-Hermite expectations E f(eta) for
eta ~ N(0,1), the distorted-tail pair

    h(x)  = E w'(Phi(eta)) exp(alpha * eta * x),
    h'(x) = alpha * E w'(Phi(eta)) * eta * exp(alpha * eta * x),

the Gaussian-mixture tail probability p_mu, the lognormal conditional-cdf
kernel H with its first two y-derivatives, and the closed forms

    F1(x) = exp(x^2/2)
    F2(x) = exp(x^2/2) * Phi(Phi^{-1}(a0) - x)
    F3(x) = -(1/x) exp(x^2/2) * pdf(Phi^{-1}(a0) - x)

used by the mean-ES solver.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import special

from .errors import (
    DomainError,
    FloorSingularity,
    NonFiniteNode,
    QuadratureNonConvergence,
)

_SQRT2 = np.sqrt(2.0)
_SQRT2PI = np.sqrt(2.0 * np.pi)

# Phi saturates to 0/1 in floats at extreme quadrature nodes; distortion
# derivatives may blow up at the closed endpoints, so probabilities fed to
# w' stay inside the open interval at float resolution.
_P_FLOOR = 1e-300
_P_CEIL = float(np.nextafter(1.0, 0.0))


def _open_unit_clip(p: np.ndarray) -> np.ndarray:
    return np.clip(p, _P_FLOOR, _P_CEIL)

# Escalation ladder for the adaptive Gauss-Hermite pair; successive orders
# must agree to _GH_RTOL relative before a value is accepted.
GH_ORDERS = (20, 40, 80, 160)
_GH_RTOL = 1e-10


def std_normal_cdf(x):
    """Phi(x), complementary-error-function based (|error| <= 1e-15)."""
    return special.ndtr(x)


def std_normal_pdf(x):
    """phi(x) = exp(-x^2/2) / sqrt(2*pi)."""
    return np.exp(-0.5 * np.square(x)) / _SQRT2PI


def std_normal_ppf(p):
    """Phi^{-1}(p) for p in (0, 1)."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DomainError("std_normal_ppf requires p in (0, 1)")
    out = special.ndtri(p)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class HermiteRule:
    """Nodes/weights for expectations against the standard normal density.

    Weights are normalized to sum to one, so ``sum(w * f(nodes))``
    approximates E f(eta), eta ~ N(0,1), exactly for polynomials of degree
    <= 2*order - 1.
    """

    order: int
    nodes: np.ndarray
    weights: np.ndarray

    @staticmethod
    def of_order(n: int) -> "HermiteRule":
        return _hermite_rule_cached(int(n))


@lru_cache(maxsize=32)
def _hermite_rule_cached(n: int) -> HermiteRule:
    # physicists' rule integrates against exp(-x^2); rescale to the
    # standard normal density
    x, w = np.polynomial.hermite.hermgauss(n)
    nodes = _SQRT2 * x
    weights = w / np.sqrt(np.pi)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return HermiteRule(order=n, nodes=nodes, weights=weights)


def gh_expectation(f: Callable[[np.ndarray], np.ndarray], rule: HermiteRule) -> float:
    """E f(eta) for eta ~ N(0,1) by the given Gauss-Hermite rule."""
    vals = np.asarray(f(rule.nodes), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise NonFiniteNode("integrand non-finite at a Gauss-Hermite node")
    return float(np.dot(rule.weights, vals))


def _dw_at_nodes(dist_or_wprime, eta: np.ndarray) -> np.ndarray:
    """w' evaluated at Phi(eta), using the distortion's two-argument form
    (accurate complementary probability) when available."""
    p = _open_unit_clip(std_normal_cdf(eta))
    if hasattr(dist_or_wprime, "dw"):
        q = _open_unit_clip(std_normal_cdf(-eta))
        wp = np.asarray(dist_or_wprime.dw(p, q), dtype=float)
    else:
        wp = np.asarray(dist_or_wprime(p), dtype=float)
    if not np.all(np.isfinite(wp)):
        raise NonFiniteNode("w' non-finite at a Gauss-Hermite node")
    return wp


def _h_pair_at_order(dist_or_wprime, alpha: float, x: float, rule: HermiteRule):
    eta = rule.nodes
    wp = _dw_at_nodes(dist_or_wprime, eta)
    e = np.exp(alpha * eta * x)
    h = float(np.dot(rule.weights, wp * e))
    hp = alpha * float(np.dot(rule.weights, wp * eta * e))
    return h, hp


def h_pair(dist_or_wprime, alpha: float, x: float) -> tuple[float, float]:
    """(h(x), h'(x)) with adaptive order escalation.

    Accepts a Distortion (preferred: its two-argument derivative survives
    Phi saturating near one) or a bare w' callable.  Escalates through
    GH_ORDERS until two successive orders agree to 1e-10 relative on both
    values; raises QuadratureNonConvergence otherwise.  The Gaussian
    weight tames the endpoint singularity of w' allowed by the distortion
    growth bound, so no change of variable is performed.
    """
    if x < 0:
        raise DomainError("h_pair requires x >= 0")
    prev = None
    for n in GH_ORDERS:
        cur = _h_pair_at_order(dist_or_wprime, alpha, x, HermiteRule.of_order(n))
        if prev is not None:
            ok_h = abs(cur[0] - prev[0]) <= _GH_RTOL * max(abs(cur[0]), 1e-300)
            ok_hp = abs(cur[1] - prev[1]) <= max(
                _GH_RTOL * abs(cur[1]), 1e-13 * max(abs(cur[0]), 1.0)
            )
            if ok_h and ok_hp:
                return cur
        prev = cur
    raise QuadratureNonConvergence(
        f"h_pair did not stabilize to {_GH_RTOL} relative at order {GH_ORDERS[-1]}"
    )


def h_series_coeffs(dist_or_wprime, alpha: float) -> tuple[float, float, float]:
    """(h(0), h'(0), h''(0)) by quadrature.

    h(0) = E w'(Phi(eta)) = 1 for a valid distortion; h'(0) and
    h''(0) = alpha^2 E w'(Phi(eta)) eta^2 drive the 0/0 limit of
    h(x)/h'(x) near x = 0.
    """
    prev = None
    for n in GH_ORDERS:
        rule = HermiteRule.of_order(n)
        eta = rule.nodes
        wp = _dw_at_nodes(dist_or_wprime, eta)
        h0 = float(np.dot(rule.weights, wp))
        h1 = alpha * float(np.dot(rule.weights, wp * eta))
        h2 = alpha * alpha * float(np.dot(rule.weights, wp * eta * eta))
        cur = (h0, h1, h2)
        if prev is not None and all(
            abs(c - p) <= _GH_RTOL * max(abs(c), 1.0) for c, p in zip(cur, prev)
        ):
            return cur
        prev = cur
    raise QuadratureNonConvergence("h series coefficients did not stabilize")


def _mixture_cdf_sum(z, gamma: float, lam: float, samples, weights, sign: float):
    if lam <= 0.0:
        raise DomainError("p_mu requires Lambda > 0")
    zarr = np.asarray(z, dtype=float)
    scalar = zarr.ndim == 0
    zflat = np.atleast_1d(zarr).ravel()
    x = np.asarray(samples, dtype=float)
    w = np.asarray(weights, dtype=float)
    s = np.sqrt(lam)
    out = np.empty(zflat.shape)
    chunk = max(1, int(4_000_000 // max(x.size, 1)))
    for i0 in range(0, zflat.size, chunk):
        zc = zflat[i0 : i0 + chunk, None]
        out[i0 : i0 + chunk] = std_normal_cdf(sign * (x[None, :] + gamma - zc) / s) @ w
    if scalar:
        return float(out[0])
    return out.reshape(zarr.shape)


def p_mu(z, gamma: float, lam: float, samples, weights):
    """P(xi + gamma + sqrt(lam) * eta >= z) for xi ~ the weighted samples.

    Vectorized over z (chunked so the z-by-sample product stays bounded);
    lam must be positive.
    """
    return _mixture_cdf_sum(z, gamma, lam, samples, weights, +1.0)


def p_mu_complement(z, gamma: float, lam: float, samples, weights):
    """1 - p_mu computed directly (accurate where p_mu saturates to 1)."""
    return _mixture_cdf_sum(z, gamma, lam, samples, weights, -1.0)


def H_kernel(y: float, z, gamma1: float, lam1: float, floor: float):
    """(H, dH/dy, d2H/dy2) of the lognormal conditional-cdf kernel.

    H(t, y, z) is the probability that the terminal state exceeds z given
    the current state y, under the proportional dynamics above the floor:

        z > floor: H = 1 - Phi((log(z-floor) - log(y-floor) - G1)/sqrt(L1))
                   for y > floor, else 0
        z = floor: H = 1_{y <= floor}
        z < floor: H = 1_{y >= floor} + Phi((log(floor-z) - log(floor-y)
                   - G1)/sqrt(L1)) for y < floor

    Derivatives follow the explicit branch-wise expressions; vectorized
    over z.
    """
    if lam1 <= 0.0:
        raise DomainError("H_kernel requires Lambda1 > 0")
    z = np.asarray(z, dtype=float)
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    if np.any(z == floor):
        raise FloorSingularity("H_kernel undefined at z equal to the floor")
    s = np.sqrt(lam1)
    H = np.empty(z.shape)
    Hy = np.zeros(z.shape)
    Hyy = np.zeros(z.shape)

    above = z > floor
    below = ~above
    if y > floor:
        if np.any(above):
            arg = (np.log(z[above] - floor) - np.log(y - floor) - gamma1) / s
            pdf = std_normal_pdf(arg)
            H[above] = 1.0 - std_normal_cdf(arg)
            Hy[above] = pdf / ((y - floor) * s)
            Hyy[above] = pdf / ((y - floor) ** 2 * s) * (arg / s - 1.0)
        H[below] = 1.0
    elif y < floor:
        H[above] = 0.0
        if np.any(below):
            arg = (np.log(floor - z[below]) - np.log(floor - y) - gamma1) / s
            pdf = std_normal_pdf(arg)
            H[below] = std_normal_cdf(arg)
            Hy[below] = pdf / ((floor - y) * s)
            Hyy[below] = -pdf / ((y - floor) ** 2 * s) * (arg / s - 1.0)
    else:
        # y exactly at the floor: the kernel is the indicator in z only
        H[above] = 0.0
        H[below] = 1.0
    if scalar:
        return float(H[0]), float(Hy[0]), float(Hyy[0])
    return H, Hy, Hyy


def dy_H_bound(gamma1: float, lam1: float) -> float:
    """Constant C with |dH/dy| <= C / |z - floor| for all y."""
    return float(np.exp(gamma1 + 0.5 * lam1) / (_SQRT2PI * np.sqrt(lam1)))


def F123(x: float, alpha0: float) -> tuple[float, float, float]:
    """Closed forms of the truncated Gaussian exponential moments.

    F1(x) = E exp(eta x); F2, F3 integrate exp(x z) * phi(z) (times
    (z/x - 1) for F3) over z < Phi^{-1}(alpha0).  Requires x > 0.
    """
    if x <= 0.0:
        raise DomainError("F123 requires x > 0")
    if not 0.0 < alpha0 < 1.0:
        raise DomainError("F123 requires alpha0 in (0, 1)")
    c = std_normal_ppf(alpha0)
    e = np.exp(0.5 * x * x)
    f1 = e
    f2 = e * std_normal_cdf(c - x)
    f3 = -e * std_normal_pdf(c - x) / x
    return float(f1), float(f2), float(f3)


def truncated_exp_moments(x: float, upper: float) -> tuple[float, float]:
    """(I0, I1) with I0 = int_{-inf}^{upper} e^{xz} phi(z) dz and
    I1 the same integral against (z/x - 1).

    Generalizes F2/F3 to an arbitrary upper limit; F123(x, a0) is the case
    upper = Phi^{-1}(a0).
    """
    if x <= 0.0:
        raise DomainError("truncated_exp_moments requires x > 0")
    e = np.exp(0.5 * x * x)
    i0 = e * std_normal_cdf(upper - x)
    i1 = -e * std_normal_pdf(upper - x) / x
    return float(i0), float(i1)
