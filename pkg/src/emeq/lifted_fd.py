"""Finite-difference oracles for lifted derivatives.

Lifting f to square-integrable random variables, an N-atom uniform
empirical measure becomes a point of R^N with coordinate weights 1/N, so
moving atom i by delta changes f by

    (1/N) d_mu f(mu)(x_i) delta + (1/(2N)) d_v d_mu f(mu)(x_i) delta^2
    + O(1/N^2) + O(delta^3),

and the oracle pair is the scaled central/second difference

    d_mu^   = [f(x_i + e) - f(x_i - e)] * N / (2 e),
    d_vmu^  = [f(x_i + e) - 2 f + f(x_i - e)] * N / e^2.

The functionals are evaluated from their defining integrals on fixed
shared grids: the contribution of the N-1 untouched atoms is binned
(cloud-in-cell) and convolved once, the perturbed atom's column is exact,
and the pointwise integrand differences are accumulated in extended
precision, so the e^2/N-sized second-difference signal stays well above
the rounding floor.  Nothing here touches the closed-form derivative
paths being checked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import ValidationError
from .gaussians import HermiteRule, std_normal_cdf
from .measures import EmpiricalMeasure

_LD = np.longdouble


def _cic_bin(positions: np.ndarray, grid_lo: float, dz: float, n: int) -> np.ndarray:
    """Cloud-in-cell histogram: each unit mass split linearly between the
    two neighbouring grid slots, preserving the first moment."""
    s = (positions - grid_lo) / dz
    j = np.floor(s).astype(int)
    frac = s - j
    if np.any(j < 0) or np.any(j + 1 >= n):
        raise ValidationError("binning grid does not cover the samples")
    q = np.zeros(n)
    np.add.at(q, j, 1.0 - frac)
    np.add.at(q, j + 1, frac)
    return q / positions.size


def _binned_kernel_sum(q: np.ndarray, kern: np.ndarray, tail: str) -> np.ndarray:
    """S_j = sum_k q_k kern[(k - j) + M] plus the saturated tail mass.

    tail="above": slots with k - j > M contribute 1 (kernel saturates at 1
    upward, as for a survival function); tail="below": slots with
    k - j < -M contribute 1 (cdf orientation).
    """
    m2 = kern.size - 1  # = 2M
    conv = fftconvolve(q, kern[::-1])
    core = conv[m2 // 2 : m2 // 2 + q.size]
    csum = np.cumsum(q)
    total = csum[-1]
    j = np.arange(q.size)
    if tail == "above":
        hi = np.minimum(j + m2 // 2, q.size - 1)
        sat = total - csum[hi]
    else:
        lo = j - m2 // 2 - 1
        sat = np.where(lo >= 0, csum[np.maximum(lo, 0)], 0.0)
    return core + sat


@dataclass
class RdutFdOracle:
    """Central-difference oracle for the rank-dependent functional

        f(mu) = int w(p(z)) u'(z) dz  (two-sided normalization),
        p(z)  = (1/N) sum_i Phi((x_i + Gamma - z)/sqrt(Lambda)).
    """

    m: EmpiricalMeasure
    gamma: float
    lam: float
    dist: object
    alpha: float
    half_width: float = 10.0
    n_grid: int = 1 << 17

    def __post_init__(self):
        if self.lam <= 0.0:
            raise ValidationError("RDUT oracle requires Lambda > 0")
        if np.ptp(self.m.weights) > 1e-15:
            raise ValidationError("oracle requires uniform weights")
        s = np.sqrt(self.lam)
        self.s = s
        y = self.m.samples + self.gamma  # shifted atom positions
        reach = self.half_width * s + 1e-3
        lo = float(np.min(y)) - reach - 4.0 * s
        hi = float(np.max(y)) + reach + 4.0 * s
        self.dz = (hi - lo) / (self.n_grid - 1)
        self.grid = lo + self.dz * np.arange(self.n_grid)
        self.M = int(np.ceil(self.half_width * s / self.dz)) + 1
        q = _cic_bin(y, lo, self.dz, self.n_grid)
        m_off = np.arange(-self.M, self.M + 1)
        kern = std_normal_cdf(m_off * self.dz / s)
        self.kern_m = self.M
        self.p_binned = _binned_kernel_sum(q, kern, tail="above")
        self.uprime = np.exp(-self.alpha * self.grid)

    def _atom_binned_column(self, xi: float, window: slice) -> np.ndarray:
        """Exactly the contribution the binned sum assigned to atom xi:
        the slot/fraction arithmetic mirrors the binning bit for bit."""
        n = self.m.n
        zi = (xi + self.gamma - self.grid[0]) / self.dz  # as in _cic_bin
        j = int(np.floor(zi))
        frac = zi - j
        jw = np.arange(window.start, window.stop)
        out = np.zeros(jw.size)
        for slot, mass in ((j, 1.0 - frac), (j + 1, frac)):
            moff = slot - jw
            vals = np.where(
                moff > self.kern_m,
                1.0,
                np.where(moff < -self.kern_m, 0.0, std_normal_cdf(moff * self.dz / self.s)),
            )
            out += mass * vals
        return out / n

    def derivative_pair(self, i: int, eps: float = 1e-4):
        """(d_mu^, d_vmu^) at y = samples[i]."""
        n = self.m.n
        xi = float(self.m.samples[i])
        yi = xi + self.gamma
        reach = self.half_width * self.s + 2.0 * eps
        j_lo = max(0, int(np.searchsorted(self.grid, yi - reach)) - 1)
        j_hi = min(self.n_grid, int(np.searchsorted(self.grid, yi + reach)) + 2)
        window = slice(j_lo, j_hi)
        zg = self.grid[window]
        p_others = self.p_binned[window] - self._atom_binned_column(xi, window)

        def col(x0: float) -> np.ndarray:
            return std_normal_cdf((x0 + self.gamma - zg) / self.s) / n

        p0 = np.clip(p_others + col(xi), 0.0, 1.0).astype(_LD)
        pp = np.clip(p_others + col(xi + eps), 0.0, 1.0).astype(_LD)
        pm = np.clip(p_others + col(xi - eps), 0.0, 1.0).astype(_LD)
        w = self.dist.w
        up = self.uprime[window].astype(_LD)
        trap = np.full(zg.size, _LD(self.dz))
        trap[0] *= 0.5
        trap[-1] *= 0.5
        d_plus = float(np.sum((np.asarray(w(pp)) - np.asarray(w(p0))) * up * trap))
        d_minus = float(np.sum((np.asarray(w(pm)) - np.asarray(w(p0))) * up * trap))
        d_mu = n * (d_plus - d_minus) / (2.0 * eps)
        d_vd = n * (d_plus + d_minus) / (eps * eps)
        return d_mu, d_vd


@dataclass
class MesFdOracle:
    """Central-difference oracle for the mean-ES functional

        f(mu) = E X_T + (gamma/alpha0) int_0^{alpha0} F^{-1}_{X_T}(a) da

    with X_T = floor + (xi - floor) exp(Gamma1 + sqrt(Lambda1) eta).  The
    cdf of X_T is a translation mixture in the log coordinate, handled by
    the same binned convolution; quantiles come from monotone
    interpolation on a fixed log-space grid and the quantile integral uses
    fixed Gauss-Legendre nodes, so the discretization error cancels
    between the base and perturbed evaluations.
    """

    m: EmpiricalMeasure
    gamma1: float
    lam1: float
    gamma: float
    alpha0: float
    floor: float
    half_width: float = 10.0
    n_grid: int = 1 << 17
    n_gl: int = 64

    def __post_init__(self):
        if self.lam1 <= 0.0:
            raise ValidationError("MES oracle requires Lambda1 > 0")
        if np.any(self.m.samples <= self.floor):
            raise ValidationError("MES oracle requires samples above the floor")
        if np.ptp(self.m.weights) > 1e-15:
            raise ValidationError("oracle requires uniform weights")
        s = np.sqrt(self.lam1)
        self.s = s
        ylog = np.log(self.m.samples - self.floor) + self.gamma1
        reach = self.half_width * s + 1e-2
        lo = float(np.min(ylog)) - reach - 4.0 * s
        hi = float(np.max(ylog)) + reach + 4.0 * s
        self.dz = (hi - lo) / (self.n_grid - 1)
        self.zgrid = lo + self.dz * np.arange(self.n_grid)
        self.M = int(np.ceil(self.half_width * s / self.dz)) + 1
        q = _cic_bin(ylog, lo, self.dz, self.n_grid)
        m_off = np.arange(-self.M, self.M + 1)
        # F_j = sum_k q_k Phi((z_j - z_k)/s): the kernel in m = k - j is
        # Phi(-m dz / s) and saturates to 1 for atoms far below (k < j - M)
        kern = std_normal_cdf(-m_off * self.dz / s)
        self.F_binned = _binned_kernel_sum(q, kern, tail="below")
        gl_x, gl_w = np.polynomial.legendre.leggauss(self.n_gl)
        self.gl_alpha = 0.5 * self.alpha0 * (gl_x + 1.0)
        self.gl_w = 0.5 * self.alpha0 * gl_w
        # E exp(Gamma1 + sqrt(Lambda1) eta) by quadrature (mean-part slope)
        rule = HermiteRule.of_order(80)
        self.mean_factor = float(
            rule.weights @ np.exp(self.gamma1 + s * rule.nodes)
        )

    def _atom_binned_column(self, ylog_i: float) -> np.ndarray:
        n = self.m.n
        zi = (ylog_i - self.zgrid[0]) / self.dz
        j = int(np.floor(zi))
        frac = zi - j
        jw = np.arange(self.n_grid)
        out = np.zeros(self.n_grid)
        for slot, mass in ((j, 1.0 - frac), (j + 1, frac)):
            moff = jw - slot  # = j_grid - k_atom
            vals = np.where(
                moff > self.M,
                1.0,
                np.where(
                    moff < -self.M,
                    0.0,
                    std_normal_cdf(moff * self.dz / self.s),
                ),
            )
            out += mass * vals
        return out / n

    def _quantiles(self, F: np.ndarray) -> np.ndarray:
        """Monotone linear interpolation of the alpha-nodes in log space,
        in extended precision."""
        idx = np.searchsorted(F, self.gl_alpha, side="left")
        idx = np.clip(idx, 1, F.size - 1)
        f_lo = F[idx - 1].astype(_LD)
        f_hi = F[idx].astype(_LD)
        z_lo = self.zgrid[idx - 1].astype(_LD)
        z_hi = self.zgrid[idx].astype(_LD)
        t = (self.gl_alpha.astype(_LD) - f_lo) / (f_hi - f_lo)
        return z_lo + t * (z_hi - z_lo)

    def _es_part(self, F: np.ndarray) -> _LD:
        zq = self._quantiles(F)
        xq = _LD(self.floor) + np.exp(zq)
        return np.sum(self.gl_w.astype(_LD) * xq) * _LD(self.gamma / self.alpha0)

    def derivative_pair(self, i: int, eps: float = 1e-4):
        n = self.m.n
        xi = float(self.m.samples[i])
        yi = np.log(xi - self.floor) + self.gamma1
        base_col = self._atom_binned_column(yi)
        F_others = self.F_binned - base_col

        def F_with(x0: float) -> np.ndarray:
            yl = np.log(x0 - self.floor) + self.gamma1
            col = std_normal_cdf((self.zgrid - yl) / self.s) / n
            return np.clip(F_others + col, 0.0, 1.0)

        es_0 = self._es_part(F_with(xi))
        es_p = self._es_part(F_with(xi + eps))
        es_m = self._es_part(F_with(xi - eps))
        # mean part is exactly linear in the atom position
        mean_slope = self.mean_factor / n
        d_plus = float(es_p - es_0) + mean_slope * eps
        d_minus = float(es_m - es_0) - mean_slope * eps
        d_mu = n * (d_plus - d_minus) / (2.0 * eps)
        d_vd = n * (d_plus + d_minus) / (eps * eps)
        return d_mu, d_vd


@dataclass
class NonlexpFdOracle:
    """Central-difference oracle for f(mu) = E g(X_T) + F(E X_T) under the
    amount-invested dynamics, with h1(t, x) = E g(x + Gamma + sqrt(Lambda) Z)
    evaluated by Gauss-Hermite quadrature (never through the derivative
    closed forms under test)."""

    m: EmpiricalMeasure
    gamma: float
    lam: float
    reward: object
    gh_order: int = 120

    def __post_init__(self):
        if np.ptp(self.m.weights) > 1e-15:
            raise ValidationError("oracle requires uniform weights")
        rule = HermiteRule.of_order(self.gh_order)
        self.gh_nodes = rule.nodes.astype(_LD)
        self.gh_weights = rule.weights.astype(_LD)
        s = np.sqrt(max(self.lam, 0.0))
        self.shift = _LD(self.gamma) + _LD(s) * self.gh_nodes
        x = self.m.samples.astype(_LD)
        self.h2_mean = np.mean(x) + _LD(self.gamma)

    def _h1(self, x0) -> _LD:
        return np.sum(self.gh_weights * np.asarray(self.reward.g(_LD(x0) + self.shift)))

    def derivative_pair(self, i: int, eps: float = 1e-4):
        n = self.m.n
        xi = float(self.m.samples[i])
        h1_0 = self._h1(xi)
        h1_p = self._h1(xi + eps)
        h1_m = self._h1(xi - eps)
        F = self.reward.F
        m2 = self.h2_mean
        de = _LD(eps) / n
        f_0 = _LD(F(m2))
        d_plus = (h1_p - h1_0) / n + (_LD(F(m2 + de)) - f_0)
        d_minus = (h1_m - h1_0) / n + (_LD(F(m2 - de)) - f_0)
        d_mu = float(n * (d_plus - d_minus) / (2.0 * _LD(eps)))
        d_vd = float(n * (d_plus + d_minus) / _LD(eps) ** 2)
        return d_mu, d_vd
