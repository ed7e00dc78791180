from __future__ import annotations

import warnings

import numpy as np
import pytest
from scipy import integrate

from emeq.errors import OverflowGuard, ValidationError
from emeq.measures import EmpiricalMeasure
from emeq.preferences import (
    Distortion,
    ExpUtility,
    identity_distortion,
    mean_es_value,
    mean_variance_reward,
    nonlinear_exp_value,
    power_distortion,
    prelec_distortion,
    rdu_value,
    rdu_value_gaussian_terminal,
    tversky_kahneman_distortion,
)

ALL_BUILTINS = [
    identity_distortion,
    lambda: power_distortion(0.7),
    lambda: tversky_kahneman_distortion(0.65),
    lambda: prelec_distortion(1.0, 0.5),
]


def _builtins():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return [f() for f in ALL_BUILTINS]


class TestDistortions:
    def test_normalization_integral(self):
        # int_0^1 w'(p) dp = w(1) - w(0) = 1 for every builtin, by
        # quadrature in the log substitutions p = e^{-v} (lower half) and
        # 1 - p = e^{-s} (upper half), which absorb the endpoint
        # singularities allowed by the growth bound
        ln2 = np.log(2.0)

        for dist in _builtins():

            def lower(v):
                p = max(float(np.exp(-v)), 1e-308)
                q = float(-np.expm1(-v))
                return float(dist.dw(np.array([p]), np.array([q]))[0]) * p

            def upper(s):
                q = max(float(np.exp(-s)), 1e-308)
                p = float(-np.expm1(-s))
                return float(dist.dw(np.array([p]), np.array([q]))[0]) * q

            v1, _ = integrate.quad(lower, ln2, 750.0, limit=800)
            v2, _ = integrate.quad(upper, ln2, 750.0, limit=800)
            assert v1 + v2 == pytest.approx(1.0, abs=1e-8), dist.name

    def test_invalid_distortion_rejected(self):
        with pytest.raises(ValidationError):
            Distortion("bad", w=lambda p: 0.5 * np.asarray(p), w_prime=lambda p: 0.5 * np.ones_like(p))
        with pytest.raises(ValidationError):
            # wrong derivative
            Distortion("bad2", w=lambda p: np.asarray(p), w_prime=lambda p: 2.0 * np.ones_like(p))

    def test_growth_certificate_positive(self):
        for make in (identity_distortion, lambda: power_distortion(0.5),
                     lambda: tversky_kahneman_distortion(0.65)):
            assert make().growth.ok

    def test_growth_certificate_negative_prelec(self):
        with pytest.warns(RuntimeWarning):
            d = prelec_distortion(1.0, 0.5)
        assert not d.growth.ok

    def test_monotone_validation(self):
        grid_ok = power_distortion(0.9)
        p = np.linspace(0, 1, 10_001)
        assert np.all(np.diff(grid_ok.w(p)) >= -1e-14)


class TestRduValue:
    def test_point_mass_exact(self):
        for alpha in (1.0, 2.5):
            util = ExpUtility(alpha)
            for x in (-1.0, 0.0, 2.3):
                m = EmpiricalMeasure.from_samples([x])
                for dist in (identity_distortion(), power_distortion(0.7)):
                    want = float(util.u(x) - util.u(0.0))
                    assert rdu_value(m, dist, util) == pytest.approx(want, abs=1e-15)

    def test_two_atom_square_distortion(self):
        sq = Distortion("square", w=lambda p: np.square(p), w_prime=lambda p: 2.0 * p)
        m = EmpiricalMeasure.from_samples([0.0, 1.0])
        got = rdu_value(m, sq, ExpUtility(1.0))
        assert got == pytest.approx(0.25 * (1.0 - np.exp(-1.0)), abs=1e-15)
        assert got == pytest.approx(0.15803013970713942, abs=1e-15)

    def test_identity_reduces_to_expected_utility(self, rng):
        util = ExpUtility(1.3)
        for _ in range(10):
            n = rng.integers(1, 60)
            w = rng.uniform(0.2, 1.0, n)
            m = EmpiricalMeasure.from_samples(rng.normal(size=n), w / w.sum())
            want = float(m.weights @ util.u(m.samples) - util.u(0.0))
            assert rdu_value(m, identity_distortion(), util) == pytest.approx(
                want, abs=1e-14
            )

    def test_translation_monotonicity(self, rng):
        util = ExpUtility(1.0)
        dist = tversky_kahneman_distortion(0.65)
        m = EmpiricalMeasure.from_samples(rng.normal(size=40))
        base = rdu_value(m, dist, util)
        assert rdu_value(m.shifted(0.5), dist, util) > base

    def test_overflow_guard(self):
        m = EmpiricalMeasure.from_samples([-800.0, 1.0])
        with pytest.raises(OverflowGuard):
            rdu_value(m, identity_distortion(), ExpUtility(1.0))


class TestMeanEs:
    def test_frozen_example(self):
        m = EmpiricalMeasure.from_samples([1, 2, 3, 4])
        assert mean_es_value(m, 1.0, 0.5) == pytest.approx(4.0, abs=1e-14)

    def test_point_mass(self):
        m = EmpiricalMeasure.from_samples([2.0])
        assert mean_es_value(m, 0.7, 0.1) == pytest.approx(1.7 * 2.0, abs=1e-14)

    def test_risk_neutral_limit(self, rng):
        m = EmpiricalMeasure.from_samples(rng.normal(size=17))
        assert mean_es_value(m, 0.0, 0.3) == m.mean()


class TestNonlinearExpectation:
    def test_mean_when_trivial(self, rng):
        reward = mean_variance_reward(1.0)
        trivial = type(reward)(
            g=lambda x: np.asarray(x), F=lambda y: 0.0, F_prime=lambda y: 0.0
        )
        m = EmpiricalMeasure.from_samples(rng.normal(size=9))
        assert nonlinear_exp_value(m, trivial) == pytest.approx(m.mean(), abs=1e-15)

    def test_mv_variance_decomposition(self):
        m = EmpiricalMeasure.from_samples([0.0, 2.0])
        reward = mean_variance_reward(1.0)
        got = nonlinear_exp_value(m, reward)
        assert got == pytest.approx(0.5, abs=1e-15)
        var = m.second_moment() - m.mean() ** 2
        assert got == pytest.approx(m.mean() - 0.5 * var, abs=1e-15)

    def test_point_mass_mv(self):
        m = EmpiricalMeasure.from_samples([1.3])
        assert nonlinear_exp_value(m, mean_variance_reward(2.0)) == pytest.approx(
            1.3, abs=1e-15
        )

    def test_inconsistent_f_prime_rejected(self):
        from emeq.preferences import NonlinearExpectationReward

        with pytest.raises(ValidationError):
            NonlinearExpectationReward(
                g=lambda x: np.asarray(x),
                F=lambda y: y * y,
                F_prime=lambda y: y,  # should be 2y
            )


class TestGaussianTerminal:
    def test_degenerate(self):
        util = ExpUtility(1.0)
        got = rdu_value_gaussian_terminal(0.7, 0.2, 0.0, identity_distortion(), util)
        assert got == pytest.approx(float(util.u(0.9) - util.u(0.0)), abs=1e-15)

    def test_identity_lognormal_moment(self):
        got = rdu_value_gaussian_terminal(
            0.0, 0.0, 0.09, identity_distortion(), ExpUtility(1.0)
        )
        want = 1.0 - np.exp(0.045)
        assert got == pytest.approx(want, abs=1e-8)
        assert want == pytest.approx(-0.04602785990871694, abs=1e-15)

    def test_identity_general_params(self, rng):
        # quadrature must match E u(x + G + sqrt(L) eta) - u(0) in closed form
        for _ in range(5):
            alpha = float(rng.uniform(0.5, 2.0))
            x = float(rng.normal())
            g = float(rng.uniform(-0.3, 0.5))
            lam = float(rng.uniform(0.01, 0.5))
            got = rdu_value_gaussian_terminal(
                x, g, lam, identity_distortion(), ExpUtility(alpha)
            )
            want = (
                1.0
                - np.exp(-alpha * (x + g) + 0.5 * alpha**2 * lam) / alpha
                - (1.0 - 1.0 / alpha)
            )
            assert got == pytest.approx(want, abs=1e-8)

    def test_monte_carlo_agreement_all_builtins(self, rng):
        # 10^6 draws; quadrature value inside 3 bootstrap-free normal bounds
        x, g, lam = 0.5, 0.1, 0.16
        z = rng.standard_normal(1_000_000)
        samples = x + g + np.sqrt(lam) * z
        m = EmpiricalMeasure.from_samples(samples)
        util = ExpUtility(1.0)
        for dist in _builtins():
            mc = rdu_value(m, dist, util)
            quad_val = rdu_value_gaussian_terminal(x, g, lam, dist, util)
            # rough scale of the MC standard error for these functionals
            se = np.std(util.u(samples)) / np.sqrt(samples.size) * 3.0
            assert abs(mc - quad_val) < 3.0 * max(se, 3e-4), dist.name
