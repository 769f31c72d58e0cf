"""Tests for Wald power and the sample-size search.

The main oracle is the one-degree-of-freedom identity: for a single
constraint the Wald test is the two-sided z test, so the closed form
n = (z_{1-alpha/2} + z_{power})^2 V / effect^2 must agree with the search to
one granule. Noncentrality 7.84888 = (1.959964 + 0.841621)^2 pins 80% power.
"""

import math

import numpy as np
import pytest

from matrixpower.design import builtin_bigfive
from matrixpower.errors import DegenerateConstraint, DomainError, NoEffect
from matrixpower.moments import (
    RegressionModel,
    bigfive_correlation,
    build_moments,
    r_squared,
)
from matrixpower.asymptotics import report
from matrixpower.numerics import normal_quantile
from matrixpower.power import (
    LinearHypothesis,
    PowerSpec,
    SampleSizeResult,
    _apportion,
    noncentrality_rate,
    overall_test,
    r2_increase_single,
    r2_increase_uniform,
    sample_size,
    single_slope_test,
    wald_power,
)

BIG5 = bigfive_correlation()


def slope_model(p=1, beta=1.0, sigma2=1.0):
    return RegressionModel(0.0, np.full(p, beta), sigma2)


def unit_cov(p):
    return np.eye(p + 1)


class TestWaldPower:
    def test_power_at_null_equals_alpha(self):
        h = single_slope_test(1, 0, value=1.0)
        model = slope_model()
        for alpha in (0.01, 0.05, 0.2):
            assert math.isclose(
                wald_power(h, model, unit_cov(1), 100.0, alpha=alpha), alpha, abs_tol=1e-10
            )

    def test_eighty_percent_noncentrality(self):
        # lambda = (z_{0.975} + z_{0.8})^2 = 7.84888 gives 80% power at q=1.
        lam = (normal_quantile(0.975) + normal_quantile(0.8)) ** 2
        assert math.isclose(lam, 7.84888, abs_tol=5e-6)
        h = single_slope_test(1, 0)  # null: slope 0
        model = slope_model(beta=1.0)
        # V = 1 per respondent, so n = lambda gives noncentrality lambda.
        assert math.isclose(wald_power(h, model, unit_cov(1), lam), 0.80, abs_tol=1e-3)

    def test_monotone_in_n(self):
        h = single_slope_test(1, 0)
        model = slope_model(beta=0.3)
        powers = [wald_power(h, model, unit_cov(1), n) for n in (10, 50, 200, 1000)]
        assert all(a < b for a, b in zip(powers, powers[1:]))

    def test_continuity_to_alpha_for_vanishing_effect(self):
        h = single_slope_test(1, 0)
        for eps in (1e-3, 1e-5):
            p = wald_power(h, slope_model(beta=eps), unit_cov(1), 50.0)
            assert abs(p - 0.05) < 0.01

    def test_noncentrality_rate_quadratic_form(self):
        # Two correlated coefficients: rate = d' M^{-1} d with M = R V R'.
        v = np.array(
            [
                [1.0, 0.0, 0.0],
                [0.0, 2.0, 0.5],
                [0.0, 0.5, 1.0],
            ]
        )
        model = RegressionModel(0.0, [0.3, -0.2], 1.0)
        h = overall_test(model)
        m = v[1:, 1:]
        d = np.array([0.3, -0.2])
        oracle = float(d @ np.linalg.solve(m, d))
        assert math.isclose(noncentrality_rate(h, model, v), oracle, rel_tol=1e-12)

    def test_degenerate_middle_matrix(self):
        v = np.zeros((2, 2))
        v[0, 0] = 1.0  # slope variance is exactly zero
        h = single_slope_test(1, 0)
        with pytest.raises(DegenerateConstraint):
            wald_power(h, slope_model(beta=0.5), v, 100.0)

    def test_bad_n(self):
        h = single_slope_test(1, 0)
        with pytest.raises(DomainError):
            wald_power(h, slope_model(), unit_cov(1), 0.0)


class TestHypothesisConstruction:
    def test_overall_test_leaves_intercept_free(self):
        h = overall_test(slope_model(p=4))
        assert h.q == 4
        assert np.all(h.constraint[:, 0] == 0.0)
        assert np.array_equal(h.constraint[:, 1:], np.eye(4))

    def test_dependent_rows_rejected(self):
        row = np.array([[0.0, 1.0], [0.0, 1.0]])
        with pytest.raises(DegenerateConstraint):
            LinearHypothesis(row, np.zeros(2))

    def test_more_constraints_than_coefficients(self):
        with pytest.raises(DegenerateConstraint):
            LinearHypothesis(np.eye(3, 2), np.zeros(3))

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            LinearHypothesis(np.eye(2), np.zeros(3))

    def test_power_spec_validation(self):
        h = single_slope_test(1, 0)
        model = slope_model()
        with pytest.raises(DomainError):
            PowerSpec(h, model, alpha=0.0)
        with pytest.raises(DomainError):
            PowerSpec(h, model, target_power=1.0)
        with pytest.raises(DomainError):
            PowerSpec(h, model, alpha=0.5, target_power=0.3)
        with pytest.raises(DomainError):
            PowerSpec(single_slope_test(3, 0), model)


class TestSampleSize:
    def closed_form_n(self, effect, variance, alpha, power):
        z = normal_quantile(1.0 - alpha / 2.0) + normal_quantile(power)
        return z * z * variance / (effect * effect)

    def test_matches_z_test_closed_form_grid(self):
        cases = [
            (effect, variance, alpha, power)
            for effect in (0.05, 0.1, 0.2, 0.35, 0.5)
            for variance in (1.0, 4.0)
            for alpha, power in ((0.05, 0.8), (0.01, 0.9))
        ]
        assert len(cases) == 20
        for effect, variance, alpha, power in cases:
            model = slope_model(beta=effect)
            v = np.diag([1.0, variance])
            spec = PowerSpec(single_slope_test(1, 0), model, alpha=alpha, target_power=power)
            result = sample_size(spec, v)
            oracle = math.ceil(self.closed_form_n(effect, variance, alpha, power))
            assert abs(result.n_total - oracle) <= 1

    def test_minimality_one_granule_below_fails(self):
        model = slope_model(beta=0.25)
        spec = PowerSpec(single_slope_test(1, 0), model)
        for form_count in (1, 3, 10):
            result = sample_size(spec, unit_cov(1), form_count=form_count)
            assert result.n_total % form_count == 0
            assert result.achieved_power >= 0.8
            if result.n_total > form_count:
                below = wald_power(
                    spec.hypothesis, model, unit_cov(1), result.n_total - form_count
                )
                assert below < 0.8

    def test_quadrupling_under_half_effect(self):
        spec_full = PowerSpec(single_slope_test(1, 0), slope_model(beta=0.2))
        spec_half = PowerSpec(single_slope_test(1, 0), slope_model(beta=0.1))
        n_full = sample_size(spec_full, unit_cov(1)).n_total
        n_half = sample_size(spec_half, unit_cov(1)).n_total
        assert abs(n_half - 4 * n_full) <= 4

    def test_granule_rounding(self):
        model = slope_model(beta=0.3)
        spec = PowerSpec(single_slope_test(1, 0), model)
        plain = sample_size(spec, unit_cov(1)).n_total
        granular = sample_size(spec, unit_cov(1), form_count=10)
        assert granular.n_total == 10 * math.ceil(plain / 10) or granular.n_total == 10 * math.floor(plain / 10)
        assert granular.achieved_power >= 0.8

    def test_no_effect(self):
        model = slope_model(beta=0.4)
        null_at_truth = single_slope_test(1, 0, value=0.4)
        with pytest.raises(NoEffect):
            sample_size(PowerSpec(null_at_truth, model), unit_cov(1))

    def test_apportionment_largest_remainder(self):
        assert _apportion(7, [0.5, 0.3, 0.2]) == (4, 2, 1)
        assert _apportion(1, [0.5, 0.5]) == (1, 0)  # tie goes to the earlier form
        assert _apportion(100, np.full(10, 0.1)) == (10,) * 10

    def test_per_form_sums_to_total(self):
        model = slope_model(beta=0.15)
        spec = PowerSpec(single_slope_test(1, 0), model)
        allocation = np.array([0.5, 0.25, 0.25])
        result = sample_size(spec, unit_cov(1), form_count=3, allocation=allocation)
        assert sum(result.per_form) == result.n_total
        assert isinstance(result, SampleSizeResult)
        assert result.noncentrality > 0

    def test_bad_allocation(self):
        model = slope_model(beta=0.15)
        spec = PowerSpec(single_slope_test(1, 0), model)
        with pytest.raises(DomainError):
            sample_size(spec, unit_cov(1), form_count=2, allocation=[0.7, 0.7])


class TestR2IncreaseSpecs:
    def base_model(self):
        beta = np.array([0.3, 0.0, 0.0, 0.3, 0.0])
        return RegressionModel(0.0, beta, 1.224)  # R^2 = 0.15

    def test_uniform_null_pins_base_slopes(self):
        model = self.base_model()
        spec = r2_increase_uniform(model, BIG5, 0.01)
        assert spec.hypothesis.q == 5
        assert np.allclose(spec.hypothesis.value, model.beta)
        assert math.isclose(r_squared(spec.alternative, BIG5), 0.16, abs_tol=1e-12)

    def test_uniform_zero_delta_has_no_effect(self):
        model = self.base_model()
        spec = r2_increase_uniform(model, BIG5, 0.0)
        with pytest.raises(NoEffect):
            sample_size(spec, np.eye(6))

    def test_single_moves_one_slope(self):
        model = self.base_model()
        spec = r2_increase_single(model, BIG5, 0.01, 2)
        assert spec.hypothesis.q == 1
        assert math.isclose(spec.hypothesis.value[0], 0.0, abs_tol=0.0)
        assert math.isclose(r_squared(spec.alternative, BIG5), 0.16, abs_tol=1e-10)
        moved = spec.alternative.beta != model.beta
        assert list(np.flatnonzero(moved)) == [2]

    def test_bigfive_pipeline_sample_sizes_are_plausible(self):
        # End-to-end: uniform delta = 0.01 at R^2 = 0.15 under the ten-form
        # plan needs on the order of 1e5 respondents.
        model = self.base_model()
        design = builtin_bigfive()
        spec = r2_increase_uniform(model, BIG5, 0.01)
        m_alt = build_moments(np.zeros(5), BIG5, spec.alternative)
        rep = report(m_alt, design, 1.0)
        result = sample_size(
            spec, rep.cov_beta_unit, design.form_count, design.allocation
        )
        assert result.n_total % 10 == 0
        assert 3e4 < result.n_total < 3e6
        complete = sample_size(spec, rep.cov_beta_complete_unit)
        assert complete.n_total < result.n_total
