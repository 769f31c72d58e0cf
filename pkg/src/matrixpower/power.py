"""Wald-test power and sample-size search for linear coefficient hypotheses.

A hypothesis R beta_full = r (R of full row rank q over the p+1 coefficients,
intercept included) is tested with the Wald statistic, asymptotically central
chi-square(q) under the null and noncentral chi-square(q, lambda) under an
alternative, with

    lambda = n * (R beta - r)' [R V R']^{-1} (R beta - r),

where V is the per-respondent covariance of the coefficient estimates, so
power at a given n is one noncentral-CDF evaluation. The minimal n achieving
a target power is found by doubling until the target is bracketed, bisecting
on the real line, then rounding up to a whole number of form allocations.

The hypothesis builders turn R^2-increase questions into PowerSpecs: the null
pins the coefficients at the base model, the alternative moves them (all
slopes scaled, or one slope alone) just enough to raise R^2 by delta. The
coefficient covariance should be evaluated at the alternative model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConstraint, DomainError, NoEffect
from .moments import RegressionModel, inflate_beta_for_r2, poke_beta_for_r2
from .numerics import chol, chisq_quantile, noncentral_chisq_cdf, symmetrize

# Effects whose scaled magnitude falls below this are treated as exact nulls.
_EFFECT_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class LinearHypothesis:
    """Null hypothesis R beta_full = r over (intercept, slopes)."""

    constraint: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        constraint = np.atleast_2d(np.asarray(self.constraint, dtype=float))
        value = np.atleast_1d(np.asarray(self.value, dtype=float))
        if constraint.shape[0] != value.size:
            raise DomainError(
                f"constraint has {constraint.shape[0]} rows but {value.size} target values"
            )
        if constraint.shape[0] > constraint.shape[1]:
            raise DegenerateConstraint("more constraints than coefficients")
        if np.linalg.matrix_rank(constraint) < constraint.shape[0]:
            raise DegenerateConstraint("constraint rows are linearly dependent")
        object.__setattr__(self, "constraint", constraint)
        object.__setattr__(self, "value", value)

    @property
    def q(self) -> int:
        return self.constraint.shape[0]


@dataclass(frozen=True, eq=False)
class PowerSpec:
    """A hypothesis, the alternative believed true, and error targets."""

    hypothesis: LinearHypothesis
    alternative: RegressionModel
    alpha: float = 0.05
    target_power: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie inside (0, 1), got {self.alpha}")
        if not 0.0 < self.target_power < 1.0:
            raise DomainError(
                f"target power must lie inside (0, 1), got {self.target_power}"
            )
        if self.target_power <= self.alpha:
            raise DomainError("target power at or below the test size is vacuous")
        if self.hypothesis.constraint.shape[1] != self.alternative.p + 1:
            raise DomainError(
                f"hypothesis spans {self.hypothesis.constraint.shape[1]} coefficients "
                f"but the model has {self.alternative.p + 1}"
            )


@dataclass(frozen=True)
class SampleSizeResult:
    n_total: int
    per_form: tuple
    achieved_power: float
    noncentrality: float


def noncentrality_rate(hypothesis: LinearHypothesis, alternative: RegressionModel,
                       cov_beta_unit) -> float:
    """Noncentrality accrued per respondent under the alternative."""
    v = symmetrize(cov_beta_unit)
    if v.shape[0] != alternative.p + 1:
        raise DomainError(
            f"covariance is {v.shape[0]}x{v.shape[0]} but the model has "
            f"{alternative.p + 1} coefficients"
        )
    diff = hypothesis.constraint @ alternative.beta_full - hypothesis.value
    middle = hypothesis.constraint @ v @ hypothesis.constraint.T
    try:
        lower = chol(middle)
    except Exception as exc:
        raise DegenerateConstraint(
            f"R cov R' is not positive definite: {exc}"
        ) from exc
    z = np.linalg.solve(lower, diff)
    return float(z @ z)


def wald_power(hypothesis: LinearHypothesis, alternative: RegressionModel,
               cov_beta_unit, n_total, alpha=0.05) -> float:
    """Power of the level-`alpha` Wald test with `n_total` respondents."""
    n_total = float(n_total)
    if n_total <= 0:
        raise DomainError(f"n_total must be positive, got {n_total}")
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie inside (0, 1), got {alpha}")
    lam = n_total * noncentrality_rate(hypothesis, alternative, cov_beta_unit)
    critical = chisq_quantile(1.0 - alpha, hypothesis.q)
    return 1.0 - noncentral_chisq_cdf(critical, hypothesis.q, lam)


def _apportion(n_total: int, allocation) -> tuple:
    """Split n_total across forms by largest remainder (ties to earlier forms)."""
    allocation = np.asarray(allocation, dtype=float)
    quotas = allocation * n_total
    base = np.floor(quotas).astype(int)
    leftover = n_total - int(base.sum())
    remainders = quotas - base
    order = np.lexsort((np.arange(allocation.size), -remainders))
    for k in order[:leftover]:
        base[k] += 1
    return tuple(int(v) for v in base)


def sample_size(spec: PowerSpec, cov_beta_unit, form_count=1, allocation=None) -> SampleSizeResult:
    """Minimal n_total hitting the target power, in whole form allocations.

    n_total is a multiple of `form_count` under uniform allocation; under an
    explicit `allocation` it is the smallest form_count multiple at which the
    target power holds, apportioned by largest remainder.
    """
    form_count = int(form_count)
    if form_count < 1:
        raise DomainError(f"form_count must be positive, got {form_count}")
    if allocation is None:
        allocation = np.full(form_count, 1.0 / form_count)
    else:
        allocation = np.asarray(allocation, dtype=float)
        if allocation.size != form_count:
            raise DomainError("allocation length must equal form_count")
        if np.any(allocation <= 0) or abs(float(allocation.sum()) - 1.0) > 1e-9:
            raise DomainError("allocation must be positive and sum to one")
    rate = noncentrality_rate(spec.hypothesis, spec.alternative, cov_beta_unit)
    diff = spec.hypothesis.constraint @ spec.alternative.beta_full - spec.hypothesis.value
    scale = max(1.0, float(np.max(np.abs(spec.hypothesis.value))),
                float(np.max(np.abs(spec.hypothesis.constraint @ spec.alternative.beta_full))))
    if float(np.max(np.abs(diff))) <= _EFFECT_ATOL * scale or rate <= 0.0:
        raise NoEffect("the alternative satisfies the null; power never exceeds alpha")

    critical = chisq_quantile(1.0 - spec.alpha, spec.hypothesis.q)

    def power_at(n):
        return 1.0 - noncentral_chisq_cdf(critical, spec.hypothesis.q, n * rate)

    # Bracket by doubling, then bisect on the real line.
    hi = float(form_count)
    while power_at(hi) < spec.target_power:
        hi *= 2.0
        if hi > 1e18:
            raise NoEffect("effect too small: no attainable sample size below 1e18")
    lo = hi / 2.0 if hi > form_count else 0.0
    while hi - lo > 0.5:
        mid = 0.5 * (lo + hi)
        if power_at(mid) < spec.target_power:
            lo = mid
        else:
            hi = mid
    n_total = form_count * int(math.ceil(lo / form_count))
    if n_total == 0:
        n_total = form_count
    # The bisection tolerance can straddle a granule boundary; walk up until
    # the target actually holds so minimality is exact.
    while power_at(n_total) < spec.target_power:
        n_total += form_count
    return SampleSizeResult(
        n_total=n_total,
        per_form=_apportion(n_total, allocation),
        achieved_power=power_at(n_total),
        noncentrality=n_total * rate,
    )


def overall_test(model: RegressionModel) -> LinearHypothesis:
    """All slopes zero (the intercept is unconstrained)."""
    p = model.p
    constraint = np.hstack([np.zeros((p, 1)), np.eye(p)])
    return LinearHypothesis(constraint, np.zeros(p))


def single_slope_test(p: int, j: int, value=0.0) -> LinearHypothesis:
    """Slope j equal to `value` (one degree of freedom)."""
    j = int(j)
    if not 0 <= j < p:
        raise IndexError(f"slope index {j} out of range [0, {p})")
    constraint = np.zeros((1, p + 1))
    constraint[0, j + 1] = 1.0
    return LinearHypothesis(constraint, np.array([float(value)]))


def r2_increase_uniform(model: RegressionModel, sigma_xx, delta,
                        alpha=0.05, target_power=0.8) -> PowerSpec:
    """Detect all slopes scaled up together to raise R^2 by `delta`.

    Null: slopes stay at the base model. Alternative: the uniformly inflated
    model. Evaluate the coefficient covariance at the alternative.
    """
    alternative = inflate_beta_for_r2(model, sigma_xx, delta)
    p = model.p
    constraint = np.hstack([np.zeros((p, 1)), np.eye(p)])
    hypothesis = LinearHypothesis(constraint, model.beta.copy())
    return PowerSpec(hypothesis, alternative, alpha=alpha, target_power=target_power)


def r2_increase_single(model: RegressionModel, sigma_xx, delta, j,
                       alpha=0.05, target_power=0.8) -> PowerSpec:
    """Detect slope j moved alone to raise R^2 by `delta` (NoRealRoot if impossible)."""
    alternative = poke_beta_for_r2(model, sigma_xx, delta, j)
    hypothesis = single_slope_test(model.p, j, value=float(model.beta[int(j)]))
    return PowerSpec(hypothesis, alternative, alpha=alpha, target_power=target_power)
