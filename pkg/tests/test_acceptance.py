"""Acceptance checks: the ten guarantees this package ships under.

One test per criterion, numbered, so a verbose run prints one pass/fail line
each. Tolerances are pinned here and nowhere else; the two Monte Carlo
workhorses (the 1000-draw analytic sweep and the 300-replicate microdata
comparison) run once as module fixtures and are shared by the criteria that
read them. Every expected value is either closed form, an independently
assembled oracle, or a pinned anchor for the built-in demonstration setting;
nothing is regression-locked against the implementation itself.
"""

import math
import time

import numpy as np
import pytest

from matrixpower.asymptotics import (
    grad_beta,
    information,
    pattern_loglik,
    report,
    tau_from_subset,
)
from matrixpower.design import Design, Form, builtin_bigfive
from matrixpower.errors import SingularInformation
from matrixpower.experiments import (
    ExploreConfig,
    SimConfig,
    explore,
    population_model,
    simulate,
)
from matrixpower.moments import (
    MomentStructure,
    RegressionModel,
    VechIndex,
    bigfive_correlation,
    build_moments,
    regression_from_moments,
)
from matrixpower.numerics import chol, normal_quantile
from matrixpower.power import (
    PowerSpec,
    r2_increase_single,
    sample_size,
    single_slope_test,
)

SLOPE_SE_ANCHORS = (0.0791, 0.0856, 0.0926, 0.0824, 0.0832)
SLOPE_SE_TOL = 5e-4
FMI_ANCHOR = 0.736
FMI_TOL = 0.010


def design_one():
    """Three forms, one regressor each: no regressor pair ever co-observed."""
    third = 1.0 / 3.0
    return Design(
        variables=("x1", "x2", "x3"),
        outcome="y",
        forms=(
            Form("1", ("x1",), third),
            Form("2", ("x2",), third),
            Form("3", ("x3",), third),
        ),
    )


def design_two():
    """Three forms, each dropping one regressor: every pair co-observed."""
    third = 1.0 / 3.0
    return Design(
        variables=("x1", "x2", "x3"),
        outcome="y",
        forms=(
            Form("1", ("x2", "x3"), third),
            Form("2", ("x1", "x3"), third),
            Form("3", ("x1", "x2"), third),
        ),
    )


def random_pd_moments(rng, p):
    a = rng.standard_normal((p, p + 2))
    sigma_xx = a @ a.T / (p + 2) + 0.4 * np.eye(p)
    model = RegressionModel(
        beta0=float(rng.standard_normal()),
        beta=rng.standard_normal(p),
        sigma2=float(0.3 + rng.random()),
    )
    return build_moments(rng.standard_normal(p), sigma_xx, model)


def theta_of(m):
    vech = VechIndex(m.p)
    theta = np.empty(vech.n_params)
    theta[: vech.n_mean] = m.mu
    for flat in range(vech.n_mean, vech.n_params):
        s, t = vech.symbol_of(flat)
        theta[flat] = m.sigma[s - 1, t - 1]
    return theta


def unpack_theta(theta, p):
    """Inverse of theta_of, as raw (mu, sigma) arrays without validation."""
    vech = VechIndex(p)
    mu = np.array(theta[: vech.n_mean])
    sigma = np.empty((p + 1, p + 1))
    for flat in range(vech.n_mean, vech.n_params):
        s, t = vech.symbol_of(flat)
        sigma[s - 1, t - 1] = theta[flat]
        sigma[t - 1, s - 1] = theta[flat]
    return mu, sigma


def moments_at(theta, p):
    mu, sigma = unpack_theta(theta, p)
    return MomentStructure(mu, sigma)


def duplication_matrix(q):
    symbols = [(s, t) for s in range(q) for t in range(s, q)]
    d = np.zeros((q * q, len(symbols)))
    for col, (s, t) in enumerate(symbols):
        e = np.zeros((q, q))
        e[s, t] = 1.0
        e[t, s] = 1.0
        d[:, col] = e.ravel()
    return d


@pytest.fixture(scope="module")
def anchor_report():
    """Asymptotic report for the built-in five-trait plan at n=1000."""
    moments = build_moments(np.zeros(5), bigfive_correlation(), population_model())
    start = time.perf_counter()
    result = report(moments, builtin_bigfive(), 1000.0)
    return result, time.perf_counter() - start


@pytest.fixture(scope="module")
def explore_summary():
    """Criterion 6 workhorse: the full-size analytic sweep, seeded."""
    config = ExploreConfig(
        draws=1000, r2=0.15, delta=0.01, alpha=0.05, power=0.8,
        n_reference=1000, seed=0,
    )
    start = time.perf_counter()
    result = explore(config, threads=1)
    return result.summary(), time.perf_counter() - start


@pytest.fixture(scope="module")
def simulate_summary():
    """Criteria 7 and 8 workhorse: 300 microdata replicates at n=1000."""
    config = SimConfig(n=1000, reps=300, m_small=5, m_large=50, seed=0)
    start = time.perf_counter()
    result = simulate(config, threads=1)
    return result.summary(), time.perf_counter() - start


def test_c01_slope_se_anchor(anchor_report):
    result, seconds = anchor_report
    slope_se = result.se[1:]
    for got, anchor in zip(slope_se, SLOPE_SE_ANCHORS):
        assert abs(got - anchor) <= SLOPE_SE_TOL
    assert seconds < 1.0
    print(f"criterion 1 PASS: slope SEs {np.round(slope_se, 4).tolist()} "
          f"within {SLOPE_SE_TOL} of anchors, {seconds:.3f}s")


def test_c02_fmi_anchor(anchor_report):
    result, seconds = anchor_report
    assert abs(result.fmi[1] - FMI_ANCHOR) <= FMI_TOL
    assert seconds < 1.0
    print(f"criterion 2 PASS: FMI(b1) {result.fmi[1]:.4f} within "
          f"{FMI_TOL} of {FMI_ANCHOR}, {seconds:.3f}s")


def test_c03_degeneracy():
    # Complete data: one form carrying everything. The coefficient covariance
    # must collapse to sigma^2 (n E[(1,x)(1,x)'])^-1 and FMI to exact zero.
    rng = np.random.default_rng(12)
    m = random_pd_moments(rng, 3)
    n = 640.0
    p = m.p
    complete = Design(
        variables=("x1", "x2", "x3"),
        outcome="y",
        forms=(Form("all", ("x1", "x2", "x3"), 1.0),),
    )
    result = report(m, complete, n)
    mu_x = m.mu[:p]
    sigma_xx = m.sigma[:p, :p]
    bordered = np.empty((p + 1, p + 1))
    bordered[0, 0] = 1.0
    bordered[0, 1:] = mu_x
    bordered[1:, 0] = mu_x
    bordered[1:, 1:] = sigma_xx + np.outer(mu_x, mu_x)
    sigma2 = float(m.sigma[p, p] - m.sigma[p, :p] @ np.linalg.solve(sigma_xx, m.sigma[:p, p]))
    target = sigma2 * np.linalg.inv(n * bordered)
    assert np.max(np.abs(result.cov_beta - target)) < 1e-10
    assert np.all(result.fmi == 0.0)

    with pytest.raises(SingularInformation) as caught:
        report(m, design_one(), n)
    assert ("x1", "x2") in caught.value.uncovered_pairs
    print("criterion 3 PASS: complete-data covariance matches the closed form "
          "at 1e-10, FMI exactly 0, and the one-item-per-form plan is "
          "diagnosed singular at pair (x1, x2)")


def test_c04_information_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2026)
    m = random_pd_moments(rng, 3)
    d2 = design_two()
    q = m.p + 1

    # Oracle one: assemble the expected information from scratch with the
    # duplication matrix, sum_k w_k [tau_k (+) D'(tau_k kron tau_k)D / 2].
    patterns = [
        (d2.form_variable_indices(k), form.fraction)
        for k, form in enumerate(d2.forms)
    ]
    dup = duplication_matrix(q)
    mean_block = np.zeros((q, q))
    cov_block = np.zeros((dup.shape[1],) * 2)
    for observed, weight in patterns:
        t = tau_from_subset(m.sigma, observed)
        mean_block += weight * t
        cov_block += 0.5 * weight * dup.T @ np.kron(t, t) @ dup
    oracle = np.zeros((q + cov_block.shape[0],) * 2)
    oracle[:q, :q] = mean_block
    oracle[q:, q:] = cov_block
    mine = information(m, d2, 1.0)
    kron_gap = float(np.max(np.abs(mine - oracle)))
    assert kron_gap < 1e-10

    # Oracle two: the information must also equal the negative Monte Carlo
    # expectation of the numerical Hessian of the observed-data loglik.
    n_rows = 600
    per_form = n_rows // 3
    reps = 60
    theta0 = theta_of(m)
    steps = 1e-3 * np.maximum(1.0, np.abs(theta0))
    lower = chol(m.sigma)
    groups = []
    for k in range(3):
        rows = np.arange(k * per_form, (k + 1) * per_form)
        groups.append((rows, d2.form_variable_indices(k)))

    def hessian(values):
        def f(theta):
            mu, sigma = unpack_theta(theta, m.p)
            return pattern_loglik(values, groups, mu, sigma)

        size = theta0.size
        h = np.empty((size, size))
        f0 = f(theta0)
        for i in range(size):
            ei = np.zeros(size)
            ei[i] = steps[i]
            h[i, i] = (f(theta0 + ei) - 2.0 * f0 + f(theta0 - ei)) / steps[i] ** 2
            for j in range(i + 1, size):
                ej = np.zeros(size)
                ej[j] = steps[j]
                mixed = (
                    f(theta0 + ei + ej)
                    - f(theta0 + ei - ej)
                    - f(theta0 - ei + ej)
                    + f(theta0 - ei - ej)
                ) / (4.0 * steps[i] * steps[j])
                h[i, j] = mixed
                h[j, i] = mixed
        return h

    draws = np.empty((reps, theta0.size, theta0.size))
    for r in range(reps):
        values = rng.standard_normal((n_rows, q)) @ lower.T + m.mu
        draws[r] = -hessian(values)
    mc_mean = draws.mean(axis=0)
    mc_se = draws.std(axis=0, ddof=1) / math.sqrt(reps)
    expected = information(m, d2, float(n_rows))
    gap = np.abs(expected - mc_mean)
    # Data-independent entries (the mean block) have zero MC variance; the
    # small absolute floor covers finite-difference truncation there.
    assert np.all(gap <= 3.0 * mc_se + 0.02)
    seconds = time.perf_counter() - start
    assert seconds < 120.0
    print(f"criterion 4 PASS: duplication oracle gap {kron_gap:.2e} < 1e-10; "
          f"Hessian oracle max z "
          f"{float(np.max(gap / np.maximum(mc_se, 1e-12))):.2f} over "
          f"{reps} replicates, {seconds:.1f}s")


def test_c05_gradient_check():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for case in range(50):
        p = case % 5 + 1
        m = random_pd_moments(rng, p)
        g = grad_beta(m)
        theta0 = theta_of(m)
        fd = np.empty_like(g)
        for i in range(theta0.size):
            h = 1e-6 * max(1.0, abs(theta0[i]))
            plus = theta0.copy()
            plus[i] += h
            minus = theta0.copy()
            minus[i] -= h
            bp = regression_from_moments(moments_at(plus, p)).beta_full
            bm = regression_from_moments(moments_at(minus, p)).beta_full
            fd[:, i] = (bp - bm) / (2.0 * h)
        rel = np.max(np.abs(g - fd)) / max(1.0, float(np.max(np.abs(fd))))
        worst = max(worst, float(rel))
    assert worst < 1e-6
    seconds = time.perf_counter() - start
    assert seconds < 10.0
    print(f"criterion 5 PASS: max relative gradient error {worst:.2e} "
          f"over 50 instances, {seconds:.2f}s")


def test_c06_analytic_sweep_windows(explore_summary):
    # The windows pin the uniform-inflation test (detecting a 0.01 R-squared
    # increase), the sweep's expensive question; the overall test needs only
    # hundreds of respondents and its per-draw ordering against this one is
    # asserted in the driver tests.
    summary, seconds = explore_summary
    uniform = summary["sample_size"]["uniform"]
    assert 70_000 <= uniform["min"] <= 95_000
    assert 95_000 <= uniform["median"] <= 125_000
    assert 175_000 <= uniform["p95"] <= 265_000
    assert uniform["max"] >= 300_000
    slope_median = summary["fmi"]["slopes_pooled"]["median"]
    intercept_p90 = summary["fmi"]["intercept"]["p90"]
    assert 0.68 <= slope_median <= 0.82
    assert intercept_p90 < 0.25
    assert seconds < 300.0
    print(f"criterion 6 PASS: uniform-inflation n quantiles "
          f"min {uniform['min']:.0f} / median {uniform['median']:.0f} / "
          f"p95 {uniform['p95']:.0f} / max {uniform['max']:.0f}; slope-FMI "
          f"median {slope_median:.3f}, intercept-FMI p90 {intercept_p90:.3f}; "
          f"{seconds:.0f}s")


def test_c07_microdata_bias_windows(simulate_summary):
    summary, seconds = simulate_summary
    assert summary["completed_reps"] == 300
    methods = summary["methods"]
    b1 = 1
    complete = methods["complete"]
    assert 0.29 <= complete["mean"][b1] <= 0.31
    assert 0.037 <= complete["sd"][b1] <= 0.047
    assert 0.92 <= complete["coverage"][b1] <= 0.98
    assert methods["em"]["mean"][b1] > 0.31
    for m_label in ("m5", "m50"):
        assert methods[f"mi-mvn-{m_label}"]["mean"][b1] > 0.31
        assert methods[f"mi-pmm-{m_label}"]["mean"][b1] < 0.29
        assert (
            complete["sd"][b1]
            < methods[f"mi-pmm-{m_label}"]["sd"][b1]
            < methods[f"mi-mvn-{m_label}"]["sd"][b1]
        )
    assert seconds < 1800.0
    print(f"criterion 7 PASS: complete mean {complete['mean'][b1]:.4f} "
          f"sd {complete['sd'][b1]:.4f} coverage {complete['coverage'][b1]:.3f}; "
          f"em mean {methods['em']['mean'][b1]:.4f}; "
          f"mvn means {methods['mi-mvn-m5']['mean'][b1]:.4f}/"
          f"{methods['mi-mvn-m50']['mean'][b1]:.4f}; "
          f"pmm means {methods['mi-pmm-m5']['mean'][b1]:.4f}/"
          f"{methods['mi-pmm-m50']['mean'][b1]:.4f}; {seconds:.0f}s")


def test_c08_empirical_fmi_direction(simulate_summary):
    summary, _ = simulate_summary
    methods = summary["methods"]
    b1 = 1
    for m_label in ("m5", "m50"):
        assert methods[f"mi-mvn-{m_label}"]["fmi_empirical"][b1] > FMI_ANCHOR
        assert methods[f"mi-pmm-{m_label}"]["fmi_empirical"][b1] < FMI_ANCHOR
    print(f"criterion 8 PASS: empirical FMI(b1) mvn "
          f"{methods['mi-mvn-m5']['fmi_empirical'][b1]:.3f}/"
          f"{methods['mi-mvn-m50']['fmi_empirical'][b1]:.3f} above "
          f"{FMI_ANCHOR}, pmm {methods['mi-pmm-m5']['fmi_empirical'][b1]:.3f}/"
          f"{methods['mi-pmm-m50']['fmi_empirical'][b1]:.3f} below")


def test_c09_single_constraint_sample_size_matches_z_test():
    start = time.perf_counter()
    design = builtin_bigfive()
    model = population_model()
    sigma_xx = bigfive_correlation()
    moments = build_moments(np.zeros(5), sigma_xx, model)

    cases = []
    for j in range(5):
        for delta in (0.005, 0.02):
            cases.append(("r2-single", j, delta, 0.05, 0.8))
    for j in (0, 3):  # the two nonzero population slopes
        for alpha, power in ((0.05, 0.8), (0.01, 0.8), (0.05, 0.9), (0.025, 0.85)):
            cases.append(("slope-zero", j, None, alpha, power))
    for power in (0.9, 0.95):
        cases.append(("r2-single", 0, 0.01, 0.05, power))
    assert len(cases) == 20

    granule = design.form_count
    for kind, j, delta, alpha, power in cases:
        if kind == "r2-single":
            spec_pair = r2_increase_single(model, sigma_xx, delta, j)
            hypothesis, alternative = spec_pair.hypothesis, spec_pair.alternative
        else:
            hypothesis, alternative = single_slope_test(5, j), model
        assert hypothesis.q == 1
        alt_moments = build_moments(np.zeros(5), sigma_xx, alternative)
        cov_unit = report(alt_moments, design, 1.0).cov_beta_unit
        found = sample_size(
            PowerSpec(hypothesis, alternative, alpha=alpha, target_power=power),
            cov_unit,
            design.form_count,
            design.allocation,
        )
        effect = float((hypothesis.constraint @ alternative.beta_full - hypothesis.value)[0])
        variance = float((hypothesis.constraint @ cov_unit @ hypothesis.constraint.T)[0, 0])
        z_n = (
            (normal_quantile(1.0 - alpha / 2.0) + normal_quantile(power)) ** 2
            * variance
            / effect**2
        )
        assert abs(found.n_total - z_n) <= granule, (kind, j, delta, alpha, power)
    seconds = time.perf_counter() - start
    assert seconds < 1.0
    print(f"criterion 9 PASS: 20 single-constraint sample sizes within one "
          f"{granule}-respondent granule of the z-test closed form, "
          f"{seconds:.2f}s")


def test_c10_deterministic_outputs(tmp_path):
    explore_config = dict(
        draws=50, r2=0.15, delta=0.01, alpha=0.05, power=0.8,
        n_reference=1000, seed=11,
    )
    blobs = []
    for label, threads in (("a", 1), ("b", 1), ("c", 2)):
        path = tmp_path / f"explore_{label}.csv"
        explore(ExploreConfig(**explore_config), threads=threads).write_csv(path)
        blobs.append(path.read_bytes())
    assert blobs[0] == blobs[1] == blobs[2]

    sim_config = dict(n=400, reps=2, m_small=2, m_large=3, seed=1)
    blobs = []
    for label, threads in (("a", 1), ("b", 1), ("c", 2)):
        path = tmp_path / f"sim_{label}.csv"
        simulate(SimConfig(**sim_config), threads=threads).write_csv(path)
        blobs.append(path.read_bytes())
    assert blobs[0] == blobs[1] == blobs[2]
    print("criterion 10 PASS: sweep and replication tables byte-identical "
          "across reruns and thread counts")
