"""Simulation drivers: analytic parameter sweep and finite-sample comparison.

Two experiments, both specific to the built-in five-trait inventory plan:

* explore: draws random slope vectors, rescales the residual variance to a
  fixed population R^2, and records analytic sample sizes (overall test,
  uniform R^2 increase, per-coefficient R^2 increase) and the fraction of
  missing information, per draw plus summary quantiles.
* simulate: generates skewed microdata, masks it per the plan, and compares
  complete-data OLS, direct ML, normal-theory MI, and PMM MI across
  replicates (bias, spread, coverage, reported and empirical FMI).

Draws and replicates own disjoint RNG streams keyed by their index, so both
drivers produce bit-identical reports for a given seed no matter how many
worker processes run them. Reports serialize to CSV (one row per draw or per
replicate-method pair) and a JSON summary; columns are documented in
docs/reports.md.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from csv import writer as csv_writer
from dataclasses import asdict, dataclass
from functools import partial

import numpy as np

from .asymptotics import report
from .design import Design, builtin_bigfive
from .errors import (
    AllocationError,
    DomainError,
    InvariantError,
    MatrixPowerError,
    NoRealRoot,
)
from .estimators import Dataset, em_mvn, mi_mvn, mi_pmm, ols, rubin_pool
from .moments import (
    RegressionModel,
    bigfive_correlation,
    build_moments,
    sigma2_for_r2,
)
from .numerics import RngStream, chol, normal_quantile, sym_eigen
from .power import (
    PowerSpec,
    overall_test,
    r2_increase_single,
    r2_increase_uniform,
    sample_size,
)

# Residual variance making R^2 = 0.15 exactly for slopes (0.3, 0, 0, 0.3, 0)
# on the built-in trait correlations.
RESIDUAL_VARIANCE_BIGFIVE = 1.248602

# Population coefficients of the microdata generator, intercept first.
TRUE_COEFFICIENTS = (0.0, 0.3, 0.0, 0.0, 0.3, 0.0)

_P = 5  # both drivers are pinned to the five-regressor plan


def population_model() -> RegressionModel:
    """The microdata-generating regression: y on the five traits."""
    return RegressionModel(0.0, TRUE_COEFFICIENTS[1:], RESIDUAL_VARIANCE_BIGFIVE)


# ---------------------------------------------------------------------------
# Parameter-space exploration (analytic; no microdata)


@dataclass(frozen=True)
class ExploreConfig:
    """Sweep settings: how many slope draws, at what effect targets."""

    draws: int = 1000
    r2: float = 0.15
    delta: float = 0.01
    alpha: float = 0.05
    power: float = 0.8
    n_reference: int = 1000
    seed: int = 0

    def __post_init__(self):
        if int(self.draws) < 1:
            raise DomainError(f"need at least one draw, got {self.draws}")
        object.__setattr__(self, "draws", int(self.draws))
        if not 0.0 < self.r2 < 1.0:
            raise DomainError(f"r2 must lie inside (0, 1), got {self.r2}")
        if self.delta <= 0.0:
            raise DomainError(f"delta must be positive, got {self.delta}")
        if self.r2 + self.delta >= 1.0:
            raise DomainError(
                f"r2 + delta = {self.r2 + self.delta} does not leave residual variance"
            )
        if not 0.0 < self.alpha < self.power < 1.0:
            raise DomainError(
                f"need 0 < alpha < power < 1, got alpha={self.alpha} power={self.power}"
            )
        if int(self.n_reference) < 1:
            raise DomainError(f"n_reference must be positive, got {self.n_reference}")
        object.__setattr__(self, "n_reference", int(self.n_reference))
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class ExploreRecord:
    """One slope draw: its sample sizes and FMI.

    `n_single[j]` is None when no real slope value reaches the R^2 target by
    moving coefficient j alone. `fmi` is intercept-first.
    """

    draw: int
    beta: tuple
    sigma2: float
    n_overall: int
    n_overall_complete: int
    n_uniform: int
    n_uniform_complete: int
    n_single: tuple
    fmi: tuple


def _explore_draw(config: ExploreConfig, draw: int) -> ExploreRecord:
    design = builtin_bigfive()
    sigma_xx = bigfive_correlation()
    stream = RngStream(config.seed, draw)
    # Slope draws carry the trait correlation structure. Independent draws
    # would make sign-discordant slopes on positively correlated traits the
    # typical case, and those near-cancelling configurations inflate the
    # upper sample-size tail far beyond the range the sweep is meant to map.
    beta = chol(sigma_xx) @ stream.std_normal(_P)
    sigma2 = sigma2_for_r2(beta, sigma_xx, config.r2)
    model = RegressionModel(0.0, beta, sigma2)
    base = report(build_moments(np.zeros(_P), sigma_xx, model), design, 1.0)

    def n_for(spec, alternative):
        # Coefficient covariance is evaluated at the alternative the study
        # hopes to detect; the masked search rounds to whole form blocks.
        rep = report(build_moments(np.zeros(_P), sigma_xx, alternative), design, 1.0)
        masked = sample_size(
            spec, rep.cov_beta_unit, design.form_count, design.allocation
        ).n_total
        complete = sample_size(spec, rep.cov_beta_complete_unit).n_total
        return masked, complete

    spec_overall = PowerSpec(
        overall_test(model), model, alpha=config.alpha, target_power=config.power
    )
    n_overall, n_overall_complete = n_for(spec_overall, model)

    spec_uniform = r2_increase_uniform(
        model, sigma_xx, config.delta, alpha=config.alpha, target_power=config.power
    )
    n_uniform, n_uniform_complete = n_for(spec_uniform, spec_uniform.alternative)

    singles = []
    for j in range(_P):
        try:
            spec_j = r2_increase_single(
                model, sigma_xx, config.delta, j,
                alpha=config.alpha, target_power=config.power,
            )
        except NoRealRoot:
            singles.append(None)
            continue
        singles.append(n_for(spec_j, spec_j.alternative)[0])

    return ExploreRecord(
        draw=draw,
        beta=tuple(float(b) for b in beta),
        sigma2=float(sigma2),
        n_overall=n_overall,
        n_overall_complete=n_overall_complete,
        n_uniform=n_uniform,
        n_uniform_complete=n_uniform_complete,
        n_single=tuple(singles),
        fmi=tuple(float(f) for f in base.fmi),
    )


EXPLORE_CSV_COLUMNS = (
    ("draw",)
    + tuple(f"beta{j + 1}" for j in range(_P))
    + ("sigma2", "n_overall", "n_overall_complete", "n_uniform", "n_uniform_complete")
    + tuple(f"n_single{j + 1}" for j in range(_P))
    + tuple(f"fmi_b{j}" for j in range(_P + 1))
)


@dataclass(frozen=True, eq=False)
class ExploreReport:
    config: ExploreConfig
    records: tuple
    no_real_root_count: int

    def summary(self) -> dict:
        def quantiles(values):
            arr = np.array([v for v in values if v is not None], dtype=float)
            if arr.size == 0:
                return None
            return {
                "min": float(arr.min()),
                "median": float(np.quantile(arr, 0.5)),
                "p95": float(np.quantile(arr, 0.95)),
                "max": float(arr.max()),
            }

        recs = self.records
        intercept_fmi = np.array([r.fmi[0] for r in recs])
        slope_fmi = np.array([r.fmi[1:] for r in recs]).ravel()
        return {
            "draws": len(recs),
            "n_reference": self.config.n_reference,
            "no_real_root": {
                "count": self.no_real_root_count,
                "share": self.no_real_root_count / (len(recs) * _P),
            },
            "sample_size": {
                "overall": quantiles(r.n_overall for r in recs),
                "overall_complete": quantiles(r.n_overall_complete for r in recs),
                "uniform": quantiles(r.n_uniform for r in recs),
                "uniform_complete": quantiles(r.n_uniform_complete for r in recs),
                "single": [
                    quantiles(r.n_single[j] for r in recs) for j in range(_P)
                ],
            },
            "fmi": {
                "intercept": {
                    "median": float(np.quantile(intercept_fmi, 0.5)),
                    "p90": float(np.quantile(intercept_fmi, 0.9)),
                },
                "slopes_pooled": {
                    "p05": float(np.quantile(slope_fmi, 0.05)),
                    "median": float(np.quantile(slope_fmi, 0.5)),
                    "p95": float(np.quantile(slope_fmi, 0.95)),
                },
                "slope_medians": [
                    float(np.quantile([r.fmi[1 + j] for r in recs], 0.5))
                    for j in range(_P)
                ],
            },
        }

    def to_json_dict(self) -> dict:
        return {
            "experiment": "explore",
            "config": asdict(self.config),
            "summary": self.summary(),
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as handle:
            out = csv_writer(handle, lineterminator="\n")
            out.writerow(EXPLORE_CSV_COLUMNS)
            for r in self.records:
                out.writerow(
                    [str(r.draw)]
                    + [_cell(b) for b in r.beta]
                    + [_cell(r.sigma2)]
                    + [str(r.n_overall), str(r.n_overall_complete)]
                    + [str(r.n_uniform), str(r.n_uniform_complete)]
                    + [_cell(v) for v in r.n_single]
                    + [_cell(f) for f in r.fmi]
                )


def _cell(value) -> str:
    """CSV cell: ints verbatim, floats via repr (round-trips), blanks for absent."""
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    return "" if math.isnan(value) else repr(value)


def explore(config: ExploreConfig, threads: int = 1) -> ExploreReport:
    """Run the sweep; draw i uses stream (seed, i) so results are order-free."""
    threads = int(threads)
    if threads < 1:
        raise DomainError(f"threads must be positive, got {threads}")
    worker = partial(_explore_draw, config)
    if threads == 1:
        records = [worker(i) for i in range(config.draws)]
    else:
        chunk = max(1, config.draws // (threads * 8))
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(worker, range(config.draws), chunksize=chunk))
    missing_roots = sum(1 for r in records for v in r.n_single if v is None)
    return ExploreReport(
        config=config, records=tuple(records), no_real_root_count=missing_roots
    )


# ---------------------------------------------------------------------------
# Microdata generation and masking


def generate_microdata(n, stream: RngStream) -> Dataset:
    """Skewed five-trait scores plus outcome, targeting the trait correlations.

    Principal components: the first is a centered exponential (skewness 2),
    the second a symmetric two-sided exponential (bimodal, heavy tails), the
    rest standard normal; all have mean 0 and variance 1. Trait scores load
    the components on the eigenvectors of the target correlation matrix
    (largest eigenvalue first, carrying the skewed component), so the
    population covariance is exact while every trait stays non-normal.
    """
    n = int(n)
    if n < 1:
        raise DomainError(f"need at least one row, got {n}")
    design = builtin_bigfive()
    sigma_xx = bigfive_correlation()
    # log1p(-u) keeps the exponential finite for u ~ U[0, 1).
    u1 = stream.uniform01(n)
    f1 = -np.log1p(-u1) - 1.0
    sign = 2.0 * stream.bernoulli(0.5, n) - 1.0
    u2 = stream.uniform01(n)
    f2 = sign * (-np.log1p(-u2) - 1.0)
    normals = stream.std_normal((n, 3))
    factors = np.column_stack([f1, f2, normals])
    eigenvalues, eigenvectors = sym_eigen(sigma_xx)
    x = factors @ (eigenvectors * np.sqrt(eigenvalues)).T
    noise = stream.std_normal(n) * math.sqrt(RESIDUAL_VARIANCE_BIGFIVE)
    y = x @ np.asarray(TRUE_COEFFICIENTS[1:]) + TRUE_COEFFICIENTS[0] + noise
    return Dataset(
        columns=design.variables + (design.outcome,),
        values=np.column_stack([x, y]),
    )


def apply_design(data: Dataset, design: Design, stream: RngStream) -> Dataset:
    """Assign rows to forms in exact fractions and blank unadministered cells.

    Assignment is a random permutation split into contiguous blocks, so each
    form receives exactly fraction * n rows; the outcome is never blanked.
    Raises AllocationError when fraction * n is not a whole number.
    """
    expected = design.variables + (design.outcome,)
    if tuple(data.columns) != expected:
        raise InvariantError(
            f"dataset columns {tuple(data.columns)} do not match the design's {expected}"
        )
    counts = []
    for form in design.forms:
        exact = form.fraction * data.n
        count = int(round(exact))
        if abs(exact - count) > 1e-9:
            raise AllocationError(
                f"form {form.name!r} would receive {exact} of {data.n} rows; "
                "exact allocation needs a whole number"
            )
        counts.append(count)
    if sum(counts) != data.n:
        raise AllocationError(
            f"form counts {counts} sum to {sum(counts)}, not {data.n}"
        )
    order = stream.permutation(data.n)
    values = data.values.copy()
    labels = np.empty(data.n, dtype=np.int64)
    start = 0
    for k, count in enumerate(counts):
        rows = order[start:start + count]
        start += count
        labels[rows] = k
        administered = set(design.form_variable_indices(k))
        blanked = [j for j in range(design.p) if j not in administered]
        values[np.ix_(rows, blanked)] = np.nan
    return Dataset(columns=data.columns, values=values, form=labels)


# ---------------------------------------------------------------------------
# Finite-sample comparison


SIM_METHODS = ("complete", "em", "mi-mvn", "mi-pmm")


@dataclass(frozen=True)
class SimConfig:
    """Replication settings for the microdata comparison."""

    n: int = 1000
    reps: int = 1200
    m_small: int = 5
    m_large: int = 50
    methods: tuple = SIM_METHODS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "reps", int(self.reps))
        object.__setattr__(self, "m_small", int(self.m_small))
        object.__setattr__(self, "m_large", int(self.m_large))
        object.__setattr__(self, "seed", int(self.seed))
        if self.n < 1:
            raise DomainError(f"n must be positive, got {self.n}")
        if self.reps < 1:
            raise DomainError(f"reps must be positive, got {self.reps}")
        if not 2 <= self.m_small <= self.m_large:
            raise DomainError(
                f"need 2 <= m_small <= m_large, got {self.m_small}, {self.m_large}"
            )
        methods = tuple(self.methods)
        unknown = [m for m in methods if m not in SIM_METHODS]
        if unknown:
            raise DomainError(f"unknown methods {unknown}; choose from {SIM_METHODS}")
        if len(set(methods)) != len(methods) or not methods:
            raise DomainError("methods must be a non-empty set of distinct names")
        # Canonical order keeps report rows stable however the user spells it.
        object.__setattr__(
            self, "methods", tuple(m for m in SIM_METHODS if m in methods)
        )

    def method_rows(self) -> tuple:
        """Report rows: each MI engine yields one row per pooling size."""
        rows = [m for m in ("complete", "em") if m in self.methods]
        for engine in ("mi-mvn", "mi-pmm"):
            if engine in self.methods:
                rows.append(f"{engine}-m{self.m_small}")
                if self.m_large != self.m_small:
                    rows.append(f"{engine}-m{self.m_large}")
        return tuple(rows)


@dataclass(frozen=True)
class SimRecord:
    """One (replicate, method) fit: estimates, SEs, CI hits, reported FMI."""

    rep: int
    method: str
    estimates: tuple
    se: tuple
    covered: tuple
    fmi_reported: tuple


@dataclass(frozen=True)
class SimFailure:
    rep: int
    reason: str


def _covered(conf_int) -> tuple:
    truth = np.asarray(TRUE_COEFFICIENTS)
    return tuple(
        bool(lo <= t <= hi) for (lo, hi), t in zip(conf_int, truth)
    )


def _record_fit(rep, method, fit) -> SimRecord:
    return SimRecord(
        rep=rep,
        method=method,
        estimates=tuple(float(v) for v in fit.estimates),
        se=tuple(float(v) for v in fit.se),
        covered=_covered(fit.conf_int(0.95)),
        fmi_reported=(math.nan,) * (_P + 1),
    )


def _record_pooled(rep, method, pooled) -> SimRecord:
    return SimRecord(
        rep=rep,
        method=method,
        estimates=tuple(float(v) for v in pooled.estimates),
        se=tuple(float(v) for v in pooled.se),
        covered=_covered(pooled.conf_int(0.95)),
        fmi_reported=tuple(float(v) for v in pooled.fmi_hat),
    )


def _simulate_rep(config: SimConfig, rep: int):
    """One replicate; returns its SimRecords or a SimFailure.

    Stream layout per replicate: child 0 generates, 1 assigns forms, 2 drives
    normal-theory imputation, 3 drives PMM. Fixed purposes keep any one
    method's results unchanged when others are toggled off.
    """
    base = RngStream(config.seed, rep)
    try:
        data = generate_microdata(config.n, base.derive(0))
        records = []
        if "complete" in config.methods:
            records.append(_record_fit(rep, "complete", ols(data)))
        needs_mask = any(m != "complete" for m in config.methods)
        if needs_mask:
            masked = apply_design(data, builtin_bigfive(), base.derive(1))
        if "em" in config.methods:
            _, fit = em_mvn(masked)
            records.append(_record_fit(rep, "em", fit))
        for engine, child in (("mi-mvn", 2), ("mi-pmm", 3)):
            if engine not in config.methods:
                continue
            if engine == "mi-mvn":
                completed = mi_mvn(masked, config.m_large, base.derive(child))
            else:
                completed = mi_pmm(masked, config.m_large, stream=base.derive(child))
            fits = [ols(imputed) for imputed in completed]
            records.append(
                _record_pooled(
                    rep, f"{engine}-m{config.m_small}", rubin_pool(fits, config.m_small)
                )
            )
            if config.m_large != config.m_small:
                records.append(
                    _record_pooled(rep, f"{engine}-m{config.m_large}", rubin_pool(fits))
                )
        return records
    except MatrixPowerError as exc:
        return SimFailure(rep=rep, reason=f"{type(exc).__name__}: {exc}")


SIM_CSV_COLUMNS = (
    ("rep", "method")
    + tuple(f"est_b{j}" for j in range(_P + 1))
    + tuple(f"se_b{j}" for j in range(_P + 1))
    + tuple(f"cover_b{j}" for j in range(_P + 1))
    + tuple(f"fmi_b{j}" for j in range(_P + 1))
)


@dataclass(frozen=True, eq=False)
class SimReport:
    config: SimConfig
    records: tuple
    failures: tuple
    analytic_se: tuple
    analytic_fmi: tuple

    def _by_method(self):
        grouped = {method: [] for method in self.config.method_rows()}
        for record in self.records:
            grouped[record.method].append(record)
        return grouped

    def summary(self) -> dict:
        grouped = self._by_method()
        z = normal_quantile(0.975)
        variances = {}
        methods = {}
        for method, recs in grouped.items():
            est = np.array([r.estimates for r in recs])
            variances[method] = est.var(axis=0, ddof=1) if len(recs) > 1 else None
        complete_var = variances.get("complete")
        for method, recs in grouped.items():
            if not recs:
                methods[method] = None
                continue
            est = np.array([r.estimates for r in recs])
            se = np.array([r.se for r in recs])
            covered = np.array([r.covered for r in recs], dtype=float)
            fmi = np.array([r.fmi_reported for r in recs])
            mean = est.mean(axis=0)
            sd = est.std(axis=0, ddof=1) if len(recs) > 1 else np.zeros(_P + 1)
            half = z * sd / math.sqrt(len(recs))
            entry = {
                "replicates": len(recs),
                "mean": _numbers(mean),
                "mean_ci_low": _numbers(mean - half),
                "mean_ci_high": _numbers(mean + half),
                "sd": _numbers(sd),
                "coverage": _numbers(covered.mean(axis=0)),
                "se_mean": _numbers(se.mean(axis=0)),
                "se_median": _numbers(np.median(se, axis=0)),
                "se_outlier_share": _numbers(
                    (se > 3.0 * np.asarray(self.analytic_se)).mean(axis=0)
                ),
                "fmi_reported_median": _numbers(np.median(fmi, axis=0)),
            }
            if complete_var is not None and variances[method] is not None:
                ratio = complete_var / np.where(
                    variances[method] > 0, variances[method], np.nan
                )
                entry["fmi_empirical"] = _numbers(1.0 - ratio)
            else:
                entry["fmi_empirical"] = _numbers(np.full(_P + 1, np.nan))
            methods[method] = entry
        return {
            "reps": self.config.reps,
            "completed_reps": self.config.reps - len(self.failures),
            "failures": [
                {"rep": f.rep, "reason": f.reason} for f in self.failures
            ],
            "analytic_se": _numbers(self.analytic_se),
            "analytic_fmi": _numbers(self.analytic_fmi),
            "true_coefficients": list(TRUE_COEFFICIENTS),
            "methods": methods,
        }

    def to_json_dict(self) -> dict:
        config = asdict(self.config)
        config["methods"] = list(config["methods"])
        return {
            "experiment": "simulate",
            "config": config,
            "summary": self.summary(),
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as handle:
            out = csv_writer(handle, lineterminator="\n")
            out.writerow(SIM_CSV_COLUMNS)
            for r in self.records:
                out.writerow(
                    [str(r.rep), r.method]
                    + [_cell(v) for v in r.estimates]
                    + [_cell(v) for v in r.se]
                    + [str(int(v)) for v in r.covered]
                    + [_cell(v) for v in r.fmi_reported]
                )


def _numbers(values):
    """JSON-safe float list: NaN becomes null."""
    return [None if math.isnan(float(v)) else float(v) for v in np.asarray(values)]


def simulate(config: SimConfig, threads: int = 1) -> SimReport:
    """Run the comparison; replicate r uses stream (seed, r)."""
    threads = int(threads)
    if threads < 1:
        raise DomainError(f"threads must be positive, got {threads}")
    design = builtin_bigfive()
    if config.n % design.form_count != 0:
        raise AllocationError(
            f"n={config.n} cannot be split evenly across {design.form_count} forms"
        )
    worker = partial(_simulate_rep, config)
    if threads == 1:
        outcomes = [worker(r) for r in range(config.reps)]
    else:
        chunk = max(1, config.reps // (threads * 8))
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(worker, range(config.reps), chunksize=chunk))
    records = []
    failures = []
    for outcome in outcomes:
        if isinstance(outcome, SimFailure):
            failures.append(outcome)
        else:
            records.extend(outcome)
    analytic = report(
        build_moments(np.zeros(_P), bigfive_correlation(), population_model()),
        design,
        float(config.n),
    )
    return SimReport(
        config=config,
        records=tuple(records),
        failures=tuple(failures),
        analytic_se=tuple(float(v) for v in analytic.se),
        analytic_fmi=tuple(float(v) for v in analytic.fmi),
    )
