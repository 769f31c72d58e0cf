"""Estimators for datasets whose regressors are matrix sampled.

A Dataset stores rows over (x1..xp, y) with NaN marking cells a form did not
administer; the outcome is never missing. Four estimation routes live here:

* ols: ordinary least squares for complete data;
* em_mvn: direct maximum likelihood for the joint normal moments via EM over
  the missingness patterns, with asymptotic standard errors from the expected
  information at the estimate (weighted by the empirical pattern counts);
* mi_mvn: proper multiple imputation drawing each missing block from its
  conditional normal under parameters re-estimated on a bootstrap resample;
* mi_pmm: predictive mean matching by chained equations, imputing observed
  donor values whose regression predictions are closest.

rubin_pool combines per-imputation fits: total variance is within + (1+1/M)
between, the fraction-of-missing-information estimate is (1+1/M)B/T, and
degrees of freedom follow the Barnard-Rubin small-sample formula.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import asymptotics
from .errors import (
    DomainError,
    InsufficientDonors,
    InvariantError,
    NoConvergence,
    NotPositiveDefinite,
    RankDeficient,
    SchemaError,
    SingularInformation,
)
from .moments import MomentStructure, regression_from_moments
from .numerics import RngStream, chol, t_quantile

EM_DEFAULT_TOL = 1e-8
EM_DEFAULT_MAX_ITER = 5000


@dataclass(eq=False)
class Dataset:
    """Rows over (x1..xp, y); NaN marks unadministered cells.

    `form` optionally labels each row with its form index. The outcome (last
    column) must be observed on every row.
    """

    columns: tuple
    values: np.ndarray
    form: np.ndarray | None = None

    def __post_init__(self):
        self.columns = tuple(self.columns)
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(self.columns):
            raise InvariantError(
                f"values shape {values.shape} does not match {len(self.columns)} columns"
            )
        if len(self.columns) < 2:
            raise InvariantError("a dataset needs at least one regressor and the outcome")
        if len(set(self.columns)) != len(self.columns):
            raise InvariantError("column names must be unique")
        if np.any(np.isnan(values[:, -1])):
            raise InvariantError(f"outcome column {self.columns[-1]!r} has missing cells")
        self.values = values
        if self.form is not None:
            form = np.asarray(self.form)
            if form.shape != (values.shape[0],):
                raise InvariantError("form labels must give one index per row")
            self.form = form.astype(np.int64)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1] - 1

    @property
    def mask(self) -> np.ndarray:
        """Boolean observed-cell indicator."""
        return ~np.isnan(self.values)

    def is_complete(self) -> bool:
        return bool(np.all(self.mask))

    def pattern_groups(self):
        """Rows grouped by missingness pattern: list of (rows, observed_cols).

        Patterns are ordered by their observed-column tuples so the grouping
        is deterministic regardless of row order.
        """
        mask = self.mask
        seen = {}
        for key in map(tuple, mask):
            if key not in seen:
                seen[key] = None
        groups = []
        for key in sorted(seen, reverse=True):
            rows = np.flatnonzero(np.all(mask == np.array(key, dtype=bool), axis=1))
            observed = tuple(np.flatnonzero(key))
            groups.append((rows, observed))
        return groups

    def to_csv(self, path):
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            header = list(self.columns) + (["form"] if self.form is not None else [])
            writer.writerow(header)
            for i in range(self.n):
                row = ["" if math.isnan(v) else repr(float(v)) for v in self.values[i]]
                if self.form is not None:
                    row.append(str(int(self.form[i])))
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as handle:
            reader = csv.reader(handle)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaError(f"{path}: empty CSV") from None
            rows = list(reader)
        has_form = "form" in header
        form_pos = header.index("form") if has_form else None
        columns = tuple(name for name in header if name != "form")
        values = np.full((len(rows), len(columns)), np.nan)
        form = np.zeros(len(rows), dtype=np.int64) if has_form else None
        for i, raw in enumerate(rows):
            if len(raw) != len(header):
                raise SchemaError(f"{path}: row {i + 2} has {len(raw)} fields, expected {len(header)}")
            col = 0
            for j, cell in enumerate(raw):
                if j == form_pos:
                    try:
                        form[i] = int(cell)
                    except ValueError:
                        raise SchemaError(f"{path}: row {i + 2} has non-integer form label {cell!r}") from None
                    continue
                if cell != "":
                    try:
                        values[i, col] = float(cell)
                    except ValueError:
                        raise SchemaError(f"{path}: row {i + 2} field {cell!r} is not a number") from None
                col += 1
        return cls(columns=columns, values=values, form=form)


@dataclass(frozen=True, eq=False)
class FitResult:
    """One estimation result: coefficients, residual variance, and SEs.

    `se` covers (intercept, slopes). `df_resid` is the residual degrees of
    freedom backing the SEs; math.inf marks purely asymptotic (normal) ones.
    """

    method: str
    beta0: float
    beta: np.ndarray
    sigma2: float
    se: np.ndarray
    df_resid: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "se", np.asarray(self.se, dtype=float))
        if self.se.shape != (self.beta.size + 1,):
            raise InvariantError("need one standard error per coefficient")
        if np.any(self.se < 0) or np.any(~np.isfinite(self.se)):
            raise InvariantError("standard errors must be finite and nonnegative")

    @property
    def estimates(self) -> np.ndarray:
        return np.concatenate(([self.beta0], self.beta))

    def conf_int(self, level=0.95) -> np.ndarray:
        """Per-coefficient (lower, upper) bounds, t-based on df_resid."""
        quantile = t_quantile(self.df_resid, 0.5 + level / 2.0)
        half = quantile * self.se
        centers = self.estimates
        return np.column_stack([centers - half, centers + half])


def ols(data: Dataset) -> FitResult:
    """Least squares with intercept; classical SEs with df = n - p - 1."""
    if not data.is_complete():
        raise DomainError("ols needs complete data; impute or use em_mvn")
    n, p = data.n, data.p
    if n <= p + 1:
        raise RankDeficient(f"n={n} rows cannot identify {p + 1} coefficients and a variance")
    x = np.column_stack([np.ones(n), data.values[:, :-1]])
    y = data.values[:, -1]
    xtx = x.T @ x
    try:
        lower = chol(xtx)
    except NotPositiveDefinite as exc:
        raise RankDeficient(f"design matrix is rank deficient: {exc}") from exc
    xty = x.T @ y
    beta_full = np.linalg.solve(lower.T, np.linalg.solve(lower, xty))
    residuals = y - x @ beta_full
    rss = float(residuals @ residuals)
    df = n - p - 1
    s2 = rss / df
    xtx_inv = np.linalg.solve(lower.T, np.linalg.solve(lower, np.eye(p + 1)))
    se = np.sqrt(np.clip(s2 * np.diagonal(xtx_inv), 0.0, None))
    return FitResult(
        method="ols",
        beta0=float(beta_full[0]),
        beta=beta_full[1:],
        sigma2=rss / n,
        se=se,
        df_resid=float(df),
    )


def _check_pairwise_coverage(mask):
    """Raise SingularInformation unless every column pair is co-observed."""
    counts = mask.T.astype(np.int64) @ mask.astype(np.int64)
    bad = np.argwhere(np.triu(counts == 0))
    if bad.size:
        pairs = tuple((int(i), int(j)) for i, j in bad)
        raise SingularInformation(
            f"columns never observed together: {pairs}", uncovered_pairs=pairs
        )


def _em_moments(values, groups, tol, max_iter, start=None):
    """EM for the joint normal moments; returns (mu, sigma, loglik trace).

    `start`, when given, is a (mu, sigma) pair used in place of the
    available-case starting values; a warm start from a nearby estimate
    (e.g. the full-data fit before bootstrap refits) saves iterations.

    The fixed-point map contracts slowly when most cells are missing, so
    every third step extrapolates along the two preceding EM increments
    (Varadhan-Roland squared step). An extrapolated point is kept only if
    its loglik does not drop and its covariance stays positive definite;
    otherwise the plain EM sequence continues. trace[0] is the loglik at
    the start, trace[-1] at the returned estimate, and the trace is
    nondecreasing either way; `max_iter` counts EM map evaluations.
    """
    n, d = values.shape
    if start is None:
        # Available-case starting values: per-column means, diagonal variances.
        mu = np.nanmean(values, axis=0)
        var = np.nanvar(values, axis=0)
        if np.any(~np.isfinite(mu)) or np.any(var <= 0):
            raise DomainError("every column needs at least two observed, non-constant values")
        sigma = np.diag(var)
    else:
        mu = np.array(start[0], dtype=float)
        sigma = np.array(start[1], dtype=float)
    # Sufficient statistics over observed cells never change; fold them in once.
    base_t1 = np.zeros(d)
    base_t2 = np.zeros((d, d))
    patterns = []
    cells = 0
    for rows, observed in groups:
        obs = np.array(observed, dtype=np.intp)
        mis = np.array([j for j in range(d) if j not in set(observed)], dtype=np.intp)
        x_obs = values[np.ix_(rows, obs)]
        base_t1[obs] += x_obs.sum(axis=0)
        base_t2[np.ix_(obs, obs)] += x_obs.T @ x_obs
        cells += rows.size * obs.size
        patterns.append((
            obs, mis, x_obs, rows.size,
            np.ix_(obs, obs), np.ix_(obs, mis),
            np.ix_(mis, obs), np.ix_(mis, mis),
        ))
    const = -0.5 * cells * math.log(2.0 * math.pi)

    def em_step(mu, sigma):
        """One E+M update; returns (mu_next, sigma_next, loglik at the input)."""
        ll = const
        t1 = base_t1.copy()
        t2 = base_t2.copy()
        for obs, mis, x_obs, count, oo, om, mo, mm in patterns:
            lower = chol(sigma[oo])
            dev = x_obs - mu[obs]
            z = np.linalg.solve(lower, dev.T)
            ll -= count * float(np.sum(np.log(np.diagonal(lower))))
            ll -= 0.5 * float(np.sum(z * z))
            if mis.size == 0:
                continue
            half = np.linalg.solve(lower, sigma[om])
            gain = np.linalg.solve(lower.T, half)  # maps observed deviations to E[missing]
            cond_cov = sigma[mm] - half.T @ half
            x_mis = mu[mis] + dev @ gain
            t1[mis] += x_mis.sum(axis=0)
            cross = x_obs.T @ x_mis
            t2[om] += cross
            t2[mo] += cross.T
            t2[mm] += x_mis.T @ x_mis + count * cond_cov
        mu_next = t1 / n
        sigma_next = t2 / n - np.outer(mu_next, mu_next)
        return mu_next, (sigma_next + sigma_next.T) / 2.0, ll

    mu1, sigma1, ll = em_step(mu, sigma)
    trace = [ll]
    steps = 1
    # Extrapolation length is bounded; the bound doubles while full-length
    # jumps keep succeeding and halves on any rejection. Unbounded jumps can
    # raise the loglik yet land on wildly scaled covariances whose later
    # factorizations break down.
    step_cap = 4.0
    while steps < max_iter:
        mu2, sigma2, ll = em_step(mu1, sigma1)
        steps += 1
        if abs(ll - trace[-1]) <= tol * (1.0 + abs(trace[-1])):
            trace.append(ll)
            return mu1, sigma1, trace
        trace.append(ll)
        r_mu, r_sig = mu1 - mu, sigma1 - sigma
        v_mu, v_sig = (mu2 - mu1) - r_mu, (sigma2 - sigma1) - r_sig
        v_norm2 = float(np.sum(v_mu * v_mu) + np.sum(v_sig * v_sig))
        r_norm2 = float(np.sum(r_mu * r_mu) + np.sum(r_sig * r_sig))
        accepted = False
        if v_norm2 > 0.0 and np.isfinite(v_norm2) and np.isfinite(r_norm2):
            alpha = min(max(-math.sqrt(r_norm2 / v_norm2), -step_cap), -1.0)
            at_cap = alpha == -step_cap
            mu_x = mu - 2.0 * alpha * r_mu + alpha * alpha * v_mu
            sigma_x = sigma - 2.0 * alpha * r_sig + alpha * alpha * v_sig
            if steps < max_iter:
                try:
                    mu_n, sigma_n, ll_x = em_step(mu_x, sigma_x)
                except NotPositiveDefinite:
                    step_cap = max(step_cap / 2.0, 1.0)
                else:
                    steps += 1
                    if ll_x >= trace[-1]:
                        trace.append(ll_x)
                        mu, sigma = mu_x, sigma_x
                        mu1, sigma1 = mu_n, sigma_n
                        accepted = True
                        if at_cap:
                            step_cap *= 2.0
                    else:
                        step_cap = max(step_cap / 2.0, 1.0)
        if not accepted:
            mu, sigma = mu1, sigma1
            mu1, sigma1 = mu2, sigma2
    if len(trace) >= 2:
        change = f"{abs(trace[-1] - trace[-2]) / (1 + abs(trace[-2])):.3e}"
    else:
        change = "n/a"
    raise NoConvergence(
        f"EM did not converge within {max_iter} iterations (last relative change {change})"
    )


def em_mvn(data: Dataset, tol=EM_DEFAULT_TOL, max_iter=EM_DEFAULT_MAX_ITER):
    """Maximum likelihood moments and regression fit under normal MCAR data.

    Returns (MomentStructure, FitResult). Standard errors invert the expected
    information evaluated at the estimate, weighted by the dataset's own
    pattern counts, and are asymptotic (df_resid = inf).
    """
    _check_pairwise_coverage(data.mask)
    groups = data.pattern_groups()
    mu, sigma, _ = _em_moments(data.values, groups, tol, max_iter)
    moments = MomentStructure(mu, sigma)
    model = regression_from_moments(moments)
    patterns = [(observed, float(rows.size)) for rows, observed in groups]
    info = asymptotics.information_from_patterns(sigma, patterns)
    try:
        v_omega = asymptotics.cov_omega(info)
    except SingularInformation:
        raise
    grad = asymptotics.grad_beta(moments)
    cov_beta = grad @ v_omega @ grad.T
    se = np.sqrt(np.clip(np.diagonal(cov_beta), 0.0, None))
    fit = FitResult(
        method="em",
        beta0=model.beta0,
        beta=model.beta,
        sigma2=model.sigma2,
        se=se,
        df_resid=math.inf,
    )
    return moments, fit


def _conditional_draw(values, groups, mu, sigma, stream):
    """Fill missing cells with draws from their conditional normals."""
    out = values.copy()
    for rows, observed in groups:
        observed = list(observed)
        missing = [j for j in range(values.shape[1]) if j not in observed]
        if not missing:
            continue
        s_oo = sigma[np.ix_(observed, observed)]
        s_om = sigma[np.ix_(observed, missing)]
        gain = np.linalg.solve(s_oo, s_om)
        cond_cov = sigma[np.ix_(missing, missing)] - s_om.T @ gain
        lower = chol(cond_cov)
        dev = values[np.ix_(rows, observed)] - mu[observed]
        center = mu[missing] + dev @ gain
        noise = stream.std_normal((rows.size, len(missing)))
        out[np.ix_(rows, missing)] = center + noise @ lower.T
    return out


def mi_mvn(data: Dataset, m_imputations, stream: RngStream,
           tol=EM_DEFAULT_TOL, max_iter=EM_DEFAULT_MAX_ITER):
    """Proper normal-theory multiple imputation via the bootstrap.

    For each of the `m_imputations` completed datasets: re-estimate the joint
    moments by EM on a bootstrap resample of the rows (parameter draw), then
    draw every missing block from its conditional normal given that row's
    observed values. Draw order is fixed: bootstrap indices first, then the
    pattern groups in their deterministic order.
    """
    m_imputations = int(m_imputations)
    if m_imputations < 1:
        raise DomainError(f"need at least one imputation, got {m_imputations}")
    _check_pairwise_coverage(data.mask)
    groups = data.pattern_groups()
    # Bootstrap refits start from the full-data estimate; each resample's MLE
    # sits within sampling error of it, so EM covers a short distance instead
    # of climbing from the available-case diagonal every time.
    mu_full, sigma_full, _ = _em_moments(data.values, groups, tol, max_iter)
    completed = []
    for _ in range(m_imputations):
        indices = stream.integers(data.n, size=data.n)
        boot_values = data.values[indices]
        boot = Dataset(columns=data.columns, values=boot_values)
        _check_pairwise_coverage(boot.mask)
        mu, sigma, _ = _em_moments(boot_values, boot.pattern_groups(), tol, max_iter,
                                   start=(mu_full, sigma_full))
        filled = _conditional_draw(data.values, groups, mu, sigma, stream)
        completed.append(Dataset(columns=data.columns, values=filled))
    return completed


def mi_pmm(data: Dataset, m_imputations, k_donors=5, cycles=10, *, stream: RngStream):
    """Predictive mean matching by chained equations.

    Each incomplete column starts from random observed draws; then for
    `cycles` passes, each such column in turn is regressed (with intercept)
    on all other columns over its donors (rows observing it), predictions are
    made for donors and recipients alike, and every recipient receives the
    value of one of its `k_donors` nearest donors by predicted mean, chosen
    uniformly. Imputed values are always verbatim donor values; the outcome
    is never imputed (it is never missing).
    """
    m_imputations = int(m_imputations)
    if m_imputations < 1:
        raise DomainError(f"need at least one imputation, got {m_imputations}")
    k_donors = int(k_donors)
    cycles = int(cycles)
    if k_donors < 1 or cycles < 1:
        raise DomainError("k_donors and cycles must be positive")
    mask = data.mask
    incomplete = [j for j in range(data.p) if not np.all(mask[:, j])]
    donors_by_col = {j: np.flatnonzero(mask[:, j]) for j in incomplete}
    recipients_by_col = {j: np.flatnonzero(~mask[:, j]) for j in incomplete}
    for j in incomplete:
        if donors_by_col[j].size < k_donors:
            raise InsufficientDonors(
                f"column {data.columns[j]!r} has {donors_by_col[j].size} observed "
                f"values, fewer than k_donors={k_donors}"
            )
    completed = []
    for _ in range(m_imputations):
        work = data.values.copy()
        for j in incomplete:
            donors = donors_by_col[j]
            picks = stream.integers(donors.size, size=recipients_by_col[j].size)
            work[recipients_by_col[j], j] = work[donors[picks], j]
        for _ in range(cycles):
            for j in incomplete:
                donors = donors_by_col[j]
                recipients = recipients_by_col[j]
                others = [c for c in range(work.shape[1]) if c != j]
                predictors = np.column_stack([np.ones(work.shape[0]), work[:, others]])
                coef, *_ = np.linalg.lstsq(predictors[donors], work[donors, j], rcond=None)
                predicted = predictors @ coef
                chosen = _match_donors(
                    predicted[donors], predicted[recipients], k_donors, stream
                )
                work[recipients, j] = work[donors[chosen], j]
        completed.append(Dataset(columns=data.columns, values=work))
    return completed


def _match_donors(donor_pred, recipient_pred, k, stream):
    """Index (into donors) of one of the k nearest donors per recipient."""
    order = np.argsort(donor_pred, kind="stable")
    sorted_pred = donor_pred[order]
    n_donors = donor_pred.size
    width = min(2 * k, n_donors)
    # A contiguous window of `width` sorted donors around the insertion point
    # always contains the k nearest.
    start = np.searchsorted(sorted_pred, recipient_pred) - k
    start = np.clip(start, 0, n_donors - width)
    candidates = start[:, None] + np.arange(width)[None, :]
    distance = np.abs(sorted_pred[candidates] - recipient_pred[:, None])
    nearest = np.argpartition(distance, k - 1, axis=1)[:, :k]
    pick = stream.integers(k, size=recipient_pred.size)
    chosen_sorted = nearest[np.arange(recipient_pred.size), pick]
    return order[candidates[np.arange(recipient_pred.size), chosen_sorted]]


@dataclass(frozen=True, eq=False)
class PooledResult:
    """Rubin-combined estimate across M imputed-data fits."""

    method: str
    m: int
    estimates: np.ndarray
    within: np.ndarray
    between: np.ndarray
    total: np.ndarray
    df: np.ndarray
    fmi_hat: np.ndarray

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.total)

    def conf_int(self, level=0.95) -> np.ndarray:
        half = np.array(
            [t_quantile(df, 0.5 + level / 2.0) for df in self.df]
        ) * self.se
        return np.column_stack([self.estimates - half, self.estimates + half])


def rubin_pool(fits, m=None) -> PooledResult:
    """Pool the first `m` fits (all of them when `m` is None).

    total = within + (1 + 1/M) between;  fmi_hat = (1 + 1/M) B / total;
    df follows Barnard-Rubin with the complete-data df taken from the fits.
    """
    fits = list(fits)
    if m is None:
        m = len(fits)
    m = int(m)
    if m < 2:
        raise DomainError(f"pooling needs at least two fits, got {m}")
    if m > len(fits):
        raise DomainError(f"asked to pool {m} fits but only {len(fits)} provided")
    fits = fits[:m]
    df_com = fits[0].df_resid
    if any(fit.df_resid != df_com for fit in fits):
        raise InvariantError("fits to pool carry different complete-data df")
    estimates = np.stack([fit.estimates for fit in fits])
    ses = np.stack([fit.se for fit in fits])
    qbar = estimates.mean(axis=0)
    within = np.mean(ses**2, axis=0)
    between = np.var(estimates, axis=0, ddof=1)
    total = within + (1.0 + 1.0 / m) * between
    lam = np.where(total > 0, (1.0 + 1.0 / m) * between / np.where(total > 0, total, 1.0), 0.0)
    df = _barnard_rubin_df(lam, m, df_com, qbar.size)
    return PooledResult(
        method=fits[0].method,
        m=m,
        estimates=qbar,
        within=within,
        between=between,
        total=total,
        df=df,
        fmi_hat=lam,
    )


def _barnard_rubin_df(lam, m, df_com, size):
    df = np.empty(size)
    for i, l in enumerate(np.atleast_1d(lam)):
        if l <= 0.0:
            # No between-imputation variance: the complete-data df stands.
            df[i] = df_com
            continue
        nu_m = (m - 1) / (l * l)
        if math.isinf(df_com):
            df[i] = nu_m
        else:
            nu_obs = ((df_com + 1.0) / (df_com + 3.0)) * df_com * (1.0 - l)
            df[i] = 1.0 / (1.0 / nu_m + 1.0 / nu_obs)
    return df
