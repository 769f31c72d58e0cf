"""Large-sample covariance of regression estimates under matrix sampling.

Data collected under a matrix sampling design are multivariate normal rows
with a form-determined pattern of observed entries. The observed-data
log-likelihood is a sum of per-form Gaussian terms, so the expected
information over the free moment parameters (means and distinct covariances
of (x1..xp, y), ordered by VechIndex) is a sum of per-form blocks built from

    tau(k) = padded inverse of the form's covariance submatrix,

zero-padded back to full size over the variables form k does not administer.
The blocks are, with w_k respondents on form k:

    mean x mean:        sum_k w_k tau(k)
    mean x covariance:  0
    covariance block:   entries w_k kappa_a kappa_b
                        (tau_su tau_tv + tau_sv tau_tu)
                        for parameters a=(s,t), b=(u,v), kappa halving
                        diagonal (s==t) symbols.

Inverting the information gives the covariance of the moment estimates; the
delta method maps it through the closed-form gradient of (beta0, beta) with
respect to the moments, yielding the asymptotic covariance of the coefficient
estimates. Comparing its diagonal against the complete-data covariance
sigma2 * (n E[(1,x)(1,x)'])^{-1} gives the fraction of missing information
per coefficient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .design import Design, validate_estimability
from .errors import DomainError, InvariantError, NotPositiveDefinite, SingularInformation
from .moments import MomentStructure, VechIndex, regression_from_moments
from .numerics import chol, spd_inverse, sym_eigen

_LN_2PI = math.log(2.0 * math.pi)


def tau_from_subset(sigma, observed) -> np.ndarray:
    """Inverse of sigma restricted to `observed`, zero-padded to full size."""
    sigma = np.asarray(sigma, dtype=float)
    observed = np.asarray(observed, dtype=int)
    out = np.zeros_like(sigma)
    block = spd_inverse(sigma[np.ix_(observed, observed)])
    out[np.ix_(observed, observed)] = block
    return out


def tau(m: MomentStructure, d: Design, form_index: int) -> np.ndarray:
    """Padded inverse of the covariance among what form `form_index` observes."""
    _check_dims(m, d)
    return tau_from_subset(m.sigma, d.form_variable_indices(form_index))


@lru_cache(maxsize=32)
def _cov_symbol_arrays(p: int):
    """(s, t, kappa) arrays for the covariance-block symbols, 0-based over (x, y)."""
    vech = VechIndex(p)
    cov_symbols = vech.symbols[vech.cov_slice]
    s = np.array([a - 1 for a, _ in cov_symbols])
    t = np.array([b - 1 for _, b in cov_symbols])
    kappa = np.where(s == t, 0.5, 1.0)
    return s, t, kappa


def information_from_patterns(sigma, patterns) -> np.ndarray:
    """Expected information over VechIndex parameters for observation patterns.

    `patterns` is an iterable of (observed_indices, weight) pairs, indices
    0-based over (x1..xp, y) and including the outcome; weights are the
    respondent counts carrying each pattern.
    """
    sigma = np.asarray(sigma, dtype=float)
    p = sigma.shape[0] - 1
    vech = VechIndex(p)
    s, t, kappa = _cov_symbol_arrays(p)
    info = np.zeros((vech.n_params, vech.n_params))
    mean_block = np.zeros((p + 1, p + 1))
    cov_block = np.zeros((vech.n_cov, vech.n_cov))
    kk = np.outer(kappa, kappa)
    for observed, weight in patterns:
        tau_k = tau_from_subset(sigma, observed)
        mean_block += weight * tau_k
        term = tau_k[np.ix_(s, s)] * tau_k[np.ix_(t, t)]
        term += tau_k[np.ix_(s, t)] * tau_k[np.ix_(t, s)]
        cov_block += weight * kk * term
    info[vech.mean_slice, vech.mean_slice] = mean_block
    info[vech.cov_slice, vech.cov_slice] = cov_block
    return info


def _check_dims(m: MomentStructure, d: Design):
    if m.p != d.p:
        raise DomainError(f"moments have p={m.p} but the design has p={d.p}")


def _design_patterns(d: Design, n_total: float):
    return [
        (d.form_variable_indices(k), form.fraction * n_total)
        for k, form in enumerate(d.forms)
    ]


def information(m: MomentStructure, d: Design, n_total: float) -> np.ndarray:
    """Expected information at `m` for `n_total` respondents under design `d`."""
    _check_dims(m, d)
    n_total = float(n_total)
    if n_total <= 0:
        raise DomainError(f"n_total must be positive, got {n_total}")
    return information_from_patterns(m.sigma, _design_patterns(d, n_total))


def cov_omega(info) -> np.ndarray:
    """Covariance of the moment estimates: the inverse information.

    Raises SingularInformation when the information cannot be factored; use
    report() for the design-aware diagnosis of which pairs are uncovered.
    """
    try:
        return spd_inverse(info)
    except NotPositiveDefinite as exc:
        raise SingularInformation(f"information matrix is singular: {exc}") from exc


def grad_beta(m: MomentStructure) -> np.ndarray:
    """Gradient of (beta0, beta) in the moment parameters, (p+1) x n_params.

    Columns follow VechIndex order. The raw-moment derivatives have closed
    forms in the columns of A^{-1} (A the leading block of the bordered
    raw-moment matrix); mean columns add the chain-rule terms from
    omega_st = sigma_st + mu_s mu_t, which vanish at zero means.
    """
    p = m.p
    q = p + 1
    y = p + 1  # symbol index of the outcome
    vech = VechIndex(p)
    omega = m.omega_view()
    a_inv = spd_inverse(omega[:q, :q])
    beta_full = a_inv @ omega[:q, q]

    # Derivatives with respect to the raw moments omega_st, keyed by symbol.
    raw = {}
    for idx_t in range(1, p + 1):
        raw[(0, idx_t)] = -(beta_full[idx_t] * a_inv[:, 0] + beta_full[0] * a_inv[:, idx_t])
    raw[(0, y)] = a_inv[:, 0].copy()
    for idx_s in range(1, p + 1):
        for idx_t in range(idx_s, p + 1):
            if idx_s == idx_t:
                raw[(idx_s, idx_s)] = -beta_full[idx_s] * a_inv[:, idx_s]
            else:
                raw[(idx_s, idx_t)] = -(
                    beta_full[idx_t] * a_inv[:, idx_s] + beta_full[idx_s] * a_inv[:, idx_t]
                )
        raw[(idx_s, y)] = a_inv[:, idx_s].copy()
    raw[(y, y)] = np.zeros(q)

    grad = np.zeros((q, vech.n_params))
    mu = m.mu  # mu[t-1] is the mean of symbol t
    for idx_t in range(1, y + 1):
        column = raw[(0, idx_t)].copy()
        # omega_tu = sigma_tu + mu_t mu_u for u = 1..p+1.
        for idx_u in range(1, y + 1):
            partial = 2.0 * mu[idx_t - 1] if idx_u == idx_t else mu[idx_u - 1]
            key = (idx_t, idx_u) if idx_t <= idx_u else (idx_u, idx_t)
            column += raw[key] * partial
        grad[:, vech.index_of(0, idx_t)] = column
    for idx_s in range(1, y + 1):
        for idx_t in range(idx_s, y + 1):
            grad[:, vech.index_of(idx_s, idx_t)] = raw[(idx_s, idx_t)]
    return grad


def complete_cov_beta(m: MomentStructure, n_total: float) -> np.ndarray:
    """Complete-data covariance of (beta0, beta): sigma2 (n E[(1,x)(1,x)'])^{-1}."""
    q = m.p + 1
    omega = m.omega_view()
    sigma2 = regression_from_moments(m).sigma2
    return sigma2 * spd_inverse(omega[:q, :q]) / float(n_total)


# Relative differences below this are reported as exactly zero missing
# information: the two covariances come from different numerical routes.
_FMI_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class AsymptoticReport:
    """Asymptotic covariance summary for one (moments, design, n) triple.

    `cov_beta` is the matrix-sampled covariance of (beta0, beta) at n_total
    respondents; `cov_beta_complete` is the covariance a complete-data design
    would give the same respondents; `fmi` compares their diagonals. The
    moment-estimate covariance and the gradient that produced `cov_beta` are
    kept for callers that need other functionals.
    """

    n_total: float
    cov_omega: np.ndarray
    grad_beta: np.ndarray
    cov_beta: np.ndarray
    cov_beta_complete: np.ndarray
    fmi: np.ndarray
    info_condition: float

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diagonal(self.cov_beta))

    @property
    def se_complete(self) -> np.ndarray:
        return np.sqrt(np.diagonal(self.cov_beta_complete))

    @property
    def cov_beta_unit(self) -> np.ndarray:
        """Per-respondent covariance: cov_beta scaled back by n_total."""
        return self.cov_beta * self.n_total

    @property
    def cov_beta_complete_unit(self) -> np.ndarray:
        return self.cov_beta_complete * self.n_total

    def to_json_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "se": self.se.tolist(),
            "se_complete": self.se_complete.tolist(),
            "fmi": self.fmi.tolist(),
            "cov_beta": self.cov_beta.tolist(),
            "cov_beta_complete": self.cov_beta_complete.tolist(),
            "info_condition": self.info_condition,
        }


def report(m: MomentStructure, d: Design, n_total: float) -> AsymptoticReport:
    """Full asymptotic summary; diagnoses uncovered pairs on singularity."""
    _check_dims(m, d)
    info = information(m, d, n_total)
    try:
        v_omega = spd_inverse(info)
    except NotPositiveDefinite as exc:
        uncovered = validate_estimability(d).uncovered_pairs
        detail = f"; pairs never co-administered: {list(uncovered)}" if uncovered else ""
        raise SingularInformation(
            f"information matrix is singular under this design{detail}",
            uncovered_pairs=uncovered,
        ) from exc
    grad = grad_beta(m)
    cov_beta = grad @ v_omega @ grad.T
    cov_beta = (cov_beta + cov_beta.T) / 2.0
    cov_complete = complete_cov_beta(m, n_total)
    with np.errstate(divide="ignore", invalid="ignore"):
        fmi = 1.0 - np.diagonal(cov_complete) / np.diagonal(cov_beta)
    fmi = np.where(np.abs(fmi) < _FMI_FLOOR, 0.0, fmi)
    if np.any(fmi < 0.0) or np.any(fmi >= 1.0):
        raise InvariantError(f"fraction of missing information outside [0, 1): {fmi}")
    eigenvalues, _ = sym_eigen(info)
    condition = float(eigenvalues[0] / eigenvalues[-1])
    return AsymptoticReport(
        n_total=float(n_total),
        cov_omega=v_omega,
        grad_beta=grad,
        cov_beta=cov_beta,
        cov_beta_complete=cov_complete,
        fmi=fmi,
        info_condition=condition,
    )


def pattern_loglik(values, groups, mu, sigma) -> float:
    """Gaussian log-likelihood of rows observed on varying index subsets.

    `groups` pairs a row-index array with the tuple of observed columns those
    rows share. Rows enter through their own marginal density, so the total
    is exact for any missing-at-random pattern.
    """
    values = np.asarray(values, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    total = 0.0
    for rows, observed in groups:
        rows = np.asarray(rows, dtype=int)
        if rows.size == 0:
            continue
        observed = list(observed)
        lower = chol(sigma[np.ix_(observed, observed)])
        deviations = values[np.ix_(rows, observed)] - mu[observed]
        z = np.linalg.solve(lower, deviations.T)
        logdet = 2.0 * float(np.sum(np.log(np.diagonal(lower))))
        total += -0.5 * rows.size * (len(observed) * _LN_2PI + logdet)
        total += -0.5 * float(np.sum(z * z))
    return float(total)


def loglik(data, m: MomentStructure, d: Design) -> float:
    """Observed-data log-likelihood of a form-labelled dataset at moments `m`.

    Every row must observe exactly the variables its form administers
    (InvariantError otherwise).
    """
    _check_dims(m, d)
    if data.form is None:
        raise InvariantError("loglik needs per-row form labels")
    if data.p != d.p:
        raise DomainError(f"dataset has p={data.p} but the design has p={d.p}")
    mask = ~np.isnan(data.values)
    groups = []
    for k in range(d.form_count):
        rows = np.flatnonzero(data.form == k)
        if rows.size == 0:
            continue
        observed = d.form_variable_indices(k)
        expected = np.zeros(d.p + 1, dtype=bool)
        expected[list(observed)] = True
        if not np.array_equal(mask[rows], np.tile(expected, (rows.size, 1))):
            raise InvariantError(
                f"rows assigned to form {d.forms[k].name!r} do not observe its item set"
            )
        groups.append((rows, observed))
    labelled = sum(len(rows) for rows, _ in groups)
    if labelled != data.values.shape[0]:
        raise InvariantError("some rows carry form labels outside the design")
    return pattern_loglik(data.values, groups, m.mu, m.sigma)
