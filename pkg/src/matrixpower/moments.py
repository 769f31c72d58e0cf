"""Joint moment structures linking a linear model to its observables.

The joint vector is (x1..xp, y). A RegressionModel (intercept, slopes,
residual variance) plus regressor moments (mu_x, sigma_xx) determines the
joint mean and covariance; conversely the regression coefficients are
recoverable from the bordered raw second-moment matrix

    Omega = E[(1, x, y)(1, x, y)'],

whose leading (p+1) block is A = E[(1, x)(1, x)'] and whose last column holds
b = (E[y], E[x y]). Then (beta0, beta) = A^{-1} b and sigma2 is the Schur
complement of A in Omega. Everything downstream (information matrices,
gradients) is parameterized by the centered moments (mu, sigma); this module
owns the translation to and from raw moments.

Effect sizes are handled through R^2: solve for the residual variance giving
a target R^2, scale all slopes uniformly to raise R^2 by delta, or move a
single slope (a quadratic in that coordinate) to do the same.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NoRealRoot, NotPositiveDefinite, SchemaError
from .numerics import chol, symmetrize


def _readonly(a, dtype=float):
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class RegressionModel:
    """y = beta0 + beta'x + e with Var(e) = sigma2.

    sigma2 = 0 (an exact linear relation) is representable; operations that
    need a positive residual variance check for themselves.
    """

    beta0: float
    beta: np.ndarray
    sigma2: float

    def __post_init__(self):
        beta = _readonly(np.atleast_1d(self.beta))
        if beta.ndim != 1 or beta.size == 0:
            raise DomainError("beta must be a nonempty vector")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if not np.isfinite(self.sigma2) or self.sigma2 < 0:
            raise DomainError(f"sigma2 must be finite and nonnegative, got {self.sigma2}")

    @property
    def p(self) -> int:
        return self.beta.size

    @property
    def beta_full(self) -> np.ndarray:
        """(beta0, beta) as one vector, intercept first."""
        return np.concatenate(([self.beta0], self.beta))


@dataclass(frozen=True, eq=False)
class MomentStructure:
    """Mean and covariance of the joint vector (x1..xp, y).

    The covariance is stored exactly symmetric. Positive definiteness is
    required by the likelihood-based operations and enforced where they
    factor sigma, not at construction, so degenerate boundaries (zero
    residual variance) remain representable.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = _readonly(np.atleast_1d(self.mu))
        sigma = symmetrize(self.sigma)
        if mu.ndim != 1 or mu.size < 2:
            raise DomainError("mu must cover at least one regressor and the outcome")
        if sigma.shape != (mu.size, mu.size):
            raise DomainError(
                f"sigma shape {sigma.shape} does not match mu length {mu.size}"
            )
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def p(self) -> int:
        """Number of regressors (joint dimension minus the outcome)."""
        return self.mu.size - 1

    def omega_view(self) -> np.ndarray:
        """Bordered raw second-moment matrix of (1, x1..xp, y)."""
        d = self.mu.size
        omega = np.empty((d + 1, d + 1))
        omega[0, 0] = 1.0
        omega[0, 1:] = self.mu
        omega[1:, 0] = self.mu
        omega[1:, 1:] = self.sigma + np.outer(self.mu, self.mu)
        return omega


def build_moments(mu_x, sigma_xx, model: RegressionModel) -> MomentStructure:
    """Joint moments of (x, y) implied by regressor moments and the model."""
    mu_x = np.atleast_1d(np.asarray(mu_x, dtype=float))
    sigma_xx = symmetrize(sigma_xx)
    p = model.p
    if mu_x.shape != (p,) or sigma_xx.shape != (p, p):
        raise DomainError(
            f"regressor moments (len {mu_x.size}, shape {sigma_xx.shape}) "
            f"do not match a model with p={p}"
        )
    chol(sigma_xx)  # regressor covariance must be positive definite
    sxy = sigma_xx @ model.beta
    mu = np.concatenate([mu_x, [model.beta0 + model.beta @ mu_x]])
    sigma = np.empty((p + 1, p + 1))
    sigma[:p, :p] = sigma_xx
    sigma[:p, p] = sxy
    sigma[p, :p] = sxy
    sigma[p, p] = model.beta @ sxy + model.sigma2
    return MomentStructure(mu=mu, sigma=sigma)


def regression_from_moments(m: MomentStructure) -> RegressionModel:
    """Recover (beta0, beta, sigma2) from the bordered raw-moment matrix."""
    q = m.p + 1
    omega = m.omega_view()
    a = omega[:q, :q]
    b = omega[:q, q]
    lower = chol(a)
    beta_full = np.linalg.solve(lower.T, np.linalg.solve(lower, b))
    sigma2 = float(omega[q, q] - beta_full @ b)
    if sigma2 < 0.0:
        # The Schur complement is nonnegative for any PSD joint covariance;
        # tolerate rounding at the degenerate boundary, reject real violations.
        if sigma2 < -1e-10 * max(1.0, omega[q, q]):
            raise NotPositiveDefinite(f"implied residual variance {sigma2} is negative")
        sigma2 = 0.0
    return RegressionModel(beta0=beta_full[0], beta=beta_full[1:], sigma2=sigma2)


def explained_variance(beta, sigma_xx) -> float:
    """beta' sigma_xx beta, the variance of the linear predictor."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    return float(beta @ symmetrize(sigma_xx) @ beta)


def r_squared(model: RegressionModel, sigma_xx) -> float:
    """Population share of outcome variance explained by the regressors."""
    if model.sigma2 <= 0:
        raise DomainError("r_squared needs a positive residual variance")
    s = explained_variance(model.beta, sigma_xx)
    return s / (s + model.sigma2)


def sigma2_for_r2(beta, sigma_xx, r2) -> float:
    """Residual variance making the model's R^2 equal `r2`."""
    r2 = float(r2)
    if not 0.0 < r2 < 1.0:
        raise DomainError(f"r2 must lie strictly inside (0, 1), got {r2}")
    s = explained_variance(beta, sigma_xx)
    if s <= 0.0:
        raise DomainError("beta' sigma_xx beta must be positive to set an R^2")
    return s * (1.0 - r2) / r2


def inflate_beta_for_r2(model: RegressionModel, sigma_xx, delta) -> RegressionModel:
    """Scale all slopes by a common factor so R^2 rises by `delta`.

    The factor satisfies c^2 = (R2 + delta) sigma2 / ((1 - R2 - delta) S)
    with S = beta' sigma_xx beta; equivalently c^2 is the ratio of target to
    current variance odds. delta = 0 returns the model unchanged.
    """
    delta = float(delta)
    if delta == 0.0:
        return model
    current = r_squared(model, sigma_xx)
    target = current + delta
    if not 0.0 < target < 1.0:
        raise DomainError(f"target R^2 {target} outside (0, 1)")
    s = explained_variance(model.beta, sigma_xx)
    c = math.sqrt(target * model.sigma2 / ((1.0 - target) * s))
    return RegressionModel(beta0=model.beta0, beta=c * model.beta, sigma2=model.sigma2)


def poke_beta_for_r2(model: RegressionModel, sigma_xx, delta, j) -> RegressionModel:
    """Move slope `j` alone so R^2 rises by `delta`.

    The explained variance is quadratic in the free slope t:

        S(t) = sigma_jj t^2 + 2 r t + rest,   r = (sigma_xx beta)_j - sigma_jj beta_j,

    so t solves S(t) = T with T the explained variance matching the target
    R^2 at the model's residual variance. Of the two roots the one closest to
    the current slope is kept; ties go to the larger root. A negative
    discriminant (target below the parabola's minimum, possible only when
    delta < 0) raises NoRealRoot.
    """
    j = int(j)
    if not 0 <= j < model.p:
        raise IndexError(f"slope index {j} out of range [0, {model.p})")
    delta = float(delta)
    current = r_squared(model, sigma_xx)
    target = current + delta
    if not 0.0 < target < 1.0:
        raise DomainError(f"target R^2 {target} outside (0, 1)")
    sigma_xx = symmetrize(sigma_xx)
    s_jj = sigma_xx[j, j]
    sb = sigma_xx @ model.beta
    s_now = float(model.beta @ sb)
    r = float(sb[j] - s_jj * model.beta[j])
    rest = s_now - 2.0 * model.beta[j] * sb[j] + s_jj * model.beta[j] ** 2
    t_target = target * model.sigma2 / (1.0 - target)
    disc = r * r - s_jj * (rest - t_target)
    if disc < 0.0:
        raise NoRealRoot(
            f"R^2 {target:.6f} is unreachable by slope {j} alone "
            f"(shortfall {-disc:.3e})"
        )
    root = math.sqrt(disc)
    lo = (-r - root) / s_jj
    hi = (-r + root) / s_jj
    t = hi if abs(hi - model.beta[j]) <= abs(lo - model.beta[j]) else lo
    beta = model.beta.copy()
    beta[j] = t
    return RegressionModel(beta0=model.beta0, beta=beta, sigma2=model.sigma2)


def parameter_count(p: int) -> int:
    """Free moment parameters for p regressors: means plus vech(sigma)."""
    if p < 1:
        raise DomainError(f"need at least one regressor, got p={p}")
    return (p + 2) * (p + 3) // 2 - 1


class VechIndex:
    """Flat indexing of the free moment parameters for p regressors.

    Symbols (s, t) index the bordered raw-moment matrix over (1, x1..xp, y):
    position 0 is the constant, 1..p the regressors, p+1 the outcome. The
    constant's own entry (0, 0) is fixed at 1 and excluded. Order: the mean
    row (0,1)..(0,p+1), then the covariance upper triangle row-major
    (1,1), (1,2), .., (1,p+1), (2,2), .., (p+1,p+1).
    """

    def __init__(self, p: int):
        if p < 1:
            raise DomainError(f"need at least one regressor, got p={p}")
        self.p = p
        dim = p + 2  # constant + regressors + outcome
        symbols = [(0, t) for t in range(1, dim)]
        symbols += [(s, t) for s in range(1, dim) for t in range(s, dim)]
        self._symbols = tuple(symbols)
        self._index = {sym: i for i, sym in enumerate(symbols)}

    @property
    def n_params(self) -> int:
        return len(self._symbols)

    @property
    def n_mean(self) -> int:
        return self.p + 1

    @property
    def n_cov(self) -> int:
        return self.n_params - self.n_mean

    @property
    def mean_slice(self) -> slice:
        return slice(0, self.n_mean)

    @property
    def cov_slice(self) -> slice:
        return slice(self.n_mean, self.n_params)

    @property
    def symbols(self) -> tuple:
        return self._symbols

    def index_of(self, s: int, t: int) -> int:
        if s > t:
            s, t = t, s
        try:
            return self._index[(s, t)]
        except KeyError:
            raise IndexError(f"({s}, {t}) is not a free moment parameter for p={self.p}") from None

    def symbol_of(self, flat: int) -> tuple:
        if not 0 <= flat < self.n_params:
            raise IndexError(f"flat index {flat} out of range [0, {self.n_params})")
        return self._symbols[flat]


def bigfive_correlation() -> np.ndarray:
    """Correlation matrix of the five personality traits (O, C, E, A, N)."""
    return np.array(
        [
            [1.00, 0.26, 0.47, 0.20, -0.16],
            [0.26, 1.00, 0.28, 0.46, -0.28],
            [0.47, 0.28, 1.00, 0.20, -0.35],
            [0.20, 0.46, 0.20, 1.00, -0.37],
            [-0.16, -0.28, -0.35, -0.37, 1.00],
        ]
    )


def parse_model_document(document) -> tuple[MomentStructure, RegressionModel]:
    """Build (moments, model) from a JSON string or mapping.

    Expected keys: mu_x (list), sigma_xx (list of lists), beta0 (number),
    beta (list), and exactly one of sigma2 / r2.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"model document is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise SchemaError(f"model document must be an object, got {type(document).__name__}")
    for key in ("mu_x", "sigma_xx", "beta0", "beta"):
        if key not in document:
            raise SchemaError(f"model document missing key {key!r}")
    has_sigma2 = "sigma2" in document
    has_r2 = "r2" in document
    if has_sigma2 == has_r2:
        raise SchemaError("model document must carry exactly one of 'sigma2' and 'r2'")

    def number(key):
        value = document[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{key!r} must be a number")
        return float(value)

    def vector(key):
        value = document[key]
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise SchemaError(f"{key!r} must be a list of numbers")
        return np.array(value, dtype=float)

    mu_x = vector("mu_x")
    beta = vector("beta")
    raw_sigma = document["sigma_xx"]
    if not isinstance(raw_sigma, list) or not all(isinstance(row, list) for row in raw_sigma):
        raise SchemaError("'sigma_xx' must be a list of rows")
    try:
        sigma_xx = np.array(raw_sigma, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"'sigma_xx' is not numeric: {exc}") from exc
    if sigma_xx.ndim != 2 or sigma_xx.shape[0] != sigma_xx.shape[1]:
        raise SchemaError(f"'sigma_xx' must be square, got shape {sigma_xx.shape}")
    if mu_x.size != beta.size or sigma_xx.shape[0] != beta.size:
        raise SchemaError(
            f"inconsistent sizes: mu_x {mu_x.size}, beta {beta.size}, "
            f"sigma_xx {sigma_xx.shape}"
        )
    sigma2 = number("sigma2") if has_sigma2 else sigma2_for_r2(beta, sigma_xx, number("r2"))
    model = RegressionModel(beta0=number("beta0"), beta=beta, sigma2=sigma2)
    return build_moments(mu_x, sigma_xx, model), model
