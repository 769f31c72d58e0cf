"""Symmetric linear algebra, distribution functions, and seeded RNG streams.

Symmetric matrices are plain ``numpy.ndarray`` values. Every routine here
mirrors the upper triangle onto the lower one before working, and returns
exactly symmetric output, so callers never have to care which triangle was
authoritative.

The distribution functions wrap scipy; they exist so the rest of the package
has one place with the package's domain checks and error types.
"""

from __future__ import annotations

import numpy as np
from scipy import special, stats

from .errors import DomainError, NoConvergence, NotPositiveDefinite

# Cholesky pivot threshold, relative to the largest diagonal entry.
PD_PIVOT_RTOL = 1e-12

_MASK64 = (1 << 64) - 1


def symmetrize(a) -> np.ndarray:
    """Return a float copy of `a` with the upper triangle mirrored down.

    The mirror is an exact copy, not an average, so the result satisfies
    ``out[i, j] == out[j, i]`` bitwise.
    """
    out = np.array(a, dtype=float)
    if out.ndim != 2 or out.shape[0] != out.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {out.shape}")
    upper = np.triu_indices(out.shape[0], k=1)
    out[upper[1], upper[0]] = out[upper]
    return out


def chol(spd) -> np.ndarray:
    """Lower-triangular Cholesky factor of a symmetric positive definite matrix.

    Raises NotPositiveDefinite when the factorization breaks down or any
    squared pivot falls at or below PD_PIVOT_RTOL times the largest diagonal
    entry, so barely-positive-semidefinite inputs fail rather than produce a
    factor with an absurd condition number. Only the lower triangle of the
    input is read.
    """
    a = np.array(spd, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] == 0:
        raise DomainError("cannot factor an empty matrix")
    tol = PD_PIVOT_RTOL * max(float(np.max(np.diagonal(a))), 0.0)
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("matrix has a nonpositive pivot") from None
    pivots = np.diagonal(lower) ** 2
    if np.min(pivots) <= tol:
        j = int(np.argmin(pivots))
        raise NotPositiveDefinite(
            f"pivot {pivots[j]:.6e} at column {j} is below tolerance {tol:.6e}"
        )
    return lower


def spd_inverse(spd) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via its Cholesky factor.

    Solves L L' X = I, then mirrors the result so it is exactly symmetric.
    """
    a = symmetrize(spd)
    lower = chol(a)
    eye = np.eye(a.shape[0])
    inv = np.linalg.solve(lower.T, np.linalg.solve(lower, eye))
    return symmetrize(inv)


def sym_eigen(sym) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and orthonormal eigenvector columns of `sym`.

    Column j of the returned matrix pairs with eigenvalue j.
    """
    a = symmetrize(sym)
    try:
        values, vectors = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(f"eigendecomposition failed: {exc}") from exc
    # eigh returns ascending order.
    return values[::-1].copy(), vectors[:, ::-1].copy()


def _check_prob(p, name="p"):
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"{name} must lie strictly inside (0, 1), got {p}")
    return p


def noncentral_chisq_cdf(x, df, noncentrality) -> float:
    """CDF of the noncentral chi-square at `x`.

    `noncentrality` is the sum-of-squared-means parameter (0 gives the central
    distribution). Values of `x` at or below zero return 0.
    """
    df = float(df)
    lam = float(noncentrality)
    if df <= 0:
        raise DomainError(f"df must be positive, got {df}")
    if lam < 0:
        raise DomainError(f"noncentrality must be nonnegative, got {lam}")
    x = float(x)
    if x <= 0.0:
        return 0.0
    if lam == 0.0:
        return float(stats.chi2.cdf(x, df))
    return float(np.clip(stats.ncx2.cdf(x, df, lam), 0.0, 1.0))


def chisq_quantile(p, df) -> float:
    """Quantile of the central chi-square distribution."""
    p = _check_prob(p)
    df = float(df)
    if df <= 0:
        raise DomainError(f"df must be positive, got {df}")
    return float(stats.chi2.ppf(p, df))


def normal_cdf(x) -> float:
    """Standard normal CDF."""
    return float(special.ndtr(float(x)))


def normal_quantile(p) -> float:
    """Standard normal quantile."""
    return float(special.ndtri(_check_prob(p)))


def t_quantile(df, p) -> float:
    """Quantile of Student's t; df may be math.inf for the normal limit."""
    p = _check_prob(p)
    df = float(df)
    if df <= 0:
        raise DomainError(f"df must be positive, got {df}")
    if np.isinf(df):
        return normal_quantile(p)
    return float(stats.t.ppf(p, df))


class RngStream:
    """Reproducible random stream keyed by (seed, stream_id).

    Backed by the Philox counter-based generator, so a stream's output depends
    only on its key, never on how many other streams exist or which thread
    runs it. Streams are single-owner: draw from one sequentially.

    All draws are defined in terms of the uniform stream so they are stable
    across numpy versions of the normal/bernoulli samplers:

    * ``std_normal`` is the inverse normal CDF of ``uniform01`` (uniforms are
      clipped away from 0, since numpy yields [0, 1)),
    * ``bernoulli(p)`` is ``uniform01() < p``,
    * ``integers(n)`` is ``floor(n * uniform01())``.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = (self.seed & _MASK64) | ((self.stream_id & _MASK64) << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def derive(self, index: int) -> "RngStream":
        """Child stream disjoint from this one and from its siblings.

        Child ids never collide with base ids below 2**32, so deriving from
        per-replicate streams keyed 0..2**32-1 is always safe.
        """
        index = int(index)
        if not 0 <= index < (1 << 32):
            raise DomainError(f"derive index must be in [0, 2**32), got {index}")
        child = (((self.stream_id + 1) << 32) | index) & _MASK64
        return RngStream(self.seed, child)

    def uniform01(self, size=None):
        """Uniform draws on [0, 1)."""
        return self._gen.random(size)

    def std_normal(self, size=None):
        u = self._gen.random(size)
        u = np.maximum(u, 2.0**-54)
        out = special.ndtri(u)
        return float(out) if size is None else out

    def bernoulli(self, p, size=None):
        p = float(p)
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"bernoulli p must lie in [0, 1], got {p}")
        return self._gen.random(size) < p

    def integers(self, n, size=None):
        """Uniform integers on {0, ..., n-1}."""
        n = int(n)
        if n <= 0:
            raise DomainError(f"integers needs a positive range, got {n}")
        out = np.floor(self._gen.random(size) * n).astype(np.int64)
        # floor(n*u) can only hit n if u rounds up to 1.0; clip defensively.
        out = np.minimum(out, n - 1)
        return int(out) if size is None else out

    def permutation(self, n) -> np.ndarray:
        """Random permutation of range(n) (numpy's Fisher-Yates shuffle)."""
        n = int(n)
        if n < 0:
            raise DomainError(f"permutation length must be nonnegative, got {n}")
        return self._gen.permutation(n)
