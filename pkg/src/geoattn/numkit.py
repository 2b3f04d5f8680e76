"""Deterministic numerical kernel: seeded RNG streams, dense symmetric
linear algebra, and sampling primitives.

Everything here is dense and double precision. The largest problems this
package produces stay near 3,000 points, where O(n^3) factorizations are
cheap, so no sparse or iterative machinery is provided.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack as _lapack

from .errors import NonConvergence, NotPositiveDefinite

DEFAULT_KERNEL_JITTER = 1e-8

POWER_ITER_TOL = 1e-10
POWER_ITER_MAX = 10_000


class RngStream:
    """A named, independent random stream.

    Streams are backed by the counter-based Philox generator keyed on
    ``(seed, stream_id)``: identical pairs replay the identical sequence,
    distinct ``stream_id`` values give statistically independent sequences
    with no ordering constraints between them. Instances are single-owner;
    never share one across concurrent tasks.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, stream_id: int) -> "RngStream":
        """Fresh independent stream under the same seed."""
        return RngStream(self.seed, stream_id)

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers on the inclusive range [low, high]."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def binomial(self, n, p, size=None) -> np.ndarray:
        return self._gen.binomial(n, p, size)

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def _as_square(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a


def cholesky(a: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Lower-triangular L with L @ L.T == a + jitter * I.

    Raises :class:`NotPositiveDefinite` (carrying the offending row) if a
    pivot is non-positive after the jitter is applied. ``a`` must be
    symmetric as stored; only its lower triangle is read.
    """
    a = _as_square(a)
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    if jitter:
        a = a + jitter * np.eye(a.shape[0])
    c, info = _lapack.dpotrf(a, lower=1, clean=1, overwrite_a=False)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:  # pragma: no cover - argument errors are caught above
        raise ValueError(f"illegal value in argument {-info} of dpotrf")
    return c


def solve_spd(a: np.ndarray, b: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite ``a``."""
    a = _as_square(a)
    b = np.asarray(b, dtype=float)
    vector_rhs = b.ndim == 1
    factor = cholesky(a, jitter)
    x, info = _lapack.dpotrs(factor, b.reshape(b.shape[0], -1), lower=1)
    if info != 0:  # pragma: no cover
        raise ValueError(f"dpotrs failed with info={info}")
    return x[:, 0] if vector_rhs else x


def solve_chol(factor: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve using a pre-computed lower Cholesky factor."""
    b = np.asarray(b, dtype=float)
    vector_rhs = b.ndim == 1
    x, info = _lapack.dpotrs(factor, b.reshape(b.shape[0], -1), lower=1)
    if info != 0:  # pragma: no cover
        raise ValueError(f"dpotrs failed with info={info}")
    return x[:, 0] if vector_rhs else x


@dataclass(frozen=True)
class PowerIterationResult:
    lam_max: float
    iterations: int
    degenerate: bool = False


# Start vector used when the all-ones start lies exactly in the null space
# (true for every graph Laplacian). Fixed Philox key keeps it reproducible.
_FALLBACK_KEY = (0x9E3779B97F4A7C15, 0xD1B54A32D192ED03)


def power_iteration_max_eig(
    c: np.ndarray,
    tol: float = POWER_ITER_TOL,
    max_iter: int = POWER_ITER_MAX,
) -> PowerIterationResult:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    The start vector is the normalized all-ones vector, which keeps runs
    reproducible. If that vector is annihilated by ``c`` (it is an exact
    null vector of any Laplacian), iteration restarts from a fixed seeded
    vector instead. An exactly-zero matrix returns ``lam_max=0`` with the
    ``degenerate`` flag set rather than raising.
    """
    c = _as_square(c)
    n = c.shape[0]
    if n == 0:
        raise ValueError("empty matrix")
    if not np.any(c):
        return PowerIterationResult(0.0, 0, degenerate=True)

    v = np.ones(n) / np.sqrt(n)
    lam = 0.0
    diff_prev = np.inf
    n_diffs = 0
    used_fallback = False
    # Scale for detecting an effectively-annihilated iterate.
    floor = np.abs(c).max() * n * 1e-14
    for it in range(1, max_iter + 1):
        w = c @ v
        norm = np.linalg.norm(w)
        if norm <= floor:
            if used_fallback:
                # PSD matrix annihilates the fallback too: top eigenvalue
                # is indistinguishable from zero at working precision.
                return PowerIterationResult(0.0, it, degenerate=True)
            gen = np.random.Generator(
                np.random.Philox(key=np.array(_FALLBACK_KEY, dtype=np.uint64))
            )
            v = gen.standard_normal(n)
            v /= np.linalg.norm(v)
            used_fallback = True
            continue
        v = w / norm
        lam_new = float(v @ (c @ v))
        diff = abs(lam_new - lam)
        # Rayleigh-quotient increments shrink geometrically; extrapolating
        # the tail bounds the true remaining error, which a raw
        # successive-difference test underestimates for small spectral gaps.
        # The 0.05 safety factor absorbs noise in the ratio estimate.
        if diff == 0.0:
            return PowerIterationResult(lam_new, it)
        n_diffs += 1
        if n_diffs > 1 and diff_prev > 0:
            ratio = min(diff / diff_prev, 0.9999)
            remaining = diff * ratio / (1.0 - ratio)
            if remaining <= 0.05 * tol * max(abs(lam_new), 1e-300):
                return PowerIterationResult(lam_new, it)
        lam, diff_prev = lam_new, diff
    raise NonConvergence(
        f"power iteration did not reach tol={tol} within {max_iter} iterations"
    )


def mvn_sample(
    mean: np.ndarray,
    cov: np.ndarray,
    rng: RngStream,
    jitter: float = 1e-10,
) -> np.ndarray:
    """One draw from N(mean, cov + jitter * I) as mean + L @ z.

    Deterministic given the rng state: consumes exactly ``len(mean)``
    standard normals.
    """
    mean = np.asarray(mean, dtype=float)
    factor = cholesky(cov, jitter)
    z = rng.standard_normal(mean.shape[0])
    return mean + factor @ z
