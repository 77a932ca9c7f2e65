"""Multiplier-bootstrap simultaneous confidence bands for kernel gradient flow.

The central object is the field of filtered kernel sections

    w[g, i] = (phi(T_X) k_{x_g})(x_i) = [U diag(phi(mu)) U^T k(x_g, X)]_i,

evaluated once per grid point from the shared spectral cache. Everything else
(the empirical covariance diagonal, the bootstrap sup-statistic and the band
half-widths) is a cheap reduction over ``w`` and the residuals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from kgflow.errors import DegenerateCovarianceError
from kgflow.estimators import FittedEstimator, SpectralCache, predict
from kgflow.filters import FilterParams, apply_filter, phi
from kgflow.kernels import DEFAULT_MERCER_TERMS, Kernel, check_domain

Array = NDArray[np.float64]

DEFAULT_BOOTSTRAP = 100


@dataclass(frozen=True, eq=False)
class FilterVectorField:
    """Rows ``V[g] = (1/n) U diag(phi(mu)) U^T k(x_g, X)`` for each grid point.

    ``V`` therefore equals ``k(x, X) K^{-1} (I - exp(-t K / n))`` for the continuous
    flow on an invertible Gram matrix ``K``; :attr:`weights` rescales it to
    ``w = n V``, the filtered kernel sections evaluated at the samples.
    """

    grid: Array
    V: Array
    params: FilterParams

    @property
    def n(self) -> int:
        return self.V.shape[1]

    @property
    def weights(self) -> Array:
        return self.V * self.n


@dataclass(frozen=True, eq=False)
class CovarianceDiag:
    grid: Array
    values: Array
    params: FilterParams


@dataclass(frozen=True, eq=False)
class BandResult:
    grid: Array
    center: Array
    half_width: Array
    r: float
    q: float
    n: int
    samples: Array | None = None
    seed: int | None = None

    @property
    def B(self) -> int:
        return 0 if self.samples is None else self.samples.size

    @property
    def lower(self) -> Array:
        return self.center - self.half_width

    @property
    def upper(self) -> Array:
        return self.center + self.half_width


def kernel_sections(cache: SpectralCache, grid: ArrayLike) -> Array:
    """``k(grid, X) @ U``: the grid's kernel sections in the cached eigenbasis."""
    grid = np.atleast_1d(check_domain(grid, "grid")).ravel()
    return cache.kernel(grid, cache.X) @ cache.eigvecs


def filter_vectors(
    cache: SpectralCache,
    params: FilterParams,
    grid: ArrayLike,
    sections: Array | None = None,
) -> FilterVectorField:
    """Filtered kernel sections on ``grid``.

    ``sections`` may carry a precomputed :func:`kernel_sections` result for the
    same grid, which saves one ``G x n x n`` product when several training
    times share a dataset.
    """
    grid = np.array(np.atleast_1d(check_domain(grid, "grid")), dtype=np.float64).ravel()
    if grid.size == 0:
        raise ValueError("grid must be non-empty")
    params.check_learning_rate(cache.kernel.kappa2)
    weights = apply_filter(params, cache.eigvals)
    KgU = kernel_sections(cache, grid) if sections is None else sections
    if KgU.shape != (grid.size, cache.n):
        raise ValueError("precomputed sections do not match the grid and cache")
    V = (KgU * weights) @ cache.eigvecs.T / cache.n
    return FilterVectorField(grid, V, params)


def _check_residuals(field: FilterVectorField, resid: ArrayLike) -> Array:
    resid = np.asarray(resid, dtype=np.float64).ravel()
    if resid.size != field.n:
        raise ValueError(f"got {resid.size} residuals for a field over {field.n} samples")
    return resid


def empirical_cov_diag(field: FilterVectorField, resid: ArrayLike) -> CovarianceDiag:
    """``C(x, x) = (1/n) sum_i (w[x, i] * resid_i)^2`` on the field's grid."""
    resid = _check_residuals(field, resid)
    A = field.weights * resid
    values = np.einsum("gi,gi->g", A, A) / field.n
    return CovarianceDiag(field.grid, values, field.params)


def bootstrap_multipliers(seed: int | np.random.SeedSequence, n: int, B: int) -> Array:
    """``(n, B)`` standard normals; column ``b`` comes from its own child stream of ``seed``.

    Each replicate is keyed by ``(seed, b)``, so any subset of replicates can be
    regenerated independently.
    """
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    G = np.empty((n, B))
    for b, child in enumerate(root.spawn(B)):
        G[:, b] = np.random.Generator(np.random.Philox(child)).standard_normal(n)
    return G


def bootstrap_sup_samples(
    field: FilterVectorField,
    cov: CovarianceDiag,
    resid: ArrayLike,
    B: int = DEFAULT_BOOTSTRAP,
    seed: int | np.random.SeedSequence = 0,
) -> Array:
    """Draw ``B`` replicates of ``max_g |sum_j w[g, j] resid_j g_j| / sqrt(n C(g, g))``."""
    resid = _check_residuals(field, resid)
    if B < 1:
        raise ValueError("need at least one bootstrap replicate")
    zero = np.flatnonzero(~(cov.values > 0))
    if zero.size:
        raise DegenerateCovarianceError(float(cov.grid[zero[0]]), int(zero[0]))
    n = field.n
    A = (field.weights * resid) / np.sqrt(n * cov.values)[:, None]
    G = bootstrap_multipliers(seed, n, B)
    return np.max(np.abs(A @ G), axis=0)


def quantile(samples: ArrayLike, q: float) -> float:
    """The ``ceil(q B)``-th smallest sample (1-indexed), without interpolation."""
    if not 0 < q < 1:
        raise ValueError(f"quantile level must lie in (0, 1), got {q!r}")
    s = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValueError("cannot take a quantile of an empty sample")
    # Guard against q * B landing a hair above an integer through rounding.
    k = math.ceil(q * s.size - 1e-9)
    return float(s[max(k, 1) - 1])


def build_band(
    est: FittedEstimator,
    cov: CovarianceDiag,
    r: float,
    n: int,
    q: float,
    samples: Array | None = None,
    seed: int | None = None,
) -> BandResult:
    """Half-width ``r * sqrt(C(x, x) / n)`` around the estimator on ``cov.grid``."""
    if r < 0:
        raise ValueError("band quantile must be non-negative")
    half = r * n**-0.5 * np.sqrt(cov.values)
    return BandResult(cov.grid, predict(est, cov.grid), half, float(r), q, int(n), samples, seed)


def covers(band: BandResult, truth: Callable[[Array], Array]) -> bool:
    """True iff the truth stays inside the band at every grid point."""
    return bool(np.all(np.abs(truth(band.grid) - band.center) <= band.half_width))


def confidence_band(
    est: FittedEstimator,
    Y: ArrayLike,
    grid: ArrayLike,
    q: float = 0.95,
    B: int = DEFAULT_BOOTSTRAP,
    seed: int | np.random.SeedSequence = 0,
    params: FilterParams | None = None,
) -> BandResult:
    """Full pipeline: residuals, covariance diagonal, bootstrap quantile, band."""
    if params is None:
        p = est.params
        if est.method == "kgf-continuous":
            params = FilterParams.continuous(p["t"])
        elif est.method == "kgf-discrete":
            params = FilterParams.discrete(p["eta"], p["steps"])
        else:
            raise ValueError("confidence bands are defined for kernel gradient flow estimators")
    resid = np.asarray(Y, dtype=np.float64) - est.train_predictions
    field = filter_vectors(est.cache, params, grid)
    cov = empirical_cov_diag(field, resid)
    samples = bootstrap_sup_samples(field, cov, resid, B, seed)
    r = quantile(samples, q)
    return build_band(est, cov, r, est.cache.n, q, samples, seed if isinstance(seed, int) else None)


# ---------------------------------------------------------------------------
# Population quantities through a truncated Mercer spectrum
# ---------------------------------------------------------------------------


def _filtered_spectrum(kernel: Kernel, params: FilterParams, n_terms: int):
    lams, efuns = kernel.eigenpairs(n_terms)
    return lams, phi(params, lams) * lams, efuns


def population_cov_diag(
    kernel: Kernel,
    params: FilterParams,
    sigma: float,
    x: ArrayLike,
    n_terms: int = DEFAULT_MERCER_TERMS,
) -> Array | float:
    """``sigma^2 sum_j (phi(lam_j) lam_j)^2 e_j(x)^2``, the diagonal of the population covariance."""
    _, gains, efuns = _filtered_spectrum(kernel, params, n_terms)
    out = sigma**2 * (efuns(x) ** 2 @ gains**2)
    return float(out[0]) if np.ndim(x) == 0 else out


def population_estimate(
    kernel: Kernel,
    params: FilterParams,
    coefficients: ArrayLike,
    x: ArrayLike,
    n_terms: int | None = None,
) -> Array | float:
    """Noise-free population flow ``f_t(x) = sum_j phi(lam_j) lam_j a_j e_j(x)``.

    ``coefficients[j]`` is ``<f*, e_{j+1}>`` in L2; the series is truncated at
    ``len(coefficients)`` (or ``n_terms`` if smaller).
    """
    a = np.asarray(coefficients, dtype=np.float64).ravel()
    N = a.size if n_terms is None else min(n_terms, a.size)
    _, gains, efuns = _filtered_spectrum(kernel, params, N)
    out = efuns(x) @ (gains * a[:N])
    return float(out[0]) if np.ndim(x) == 0 else out
