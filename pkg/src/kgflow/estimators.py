"""Kernel gradient flow and kernel ridge regression estimators.

All estimators share one representation, ``f(x) = sum_j beta_j k(x, x_j)``, and
are computed from a :class:`SpectralCache` holding the eigendecomposition of
``Gram / n``. Applying a filter ``phi`` to that spectrum gives

    beta = (1/n) U diag(phi(mu)) U^T Y,

which for the continuous flow equals ``K^{-1} (I - exp(-t K / n)) Y`` whenever the
Gram matrix ``K`` is invertible, and stays finite when it is not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

from kgflow.errors import NumericalError
from kgflow.filters import FilterParams, apply_filter
from kgflow.kernels import Kernel, check_domain, gram

Array = NDArray[np.float64]
Method = Literal["kgf-continuous", "kgf-discrete", "krr"]

DEFAULT_GRID_SIZE = 1001


@dataclass(frozen=True)
class Dataset:
    """Paired samples on [0, 1]; ``sigma`` records the noise level used to generate them."""

    X: Array
    Y: Array
    sigma: float | None = None

    def __post_init__(self):
        X = np.atleast_1d(check_domain(self.X, "X")).astype(np.float64).ravel()
        Y = np.atleast_1d(np.asarray(self.Y, dtype=np.float64)).ravel()
        if X.size == 0:
            raise ValueError("dataset must contain at least one sample")
        if X.size != Y.size:
            raise ValueError(f"X has {X.size} points but Y has {Y.size}")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("noise level must be non-negative")
        X.flags.writeable = False
        Y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.size


@dataclass(frozen=True, eq=False)
class SpectralCache:
    """Eigendecomposition of the normalised Gram matrix.

    ``eigvals`` are sorted in descending order and clamped at zero;
    ``eigvecs[:, i]`` is the eigenvector for ``eigvals[i]``.
    """

    kernel: Kernel
    X: Array
    gram: Array
    eigvals: Array
    eigvecs: Array

    @property
    def n(self) -> int:
        return self.X.size

    def filtered_operator(self, weights: Array) -> Array:
        """``U diag(weights) U^T``."""
        return (self.eigvecs * weights) @ self.eigvecs.T


def decompose(kernel: Kernel, X: ArrayLike) -> SpectralCache:
    """Assemble the Gram matrix at ``X`` and diagonalise ``Gram / n``."""
    X = np.array(np.atleast_1d(check_domain(X, "X")), dtype=np.float64).ravel()
    n = X.size
    if n == 0:
        raise ValueError("decompose needs at least one point")
    K = gram(kernel, X)
    try:
        mu, U = scipy.linalg.eigh(K / n, driver="evd")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as exc:
        cond = np.linalg.cond(K) if np.all(np.isfinite(K)) else math.inf
        raise NumericalError(f"eigendecomposition of the {n}x{n} Gram matrix failed (cond={cond:.3g}): {exc}") from exc
    mu = np.maximum(mu[::-1], 0.0)
    U = np.ascontiguousarray(U[:, ::-1])
    for a in (X, K, mu, U):
        a.flags.writeable = False
    return SpectralCache(kernel, X, K, mu, U)


@dataclass(frozen=True, eq=False)
class FittedEstimator:
    """``f(x) = k(x, X) @ beta`` together with the cache it was fitted on."""

    kernel: Kernel
    cache: SpectralCache
    beta: Array
    method: Method
    params: dict = field(default_factory=dict)

    def predict(self, points: ArrayLike) -> Array:
        return predict(self, points)

    def __call__(self, points: ArrayLike) -> Array:
        return predict(self, points)

    @property
    def train_predictions(self) -> Array:
        return self.cache.gram @ self.beta


def _responses(cache: SpectralCache, Y: ArrayLike) -> Array:
    Y = np.asarray(Y, dtype=np.float64).ravel()
    if Y.size != cache.n:
        raise ValueError(f"got {Y.size} responses for {cache.n} cached inputs")
    return Y


def fit_kgf_spectral(cache: SpectralCache, Y: ArrayLike, params: FilterParams) -> FittedEstimator:
    """Kernel gradient flow through the filtered spectrum (continuous or discrete)."""
    Y = _responses(cache, Y)
    params.check_learning_rate(cache.kernel.kappa2)
    weights = apply_filter(params, cache.eigvals)
    beta = cache.eigvecs @ (weights * (cache.eigvecs.T @ Y)) / cache.n
    if params.mode == "continuous":
        method, record = "kgf-continuous", {"t": params.t}
    else:
        method, record = "kgf-discrete", {"t": params.t, "eta": params.eta, "steps": params.steps}
    return FittedEstimator(cache.kernel, cache, beta, method, record)


def fit_kgf_iterative(
    kernel: Kernel,
    data: Dataset,
    eta: float,
    steps: int,
    cache: SpectralCache | None = None,
) -> FittedEstimator:
    """Run ``steps`` iterations of gradient descent ``beta <- beta - (eta/n)(K beta - Y)``.

    A pre-computed ``cache`` for ``data.X`` may be passed; only its Gram matrix is used.
    """
    if not (0 < eta < 1.0 / (2.0 * kernel.kappa2)):
        raise ValueError(f"learning rate eta={eta!r} must lie in (0, 1/(2 kappa^2))")
    if int(steps) != steps or steps < 0:
        raise ValueError(f"step count must be a non-negative integer, got {steps!r}")
    if cache is None:
        cache = decompose(kernel, data.X)
    elif not np.array_equal(cache.X, data.X):
        raise ValueError("cache was built on different inputs")
    K, Y, n = cache.gram, data.Y, data.n
    beta = np.zeros(n)
    step = eta / n
    for _ in range(int(steps)):
        beta = beta - step * (K @ beta - Y)
    return FittedEstimator(
        kernel, cache, beta, "kgf-discrete", {"t": steps * eta, "eta": eta, "steps": int(steps)}
    )


def fit_krr(cache: SpectralCache, Y: ArrayLike, lam: float) -> FittedEstimator:
    """Kernel ridge regression, ``beta = (K + n lam I)^{-1} Y``."""
    if not lam > 0:
        raise ValueError(f"ridge parameter must be positive, got {lam!r}")
    Y = _responses(cache, Y)
    if math.isinf(lam):
        beta = np.zeros(cache.n)
    else:
        beta = cache.eigvecs @ ((cache.eigvecs.T @ Y) / (cache.eigvals + lam)) / cache.n
    return FittedEstimator(cache.kernel, cache, beta, "krr", {"lambda": lam})


def predict(est: FittedEstimator, points: ArrayLike) -> Array:
    pts = np.atleast_1d(check_domain(points, "points")).ravel()
    return est.kernel(pts, est.cache.X) @ est.beta


def residuals(est: FittedEstimator, data: Dataset) -> Array:
    """``y_i - f(x_i)`` on the training sample."""
    if not np.array_equal(est.cache.X, data.X):
        raise ValueError("estimator was not fitted on this dataset's inputs")
    return data.Y - est.train_predictions


def evaluation_grid(size: int = DEFAULT_GRID_SIZE, X: ArrayLike | None = None, start: float = 0.0) -> Array:
    """``size`` equispaced points on ``[start, 1]``, followed by the training inputs ``X``.

    Training points are appended unsorted so that the first ``size`` entries are
    always the regular grid.
    """
    if size < 1:
        raise ValueError("grid size must be >= 1")
    base = np.linspace(start, 1.0, size) if size > 1 else np.array([1.0])
    if X is None:
        return base
    return np.concatenate([base, np.atleast_1d(check_domain(X)).ravel()])


def sup_error(est: FittedEstimator, truth: Callable[[Array], Array], grid: ArrayLike) -> float:
    """``max_g |f(x_g) - truth(x_g)|`` over the grid."""
    grid = np.atleast_1d(np.asarray(grid, dtype=np.float64)).ravel()
    if grid.size == 0:
        raise ValueError("sup_error needs a non-empty grid")
    return float(np.max(np.abs(predict(est, grid) - truth(grid))))
