"""Kernels on the unit interval, Gram assembly and Mercer spectra.

Three kernels are provided:

* :class:`MinKernel` -- ``k(x, x') = min(x, x')`` with its closed-form spectrum,
* :class:`PeriodicMatern32` -- the Matern-3/2 profile composed with the chordal
  distance on the circle,
* :class:`CustomMercer` -- a truncated Mercer series built from user eigenvalues
  and a named eigenfunction family.

Every kernel is an immutable object; evaluation is vectorised and pure.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from kgflow.errors import DomainError, UnsupportedOperationError

Array = NDArray[np.float64]

DEFAULT_MERCER_TERMS = 2000


def check_domain(x: ArrayLike, name: str = "x") -> Array:
    """Return ``x`` as a float array, raising :class:`DomainError` outside [0, 1]."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and (np.any(~np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
        bad = arr[(~np.isfinite(arr)) | (arr < 0.0) | (arr > 1.0)].ravel()[0]
        raise DomainError(f"{name} contains {bad!r}, outside the domain [0, 1]")
    return arr


# ---------------------------------------------------------------------------
# Eigenfunction families
# ---------------------------------------------------------------------------


def _min_family(x: Array, n_terms: int) -> Array:
    freq = (2.0 * np.arange(1, n_terms + 1) - 1.0) * (np.pi / 2.0)
    return math.sqrt(2.0) * np.sin(np.multiply.outer(x, freq))


def _cosine_family(x: Array, n_terms: int) -> Array:
    j = np.arange(n_terms)
    out = math.sqrt(2.0) * np.cos(np.multiply.outer(x, j * np.pi))
    out[..., 0] = 1.0
    return out


def _fourier_family(x: Array, n_terms: int) -> Array:
    # 1, sqrt2 cos(2 pi x), sqrt2 sin(2 pi x), sqrt2 cos(4 pi x), ...
    j = np.arange(n_terms)
    k = (j + 1) // 2
    phase = np.multiply.outer(x, 2.0 * np.pi * k)
    out = np.where(j % 2 == 1, np.cos(phase), np.sin(phase)) * math.sqrt(2.0)
    out[..., 0] = 1.0
    return out


EIGENFUNCTION_FAMILIES: dict[str, Callable[[Array, int], Array]] = {
    "min": _min_family,
    "cosine": _cosine_family,
    "fourier": _fourier_family,
}


def min_eigenvalues(n_terms: int) -> Array:
    j = np.arange(1, n_terms + 1, dtype=np.float64)
    return ((2.0 * j - 1.0) * np.pi / 2.0) ** -2


def min_spectrum(j: int) -> tuple[float, Callable[[ArrayLike], Array]]:
    """Return the ``j``-th eigenpair (1-indexed) of the Min kernel under U[0, 1].

    ``lambda_j = ((2j - 1) pi / 2)^-2`` and ``e_j(x) = sqrt(2) sin((2j - 1) pi x / 2)``.
    """
    if int(j) != j or j < 1:
        raise ValueError(f"eigen-index must be a positive integer, got {j!r}")
    freq = (2 * int(j) - 1) * math.pi / 2.0

    def eigenfunction(x: ArrayLike) -> Array:
        return math.sqrt(2.0) * np.sin(freq * check_domain(x))

    return freq**-2, eigenfunction


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


class Kernel:
    """Base class. Subclasses implement :meth:`_cross` on validated arrays."""

    name = "kernel"
    kappa2: float = 1.0

    def _cross(self, a: Array, b: Array) -> Array:
        raise NotImplementedError

    def __call__(self, x: ArrayLike, y: ArrayLike) -> Array:
        """Kernel matrix between 1-D point sets ``x`` and ``y`` (scalars broadcast)."""
        a = check_domain(x, "x")
        b = check_domain(y, "y")
        out = self._cross(np.atleast_1d(a).ravel(), np.atleast_1d(b).ravel())
        return out.reshape(np.shape(a) + np.shape(b))

    def diag(self, x: ArrayLike) -> Array:
        a = np.atleast_1d(check_domain(x)).ravel()
        return np.array([self._cross(a[i : i + 1], a[i : i + 1])[0, 0] for i in range(a.size)])

    @property
    def has_spectrum(self) -> bool:
        return False

    def eigenpairs(self, n_terms: int) -> tuple[Array, Callable[[ArrayLike], Array]]:
        """Leading ``n_terms`` Mercer eigenvalues and a function evaluating the eigenfunctions.

        The returned callable maps points of shape ``(m,)`` to an ``(m, n_terms)`` array.
        """
        raise UnsupportedOperationError(f"{self.describe()} has no known Mercer spectrum")

    def describe(self) -> str:
        return self.name

    @property
    def slug(self) -> str:
        return self.name


@dataclass(frozen=True)
class MinKernel(Kernel):
    """Brownian-motion kernel ``min(x, x')`` on [0, 1]."""

    name = "min"
    kappa2: float = field(default=1.0, init=False)

    def _cross(self, a: Array, b: Array) -> Array:
        return np.minimum.outer(a, b)

    def diag(self, x: ArrayLike) -> Array:
        return np.atleast_1d(check_domain(x)).ravel().copy()

    @property
    def has_spectrum(self) -> bool:
        return True

    def eigenpairs(self, n_terms: int):
        if n_terms < 1:
            raise ValueError("truncation level must be >= 1")
        lams = min_eigenvalues(n_terms)

        def efuns(x: ArrayLike) -> Array:
            return _min_family(np.atleast_1d(check_domain(x)).ravel(), n_terms)

        return lams, efuns


@dataclass(frozen=True)
class PeriodicMatern32(Kernel):
    """Matern-3/2 profile ``(1 + sqrt3 r / h) exp(-sqrt3 r / h)`` at chordal distance.

    ``r(x, x') = sqrt(2 - 2 cos(2 pi |x - x'|))``, the Euclidean distance between
    ``exp(2 pi i x)`` and ``exp(2 pi i x')`` on the unit circle.
    """

    h: float
    name = "matern32"
    kappa2: float = field(default=1.0, init=False)

    def __post_init__(self):
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ValueError(f"length-scale h must be positive, got {self.h!r}")

    @staticmethod
    def profile(r: ArrayLike, h: float) -> Array:
        a = math.sqrt(3.0) * np.asarray(r, dtype=np.float64) / h
        return (1.0 + a) * np.exp(-a)

    def _cross(self, a: Array, b: Array) -> Array:
        d = np.abs(np.subtract.outer(a, b))
        # Rounding can push 2 - 2cos slightly below zero.
        chord2 = np.maximum(2.0 - 2.0 * np.cos(2.0 * np.pi * d), 0.0)
        return self.profile(np.sqrt(chord2), self.h)

    def diag(self, x: ArrayLike) -> Array:
        return np.ones(np.atleast_1d(check_domain(x)).size)

    def describe(self) -> str:
        return f"matern32:h={self.h!r}"


@dataclass(frozen=True, eq=False)
class CustomMercer(Kernel):
    """Truncated Mercer series ``sum_{j<=N} lambda_j e_j(x) e_j(x')``.

    ``family`` names one of :data:`EIGENFUNCTION_FAMILIES`; eigenvalues must be
    positive and strictly decreasing. ``n_terms`` defaults to
    :data:`DEFAULT_MERCER_TERMS` (capped at the number of eigenvalues supplied).
    """

    eigenvalues: tuple[float, ...]
    family: str = "min"
    n_terms: int | None = None
    source: str | None = None
    name = "mercer"

    def __post_init__(self):
        lams = np.asarray(self.eigenvalues, dtype=np.float64)
        if lams.ndim != 1 or lams.size == 0:
            raise ValueError("CustomMercer needs a non-empty 1-D eigenvalue sequence")
        if np.any(lams <= 0) or np.any(np.diff(lams) >= 0):
            raise ValueError("eigenvalues must be positive and strictly decreasing")
        if self.family not in EIGENFUNCTION_FAMILIES:
            raise ValueError(
                f"unknown eigenfunction family {self.family!r}; "
                f"choose from {sorted(EIGENFUNCTION_FAMILIES)}"
            )
        n = DEFAULT_MERCER_TERMS if self.n_terms is None else int(self.n_terms)
        n = min(n, lams.size)
        if n < 1:
            raise ValueError("truncation level must be >= 1")
        object.__setattr__(self, "eigenvalues", tuple(float(v) for v in lams))
        object.__setattr__(self, "n_terms", n)
        diag = self._features(np.linspace(0.0, 1.0, 2001)) ** 2 @ lams[:n]
        object.__setattr__(self, "kappa2", float(diag.max()))

    def _features(self, x: Array) -> Array:
        return EIGENFUNCTION_FAMILIES[self.family](x, self.n_terms)

    def _cross(self, a: Array, b: Array) -> Array:
        lams = np.asarray(self.eigenvalues[: self.n_terms])
        return (self._features(a) * lams) @ self._features(b).T

    def diag(self, x: ArrayLike) -> Array:
        a = np.atleast_1d(check_domain(x)).ravel()
        return self._features(a) ** 2 @ np.asarray(self.eigenvalues[: self.n_terms])

    @property
    def has_spectrum(self) -> bool:
        return True

    def eigenpairs(self, n_terms: int):
        if n_terms < 1:
            raise ValueError("truncation level must be >= 1")
        n_terms = min(n_terms, self.n_terms)
        lams = np.asarray(self.eigenvalues[:n_terms])

        def efuns(x: ArrayLike) -> Array:
            return EIGENFUNCTION_FAMILIES[self.family](np.atleast_1d(check_domain(x)).ravel(), n_terms)

        return lams, efuns

    def describe(self) -> str:
        return f"mercer:{self.source}" if self.source else f"mercer[{self.family},N={self.n_terms}]"


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------


def eval_kernel(kernel: Kernel, x: float, y: float) -> float:
    """Scalar kernel value ``k(x, y)``."""
    return float(kernel(x, y))


def gram(kernel: Kernel, X: ArrayLike) -> Array:
    """Gram matrix ``(k(x_i, x_j))``, exactly symmetric.

    The upper triangle is computed once and mirrored so that stored values
    agree bit-for-bit across the diagonal.
    """
    X = np.atleast_1d(check_domain(X, "X")).ravel()
    if X.size == 0:
        raise ValueError("gram needs at least one point")
    K = kernel._cross(X, X)
    upper = np.triu(K)
    return upper + np.triu(K, 1).T


def mercer_partial_sum(kernel: Kernel, x: ArrayLike, y: ArrayLike, n_terms: int) -> Array | float:
    """Truncated Mercer sum ``sum_{j<=N} lambda_j e_j(x) e_j(y)``.

    Returns a scalar for scalar inputs, otherwise the ``(len(x), len(y))`` matrix.
    """
    if n_terms < 1:
        raise ValueError("truncation level must be >= 1")
    lams, efuns = kernel.eigenpairs(n_terms)
    ex, ey = efuns(x), efuns(y)
    out = (ex * lams) @ ey.T
    if np.ndim(x) == 0 and np.ndim(y) == 0:
        return float(out[0, 0])
    return out


# ---------------------------------------------------------------------------
# Config-string parsing
# ---------------------------------------------------------------------------

_MATERN_RE = re.compile(r"^matern32:h=(?P<h>.+)$")


def load_mercer_file(path: str | Path, n_terms: int | None = None) -> CustomMercer:
    """Read eigenvalues from a CSV file.

    One eigenvalue per row (first column); a non-numeric header row is skipped.
    Comment lines start with ``#``; ``# family=<name>`` selects the eigenfunction
    family (default ``min``).
    """
    path = Path(path)
    family = "min"
    values: list[float] = []
    with path.open(newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            cell = row[0].strip()
            if cell.startswith("#"):
                m = re.search(r"family\s*[=:]\s*(\w+)", ",".join(row))
                if m:
                    family = m.group(1)
                continue
            try:
                values.append(float(cell))
            except ValueError:
                if values:
                    raise ValueError(f"{path}: non-numeric eigenvalue {cell!r}") from None
                if len(row) > 1 and row[1].strip():
                    family = row[1].strip()
    return CustomMercer(tuple(values), family=family, n_terms=n_terms, source=str(path))


def parse_kernel(spec: str) -> Kernel:
    """Build a kernel from ``"min"``, ``"matern32:h=<float>"`` or ``"mercer:<file>"``."""
    spec = spec.strip()
    if spec == "min":
        return MinKernel()
    m = _MATERN_RE.match(spec)
    if m:
        try:
            h = float(m.group("h"))
        except ValueError:
            raise ValueError(f"bad length-scale in kernel spec {spec!r}") from None
        return PeriodicMatern32(h)
    if spec.startswith("mercer:"):
        return load_mercer_file(spec[len("mercer:") :])
    raise ValueError(f"unknown kernel spec {spec!r} (expected min, matern32:h=<float>, mercer:<file>)")
