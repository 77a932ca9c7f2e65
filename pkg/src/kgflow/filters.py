"""Filter and remainder functions of continuous and discrete kernel gradient flow.

For training time ``t`` the continuous flow uses

    phi(z) = (1 - exp(-t z)) / z,        psi(z) = exp(-t z),

and gradient descent with learning rate ``eta`` and ``m = t / eta`` steps uses

    phi(z) = (1 - (1 - eta z)^m) / z,    psi(z) = (1 - eta z)^m.

In both cases ``psi = 1 - z * phi`` and ``phi(0) = t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from kgflow.errors import StabilityError

Mode = Literal["continuous", "discrete"]

# Below this value of t*z the closed forms lose digits; a short series is used instead.
SMALL_TZ = 1e-8


@dataclass(frozen=True)
class FilterParams:
    """Flow mode, training time and (discrete only) learning rate.

    Build discrete parameters with :meth:`discrete` (from a step count) or
    :meth:`discrete_from_time` (``floor(t / eta)`` steps) so that ``t`` is always an
    exact multiple of ``eta``.
    """

    mode: Mode
    t: float
    eta: float | None = None
    steps: int | None = None

    def __post_init__(self):
        if self.mode not in ("continuous", "discrete"):
            raise ValueError(f"mode must be 'continuous' or 'discrete', got {self.mode!r}")
        if not (math.isfinite(self.t) and self.t >= 0):
            raise ValueError(f"training time must be a finite non-negative number, got {self.t!r}")
        if self.mode == "discrete":
            if self.eta is None or not (self.eta > 0 and math.isfinite(self.eta)):
                raise ValueError(f"discrete flow needs a positive learning rate, got {self.eta!r}")
            m = self.steps if self.steps is not None else round(self.t / self.eta)
            if m < 0 or abs(m * self.eta - self.t) > 1e-9 * max(1.0, self.t):
                raise ValueError(f"t={self.t!r} is not a whole number of steps of eta={self.eta!r}")
            object.__setattr__(self, "steps", int(m))

    @classmethod
    def continuous(cls, t: float) -> FilterParams:
        return cls("continuous", float(t))

    @classmethod
    def discrete(cls, eta: float, steps: int) -> FilterParams:
        if int(steps) != steps or steps < 0:
            raise ValueError(f"step count must be a non-negative integer, got {steps!r}")
        return cls("discrete", int(steps) * float(eta), float(eta), int(steps))

    @classmethod
    def discrete_from_time(cls, t: float, eta: float) -> FilterParams:
        # The tiny slack keeps e.g. 0.3 / 0.1 = 2.9999999999999996 at 3 steps.
        steps = math.floor(t / eta * (1.0 + 1e-12))
        return cls.discrete(eta, steps)

    def with_time(self, t: float) -> FilterParams:
        if self.mode == "continuous":
            return FilterParams.continuous(t)
        return FilterParams.discrete_from_time(t, self.eta)

    def check_learning_rate(self, kappa2: float) -> None:
        """Raise unless ``0 < eta < 1 / (2 kappa^2)`` (discrete mode only)."""
        if self.mode == "discrete" and not self.eta < 1.0 / (2.0 * kappa2):
            raise ValueError(
                f"learning rate eta={self.eta!r} must be below 1/(2 kappa^2) = {1.0 / (2.0 * kappa2):.6g}"
            )

    @property
    def label(self) -> str:
        if self.mode == "continuous":
            return f"continuous(t={self.t:.6g})"
        return f"discrete(eta={self.eta:.6g}, steps={self.steps})"


def _as_z(params: FilterParams, z: ArrayLike) -> NDArray[np.float64]:
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < 0) or np.any(~np.isfinite(z)):
        raise ValueError("filters are defined for finite z >= 0")
    if params.mode == "discrete" and z.size and z.max() > 1.0 / params.eta:
        raise StabilityError(
            f"z={z.max():.6g} exceeds 1/eta={1.0 / params.eta:.6g}; (1 - eta z) would be negative"
        )
    return z


def _log_remainder(params: FilterParams, z: NDArray[np.float64]) -> NDArray[np.float64]:
    """``log psi(z)``; may be ``-inf`` where psi vanishes."""
    if params.mode == "continuous":
        return -params.t * z
    m = params.steps
    if m == 0:
        return np.zeros_like(z)
    with np.errstate(divide="ignore"):
        return m * np.log1p(-params.eta * z)


def phi(params: FilterParams, z: ArrayLike) -> NDArray[np.float64] | float:
    """Filter function ``phi_t(z)``; continuous at 0 with ``phi_t(0) = t``."""
    scalar = np.ndim(z) == 0
    z = np.atleast_1d(_as_z(params, z))
    t = params.t
    out = np.empty_like(z)
    tz = t * z
    small = tz < SMALL_TZ
    if params.mode == "continuous":
        zs = tz[small]
        out[small] = t * (1.0 - zs / 2.0 + zs**2 / 6.0)
    else:
        m = params.steps
        out[small] = t * (1.0 - (m - 1) * params.eta * z[small] / 2.0)
    big = ~small
    out[big] = -np.expm1(_log_remainder(params, z[big])) / z[big]
    return float(out[0]) if scalar else out


def psi(params: FilterParams, z: ArrayLike) -> NDArray[np.float64] | float:
    """Remainder function ``psi_t(z) = 1 - z phi_t(z)``."""
    scalar = np.ndim(z) == 0
    z = np.atleast_1d(_as_z(params, z))
    out = np.exp(_log_remainder(params, z))
    return float(out[0]) if scalar else out


def apply_filter(params: FilterParams, eigvals: ArrayLike) -> NDArray[np.float64]:
    """Element-wise ``phi_t`` over a (clamped, non-negative) spectrum."""
    eigvals = np.asarray(eigvals, dtype=np.float64).ravel()
    if eigvals.size == 0:
        return np.empty(0)
    return np.asarray(phi(params, eigvals), dtype=np.float64)
