"""Monte-Carlo experiments: convergence rates, band coverage, KGF vs KRR.

Every trial owns its data, spectral cache and random streams. Streams are
derived from ``(master seed, cell label, trial index, purpose)`` so a cell or a
single trial can be re-run in isolation, and results do not depend on the
number of worker threads (reduction is always in trial order).
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Literal, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from numpy.typing import ArrayLike, NDArray

from kgflow.errors import DegenerateCovarianceError
from kgflow.estimators import (
    Dataset,
    decompose,
    evaluation_grid,
    fit_kgf_spectral,
    fit_krr,
    predict,
)
from kgflow.filters import FilterParams
from kgflow.inference import (
    DEFAULT_BOOTSTRAP,
    bootstrap_sup_samples,
    build_band,
    covers,
    empirical_cov_diag,
    filter_vectors,
    kernel_sections,
    population_cov_diag,
    quantile,
)
from kgflow.kernels import Kernel, MinKernel, PeriodicMatern32, min_spectrum

Array = NDArray[np.float64]

SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# Truth functions
# ---------------------------------------------------------------------------


def _f1(x):
    return SQRT2 * np.sin(2.0 * np.pi * np.asarray(x, dtype=np.float64))


def _f2(x):
    return SQRT2 * np.sin(1.5 * np.pi * np.asarray(x, dtype=np.float64))


_F3_KERNEL = PeriodicMatern32(math.sqrt(3.0) / 2.0)


def _f3(x):
    return _F3_KERNEL(np.atleast_1d(x), np.array([0.5]))[:, 0].reshape(np.shape(x))


@dataclass(frozen=True)
class _MinEigen:
    j: int

    def __call__(self, x):
        return min_spectrum(self.j)[1](x)


@dataclass(frozen=True, eq=False)
class TruthFunction:
    """A regression function ``f*`` on [0, 1] with a tag used in output names."""

    tag: str
    fn: Callable[[Array], Array]
    eigen_index: int | None = None

    def __call__(self, x: ArrayLike) -> Array:
        return self.fn(x)

    def mercer_coefficients(self, kernel: Kernel, n_terms: int, panels: int = 400, order: int = 16) -> Array:
        """L2 coefficients ``<f*, e_j>`` for ``j = 1..n_terms``.

        Exact for Min-kernel eigenfunctions, composite Gauss-Legendre otherwise.
        """
        lams, efuns = kernel.eigenpairs(n_terms)
        if self.eigen_index is not None and isinstance(kernel, MinKernel):
            a = np.zeros(lams.size)
            if self.eigen_index <= lams.size:
                a[self.eigen_index - 1] = 1.0
            return a
        nodes, weights = leggauss(order)
        edges = np.linspace(0.0, 1.0, panels + 1)
        half = np.diff(edges) / 2.0
        x = (edges[:-1, None] + half[:, None] * (nodes + 1.0)).ravel()
        w = (half[:, None] * weights).ravel()
        return efuns(x).T @ (w * self.fn(x))


F1 = TruthFunction("f1", _f1)
F2 = TruthFunction("f2", _f2, eigen_index=2)
F3 = TruthFunction("f3", _f3)


def eigen_truth(j: int) -> TruthFunction:
    """The ``j``-th Min-kernel eigenfunction as a regression function."""
    min_spectrum(j)
    return TruthFunction(f"eigen{j}", _MinEigen(j), eigen_index=j)


TRUTHS = {"f1": F1, "f2": F2, "f3": F3}


def parse_truth(spec: str) -> TruthFunction:
    spec = spec.strip().lower()
    if spec in TRUTHS:
        return TRUTHS[spec]
    if spec.startswith("eigen"):
        rest = spec[len("eigen") :].lstrip(":=")
        return eigen_truth(int(rest))
    raise ValueError(f"unknown truth function {spec!r} (expected f1, f2, f3 or eigen<j>)")


# ---------------------------------------------------------------------------
# Seeding and data
# ---------------------------------------------------------------------------

DATA_STREAM = 0
BOOTSTRAP_STREAM = 1


def cell_key(label: str) -> int:
    return zlib.crc32(label.encode())


def trial_seed(master: int, cell: str, trial: int, stream: int = DATA_STREAM) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master), spawn_key=(cell_key(cell), int(trial), int(stream)))


def generate_data(
    truth: Callable[[Array], Array],
    n: int,
    sigma: float,
    seed: int | np.random.SeedSequence,
) -> Dataset:
    """``x ~ U[0, 1]`` i.i.d., ``y = f*(x) + sigma * N(0, 1)``."""
    if n < 1:
        raise ValueError("sample size must be >= 1")
    if sigma < 0:
        raise ValueError("noise level must be non-negative")
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=n)
    noise = rng.standard_normal(n)
    Y = truth(X) + sigma * noise if sigma > 0 else np.asarray(truth(X), dtype=np.float64)
    return Dataset(X, Y, sigma)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

TimeRule = Literal["power", "linear", "topt"]

# Sample sizes of the published coverage and width tables.
TABLE_SAMPLE_SIZES = (500, 1000, 2000, 3000)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    Training time follows ``time_rule``:

    * ``power``  -- ``t = c * n ** (1 / s)``
    * ``linear`` -- ``t = c * n``
    * ``topt``   -- ``t = multiplier * t_opt_factor * n`` for each entry of ``multipliers``
    """

    kernel: Kernel
    truth: TruthFunction
    sigma: float = 0.2
    mode: Literal["continuous", "discrete"] = "continuous"
    eta: float = 0.01
    time_rule: TimeRule = "power"
    c: float = 1.0
    s: float = 1.0
    multipliers: tuple[float, ...] = (1.0,)
    t_opt_factor: float = 0.1
    n_list: tuple[int, ...] = (200, 400)
    reps: int = 30
    bootstrap: int = DEFAULT_BOOTSTRAP
    q: float = 0.95
    seed: int = 0
    grid_size: int = 1001
    grid_start: float = 0.0
    threads: int = 1
    saturation_eps: tuple[float, ...] = (4.0, 5.0, 6.0)
    decay: float = 2.0
    r_override: float | None = None

    def __post_init__(self):
        if self.mode not in ("continuous", "discrete"):
            raise ValueError(f"mode must be continuous or discrete, got {self.mode!r}")
        if self.time_rule not in ("power", "linear", "topt"):
            raise ValueError(f"unknown time rule {self.time_rule!r}")
        positives = {
            "c": self.c, "s": self.s, "eta": self.eta, "t_opt_factor": self.t_opt_factor,
            "reps": self.reps, "bootstrap": self.bootstrap, "grid_size": self.grid_size,
            "threads": self.threads, "decay": self.decay,
        }
        for key, value in positives.items():
            if not value > 0:
                raise ValueError(f"{key} must be positive, got {value!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not self.n_list or any(int(n) != n or n < 1 for n in self.n_list):
            raise ValueError(f"n_list must hold positive integers, got {self.n_list!r}")
        if any(not m > 0 for m in self.multipliers) or not self.multipliers:
            raise ValueError("multipliers must be positive")
        if not 0 < self.q < 1:
            raise ValueError("coverage level q must lie in (0, 1)")
        if not 0 <= self.grid_start < 1:
            raise ValueError("grid_start must lie in [0, 1)")
        if self.mode == "discrete" and not self.eta < 1.0 / (2.0 * self.kernel.kappa2):
            raise ValueError(f"eta={self.eta} violates eta < 1/(2 kappa^2)")
        object.__setattr__(self, "n_list", tuple(int(n) for n in self.n_list))
        object.__setattr__(self, "multipliers", tuple(float(m) for m in self.multipliers))
        object.__setattr__(self, "saturation_eps", tuple(float(e) for e in self.saturation_eps))

    def training_time(self, n: int, multiplier: float = 1.0) -> float:
        if self.time_rule == "power":
            return self.c * n ** (1.0 / self.s)
        if self.time_rule == "linear":
            return self.c * n
        return multiplier * self.t_opt_factor * n

    def filter_for(self, t: float) -> FilterParams:
        if self.mode == "continuous":
            return FilterParams.continuous(t)
        return FilterParams.discrete_from_time(t, self.eta)

    def grid(self, X: ArrayLike | None = None) -> Array:
        return evaluation_grid(self.grid_size, X, self.grid_start)


def _map(fn: Callable, tasks: Sequence, threads: int) -> list:
    if threads <= 1 or len(tasks) <= 1:
        return [fn(*task) for task in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda task: fn(*task), tasks))


# ---------------------------------------------------------------------------
# Rate experiment
# ---------------------------------------------------------------------------


def fit_loglog_slope(points: Iterable[tuple[float, float]]) -> tuple[float, float]:
    """Ordinary least squares of ``log error`` on ``log n``; returns ``(slope, intercept)``."""
    pts = np.asarray(list(points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ValueError("need at least two (n, error) pairs")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise ValueError("log-log fit requires finite positive values")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(lx) == 0:
        raise ValueError("need at least two distinct n values")
    xc = lx - lx.mean()
    slope = float(xc @ (ly - ly.mean()) / (xc @ xc))
    return slope, float(ly.mean() - slope * lx.mean())


@dataclass(frozen=True)
class RateFit:
    points: tuple[tuple[float, float], ...]
    slope: float
    intercept: float

    @classmethod
    def from_points(cls, points: Iterable[tuple[float, float]]) -> RateFit:
        pts = tuple((float(a), float(b)) for a, b in points)
        slope, intercept = fit_loglog_slope(pts)
        return cls(tuple((math.log(a), math.log(b)) for a, b in pts), slope, intercept)


@dataclass(frozen=True)
class RateResult:
    fit: RateFit
    rows: list[dict]


def _rate_trial(config: ExperimentConfig, n: int, k: int) -> float:
    data = generate_data(config.truth, n, config.sigma, trial_seed(config.seed, f"rate/n={n}", k))
    cache = decompose(config.kernel, data.X)
    est = fit_kgf_spectral(cache, data.Y, config.filter_for(config.training_time(n)))
    grid = config.grid(data.X)
    return float(np.max(np.abs(predict(est, grid) - config.truth(grid))))


def run_rate_experiment(config: ExperimentConfig) -> RateResult:
    """Mean log sup-norm error per ``n`` and its OLS slope against ``log n``."""
    if len(set(config.n_list)) < 2:
        raise ValueError("rate experiment needs at least two distinct sample sizes")
    tasks = [(config, n, k) for n in config.n_list for k in range(config.reps)]
    errors = np.array(_map(_rate_trial, tasks, config.threads)).reshape(len(config.n_list), config.reps)
    rows = []
    for n, errs in zip(config.n_list, errors):
        logs = np.log(errs)
        rows.append({
            "n": n,
            "t": config.filter_for(config.training_time(n)).t,
            "reps": config.reps,
            "mean_log_error": float(logs.mean()),
            "sd_log_error": float(logs.std(ddof=1)) if logs.size > 1 else 0.0,
            "mean_error": float(errs.mean()),
        })
    fit = RateFit.from_points((r["n"], math.exp(r["mean_log_error"])) for r in rows)
    return RateResult(fit, rows)


# ---------------------------------------------------------------------------
# Coverage experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoverageCell:
    n: int
    multiplier: float
    t: float
    coverage: float
    mean_width: float
    trials: int
    flagged: int
    covered: tuple[bool, ...] = field(default=(), repr=False)


def _coverage_trial(config: ExperimentConfig, n: int, k: int) -> list[tuple[bool, float] | None]:
    # One dataset and decomposition per (n, trial), reused across the t-multipliers.
    data = generate_data(config.truth, n, config.sigma, trial_seed(config.seed, f"coverage/n={n}", k))
    cache = decompose(config.kernel, data.X)
    grid = config.grid(data.X)
    sections = kernel_sections(cache, grid)
    base = slice(0, config.grid_size)
    out: list[tuple[bool, float] | None] = []
    for mult in config.multipliers:
        params = config.filter_for(config.training_time(n, mult))
        est = fit_kgf_spectral(cache, data.Y, params)
        resid = data.Y - est.train_predictions
        vf = filter_vectors(cache, params, grid, sections)
        cov = empirical_cov_diag(vf, resid)
        if config.r_override is not None:
            r = config.r_override
        else:
            seed = trial_seed(config.seed, f"coverage/n={n}/mult={mult!r}", k, BOOTSTRAP_STREAM)
            try:
                samples = bootstrap_sup_samples(vf, cov, resid, config.bootstrap, seed)
            except DegenerateCovarianceError:
                out.append(None)
                continue
            r = quantile(samples, config.q)
        band = build_band(est, cov, r, n, config.q)
        out.append((covers(band, config.truth), float(np.mean(2.0 * band.half_width[base]))))
    return out


def run_coverage_experiment(config: ExperimentConfig) -> list[CoverageCell]:
    """Coverage frequency and mean band width for every ``(n, multiplier)`` cell."""
    tasks = [(config, n, k) for n in config.n_list for k in range(config.reps)]
    results = _map(_coverage_trial, tasks, config.threads)
    cells = []
    for i, n in enumerate(config.n_list):
        trials = results[i * config.reps : (i + 1) * config.reps]
        for j, mult in enumerate(config.multipliers):
            ok = [tr[j] for tr in trials if tr[j] is not None]
            flagged = config.reps - len(ok)
            covered = tuple(c for c, _ in ok)
            cells.append(CoverageCell(
                n=n,
                multiplier=mult,
                t=config.filter_for(config.training_time(n, mult)).t,
                coverage=float(np.mean(covered)) if ok else math.nan,
                mean_width=float(np.mean([w for _, w in ok])) if ok else math.nan,
                trials=len(ok),
                flagged=flagged,
                covered=covered,
            ))
    return cells


# ---------------------------------------------------------------------------
# KGF vs KRR
# ---------------------------------------------------------------------------

SATURATION_METHODS = ("kgf-continuous", "kgf-discrete", "krr")


def saturation_time(config: ExperimentConfig, n: int, eps: float) -> float:
    return config.c * n ** (1.0 / (1.0 / config.decay + eps))


def _saturation_trial(config: ExperimentConfig, n: int, k: int) -> Array:
    data = generate_data(config.truth, n, config.sigma, trial_seed(config.seed, f"saturation/n={n}", k))
    cache = decompose(config.kernel, data.X)
    grid = config.grid(data.X)
    Kg = config.kernel(grid, data.X)
    truth = config.truth(grid)
    out = np.empty((len(config.saturation_eps), len(SATURATION_METHODS)))
    for i, eps in enumerate(config.saturation_eps):
        t = saturation_time(config, n, eps)
        fits = (
            fit_kgf_spectral(cache, data.Y, FilterParams.continuous(t)),
            fit_kgf_spectral(cache, data.Y, FilterParams.discrete_from_time(t, config.eta)),
            fit_krr(cache, data.Y, 1.0 / t),
        )
        out[i] = [np.max(np.abs(Kg @ est.beta - truth)) for est in fits]
    return out


def run_saturation_comparison(config: ExperimentConfig) -> list[dict]:
    """Mean sup errors of both flows and KRR (at ``lambda = 1/t``) per ``(eps, n)``."""
    tasks = [(config, n, k) for n in config.n_list for k in range(config.reps)]
    errs = np.array(_map(_saturation_trial, tasks, config.threads))
    errs = errs.reshape(len(config.n_list), config.reps, len(config.saturation_eps), len(SATURATION_METHODS))
    rows = []
    for i, eps in enumerate(config.saturation_eps):
        for j, n in enumerate(config.n_list):
            row = {"eps": eps, "n": n, "t": saturation_time(config, n, eps), "reps": config.reps}
            for m, method in enumerate(SATURATION_METHODS):
                e = errs[j, :, i, m]
                key = method.replace("-", "_")
                row[f"{key}_mean_error"] = float(e.mean())
                row[f"{key}_mean_log_error"] = float(np.log(e).mean())
            rows.append(row)
    return rows


def saturation_slopes(rows: list[dict]) -> dict[tuple[float, str], float]:
    """Log-log slope per ``(eps, method)`` when a row set spans at least two ``n``."""
    out = {}
    for eps in sorted({r["eps"] for r in rows}):
        sub = [r for r in rows if r["eps"] == eps]
        if len({r["n"] for r in sub}) < 2:
            continue
        for method in SATURATION_METHODS:
            key = method.replace("-", "_") + "_mean_log_error"
            out[(eps, method)] = fit_loglog_slope((r["n"], math.exp(r[key])) for r in sub)[0]
    return out


# ---------------------------------------------------------------------------
# Empirical vs population covariance
# ---------------------------------------------------------------------------


def covariance_deviation(
    config: ExperimentConfig,
    n: int,
    k: int,
    n_terms: int = 2000,
) -> float:
    """Grid-max ``|C_hat(x,x) - C_t(x,x)| / max_x C_t(x,x)`` for one seeded trial.

    The population diagonal comes from the kernel's truncated Mercer spectrum,
    so the kernel must expose :meth:`~kgflow.kernels.Kernel.eigenpairs`.
    """
    data = generate_data(config.truth, n, config.sigma, trial_seed(config.seed, f"covariance/n={n}", k))
    params = config.filter_for(config.training_time(n))
    cache = decompose(config.kernel, data.X)
    est = fit_kgf_spectral(cache, data.Y, params)
    grid = config.grid()
    cov = empirical_cov_diag(filter_vectors(cache, params, grid), data.Y - est.train_predictions)
    pop = population_cov_diag(config.kernel, params, config.sigma, grid, n_terms)
    return float(np.max(np.abs(cov.values - pop)) / np.max(pop))


def run_covariance_consistency(config: ExperimentConfig, n_terms: int = 2000) -> list[dict]:
    """Per ``n``: deviations over ``config.reps`` seeds and their median."""
    tasks = [(config, n, k, n_terms) for n in config.n_list for k in range(config.reps)]
    devs = np.array(_map(covariance_deviation, tasks, config.threads)).reshape(len(config.n_list), config.reps)
    return [
        {"n": n, "median_deviation": float(np.median(d)), "deviations": d.tolist()}
        for n, d in zip(config.n_list, devs)
    ]


def with_overrides(config: ExperimentConfig, **kwargs) -> ExperimentConfig:
    return replace(config, **kwargs)
