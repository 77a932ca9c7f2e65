"""Named invariant checks run by ``kgflow verify``.

Each check is a small, fast, self-contained computation returning
``(passed, detail)``. They are grouped by the module whose contract they exercise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from kgflow.estimators import Dataset, decompose, fit_kgf_iterative, fit_kgf_spectral, fit_krr
from kgflow.filters import FilterParams, phi, psi
from kgflow.harness import F1, F3, ExperimentConfig, fit_loglog_slope, generate_data, run_coverage_experiment
from kgflow.inference import (
    bootstrap_multipliers,
    bootstrap_sup_samples,
    empirical_cov_diag,
    filter_vectors,
    population_cov_diag,
    quantile,
)
from kgflow.kernels import MinKernel, PeriodicMatern32, gram, mercer_partial_sum

MIN = MinKernel()
MATERN = PeriodicMatern32(math.sqrt(3.0) / 4.0)


@dataclass(frozen=True)
class Check:
    module: str
    name: str
    fn: Callable[[], tuple[bool, str]]


REGISTRY: list[Check] = []


def check(module: str, name: str):
    def register(fn):
        REGISTRY.append(Check(module, name, fn))
        return fn
    return register


def _rng(seed=0):
    return np.random.default_rng(seed)


# -- kernels ---------------------------------------------------------------


@check("kernels", "gram_symmetric_psd")
def _gram_psd():
    X = _rng().uniform(size=60)
    worst = math.inf
    for k in (MIN, MATERN):
        K = gram(k, X)
        if not np.array_equal(K, K.T):
            return False, f"{k.describe()} Gram not symmetric"
        worst = min(worst, np.linalg.eigvalsh(K).min() / np.abs(K).max())
    return worst > -1e-12, f"min relative eigenvalue {worst:.2e}"


@check("kernels", "matern_periodic")
def _matern_periodic():
    x = np.linspace(0, 1, 11)
    d = np.max(np.abs(MATERN(x, [0.0]) - MATERN(x, [1.0])))
    return d <= 1e-12, f"max |k(x,0) - k(x,1)| = {d:.1e}"


@check("kernels", "min_mercer_series")
def _min_series():
    x = np.linspace(0, 1, 21)
    err = np.max(np.abs(mercer_partial_sum(MIN, x, x, 4000) - np.minimum.outer(x, x)))
    return err <= 1e-3, f"truncation error {err:.1e}"


# -- filters ---------------------------------------------------------------


@check("filters", "phi_at_zero")
def _phi_zero():
    errs = [abs(phi(FilterParams.continuous(t), 0.0) / t - 1) for t in (1e-3, 1.0, 1e4)]
    return max(errs) <= 1e-12, f"max relative error {max(errs):.1e}"


@check("filters", "qualification_bound")
def _qual_bound():
    worst = 0.0
    for t in (0.1, 1.0, 1e3):
        z = np.logspace(-10, 3, 2001) / t
        worst = max(worst, float(np.max(phi(FilterParams.continuous(t), z) * (z + 1 / t))))
    return worst <= 2.0, f"max phi(z)(z + 1/t) = {worst:.4f}"


@check("filters", "remainder_extremum")
def _remainder():
    worst = 0.0
    for s in (0.5, 1.0, 2.0):
        for t in (1.0, 10.0, 1e3):
            z = np.linspace(0, 20 * s / t, 200001)
            got = np.max(z**s * psi(FilterParams.continuous(t), z))
            worst = max(worst, abs(got / ((s / math.e) ** s * t**-s) - 1))
    return worst <= 1e-4, f"max relative deviation {worst:.1e}"


@check("filters", "discrete_to_continuous")
def _discrete_limit():
    z = np.linspace(0, 1, 101)
    ref = phi(FilterParams.continuous(2.0), z)
    errs = [np.max(np.abs(phi(FilterParams.discrete(2.0 / m, m), z) - ref)) for m in (100, 1000)]
    return errs[1] < errs[0] / 5, f"errors {errs[0]:.2e} -> {errs[1]:.2e}"


# -- estimators ------------------------------------------------------------


@check("estimators", "iterative_equals_spectral")
def _iter_spectral():
    rng = _rng(1)
    worst = 0.0
    for _ in range(5):
        n, m = int(rng.integers(5, 60)), int(rng.integers(1, 500))
        X = rng.uniform(size=n)
        data = Dataset(X, np.sin(6 * X) + 0.2 * rng.standard_normal(n))
        cache = decompose(MIN, X)
        a = fit_kgf_iterative(MIN, data, 0.01, m, cache).beta
        b = fit_kgf_spectral(cache, data.Y, FilterParams.discrete(0.01, m)).beta
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst <= 1e-8, f"max beta difference {worst:.1e}"


@check("estimators", "continuous_matches_expm")
def _cont_expm():
    rng = _rng(2)
    X = rng.uniform(0.1, 1, size=25)
    Y = rng.standard_normal(25)
    K = gram(MATERN, X)
    ref = np.linalg.solve(K, (np.eye(25) - scipy.linalg.expm(-(5.0 / 25) * K)) @ Y)
    got = fit_kgf_spectral(decompose(MATERN, X), Y, FilterParams.continuous(5.0)).beta
    err = float(np.max(np.abs(got - ref)))
    return err <= 1e-8, f"max beta difference {err:.1e}"


@check("estimators", "krr_matches_solve")
def _krr():
    rng = _rng(3)
    X = rng.uniform(size=30)
    Y = rng.standard_normal(30)
    ref = np.linalg.solve(gram(MIN, X) + 30 * 0.01 * np.eye(30), Y)
    err = float(np.max(np.abs(fit_krr(decompose(MIN, X), Y, 0.01).beta - ref)))
    return err <= 1e-9, f"max beta difference {err:.1e}"


# -- inference -------------------------------------------------------------


def _band_inputs(seed=4, n=30, params=None):
    rng = _rng(seed)
    X = rng.uniform(size=n)
    Y = F3(X) + 0.2 * rng.standard_normal(n)
    params = params or FilterParams.continuous(5.0)
    cache = decompose(MATERN, X)
    resid = Y - fit_kgf_spectral(cache, Y, params).train_predictions
    field = filter_vectors(cache, params, np.linspace(0, 1, 51))
    return field, resid, X


@check("inference", "single_sample_bootstrap")
def _n1():
    cache = decompose(MATERN, [0.3])
    field = filter_vectors(cache, FilterParams.continuous(1.0), np.linspace(0, 1, 5))
    resid = np.array([0.7])
    z = bootstrap_sup_samples(field, empirical_cov_diag(field, resid), resid, 50, seed=1)
    ok = np.array_equal(z, np.abs(bootstrap_multipliers(1, 1, 50)[0]))
    return ok, "samples equal |g|" if ok else "samples differ from |g|"


@check("inference", "self_normalization")
def _scale():
    field, resid, _ = _band_inputs()
    a = bootstrap_sup_samples(field, empirical_cov_diag(field, resid), resid, 30, seed=2)
    b = bootstrap_sup_samples(field, empirical_cov_diag(field, 37.0 * resid), 37.0 * resid, 30, seed=2)
    err = float(np.max(np.abs(a - b)))
    return err <= 1e-12, f"max sample difference {err:.1e}"


@check("inference", "discrete_covariance_recursion")
def _disc_cov():
    eta, m = 0.01, 40
    field, resid, X = _band_inputs(params=FilterParams.discrete(eta, m), n=20)
    K, Kx = gram(MATERN, X), MATERN(field.grid, X)
    Fx, FX, D = np.zeros((field.grid.size, 20)), np.zeros((20, 20)), np.diag(resid)
    for _ in range(m):
        delta = FX - D
        Fx, FX = Fx - (eta / 20) * Kx @ delta, FX - (eta / 20) * K @ delta
    ref = 20 * np.sum(Fx**2, axis=1)
    err = float(np.max(np.abs(empirical_cov_diag(field, resid).values - ref)) / np.max(ref))
    return err <= 1e-8, f"max relative deviation {err:.1e}"


@check("inference", "quantile_order_statistic")
def _quantile():
    ok = quantile([1, 2, 3, 4, 5], 0.95) == 5 and quantile([1, 2, 3, 4, 5], 0.5) == 3
    return ok, "ceil(qB)-th order statistic"


@check("inference", "population_covariance_scale")
def _pop():
    v = population_cov_diag(MIN, FilterParams.continuous(100.0), 0.2, np.linspace(0.1, 1, 10))
    ok = bool(np.all(v > 0) and population_cov_diag(MIN, FilterParams.continuous(0.0), 0.2, 0.5) == 0)
    return ok, f"C_t range [{v.min():.3g}, {v.max():.3g}]"


# -- harness ---------------------------------------------------------------


@check("harness", "data_determinism")
def _data():
    a, b = generate_data(F1, 100, 0.2, 9), generate_data(F1, 100, 0.2, 9)
    ok = np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y)
    return ok, "same seed, same data"


@check("harness", "loglog_two_point")
def _slope():
    s = fit_loglog_slope([(10, 100), (100, 10)])[0]
    return abs(s + 1) <= 1e-12, f"slope {s:.12g}"


@check("harness", "thread_invariance")
def _threads():
    cfg = ExperimentConfig(MATERN, F3, n_list=(40,), reps=4, bootstrap=20, time_rule="topt",
                           multipliers=(1.0, 2.0), grid_size=51, seed=3)
    a = run_coverage_experiment(cfg)
    b = run_coverage_experiment(ExperimentConfig(**{**cfg.__dict__, "threads": 2}))
    ok = [(c.covered, c.mean_width) for c in a] == [(c.covered, c.mean_width) for c in b]
    return ok, "1 vs 2 threads"


def run_checks(echo: Callable[[str], None] = print) -> bool:
    """Run every registered check, echo one line each, return overall success."""
    passed = 0
    for c in REGISTRY:
        try:
            ok, detail = c.fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        passed += bool(ok)
        echo(f"{'PASS' if ok else 'FAIL'}  {c.module}.{c.name}  ({detail})")
    echo(f"{passed}/{len(REGISTRY)} checks passed")
    return passed == len(REGISTRY)
