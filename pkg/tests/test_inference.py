import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgflow.errors import DegenerateCovarianceError, UnsupportedOperationError
from kgflow.estimators import Dataset, decompose, fit_kgf_spectral, predict
from kgflow.filters import FilterParams
from kgflow.harness import F1, F2, eigen_truth
from kgflow.inference import (
    BandResult,
    bootstrap_multipliers,
    bootstrap_sup_samples,
    build_band,
    confidence_band,
    covers,
    empirical_cov_diag,
    filter_vectors,
    kernel_sections,
    population_cov_diag,
    population_estimate,
    quantile,
)
from kgflow.kernels import MinKernel, PeriodicMatern32, gram, min_spectrum

from oracles import (
    dense_continuous_matrix,
    discrete_F_recursion,
    discrete_G_recursion,
    min_population_cov_quadrature,
)

MIN = MinKernel()
MATERN = PeriodicMatern32(math.sqrt(3) / 4)


def make_instance(rng, n, kernel=MIN, lo=0.05):
    X = rng.uniform(lo, 1.0, size=n)
    Y = np.sin(2 * np.pi * X) + 0.3 * rng.standard_normal(n)
    return X, Y, decompose(kernel, X)


class TestFilterVectors:
    @pytest.mark.parametrize("t", [0.3, 2.0, 9.0])
    def test_single_sample(self, t):
        vf = filter_vectors(decompose(MIN, [1.0]), FilterParams.continuous(t), [1.0])
        np.testing.assert_allclose(vf.V, [[1 - math.exp(-t)]], rtol=1e-14)

    def test_zero_time(self, rng):
        X, Y, c = make_instance(rng, 10)
        vf = filter_vectors(c, FilterParams.continuous(0.0), np.linspace(0, 1, 7))
        assert np.all(vf.V == 0)

    @pytest.mark.parametrize("kernel", [MIN, MATERN])
    def test_dense_oracle(self, rng, kernel):
        X, Y, c = make_instance(rng, 30, kernel, lo=0.1)
        K = gram(kernel, X)
        assert np.linalg.cond(K) < 1e8
        grid = np.linspace(0, 1, 57)
        for t in (1.0, 25.0):
            vf = filter_vectors(c, FilterParams.continuous(t), grid)
            oracle = kernel(grid, X) @ dense_continuous_matrix(K, t)
            assert np.max(np.abs(vf.V - oracle)) <= 1e-8

    def test_exchange_symmetry(self, rng):
        # phi(T_X) k_{x_i}(x) = phi(T_X) k_x(x_i): evaluated on the samples the field is symmetric.
        X, Y, c = make_instance(rng, 25)
        vf = filter_vectors(c, FilterParams.continuous(7.0), X)
        np.testing.assert_allclose(vf.weights, vf.weights.T, atol=1e-12)

    def test_sections_reuse(self, rng):
        X, Y, c = make_instance(rng, 12)
        grid = np.linspace(0, 1, 9)
        p = FilterParams.continuous(3.0)
        a = filter_vectors(c, p, grid)
        b = filter_vectors(c, p, grid, kernel_sections(c, grid))
        np.testing.assert_array_equal(a.V, b.V)
        with pytest.raises(ValueError):
            filter_vectors(c, p, grid[:3], kernel_sections(c, grid))

    def test_invalid_filter(self, rng):
        X, Y, c = make_instance(rng, 5)
        with pytest.raises(ValueError):
            filter_vectors(c, FilterParams.discrete(0.9, 2), [0.5])
        with pytest.raises(ValueError):
            filter_vectors(c, FilterParams.continuous(1.0), [])


class TestEmpiricalCovariance:
    def test_single_sample(self):
        x1, t, eps = 0.6, 3.0, 0.37
        c = decompose(MIN, [x1])
        grid = np.array([0.2, 0.6, 0.9])
        cov = empirical_cov_diag(filter_vectors(c, FilterParams.continuous(t), grid), [eps])
        k11 = x1
        w = (1 - math.exp(-t * k11)) * np.minimum(grid, x1) / k11
        np.testing.assert_allclose(cov.values, (w * eps) ** 2, rtol=1e-13)

    def test_zero_residuals(self, rng):
        X, Y, c = make_instance(rng, 8)
        cov = empirical_cov_diag(filter_vectors(c, FilterParams.continuous(2.0), np.linspace(0, 1, 5)), np.zeros(8))
        assert np.all(cov.values == 0)

    def test_continuous_closed_form(self, rng):
        X, Y, c = make_instance(rng, 20, lo=0.1)
        t = 15.0
        resid = rng.standard_normal(20)
        grid = np.linspace(0, 1, 31)
        cov = empirical_cov_diag(filter_vectors(c, FilterParams.continuous(t), grid), resid)
        M = MIN(grid, X) @ dense_continuous_matrix(gram(MIN, X), t)
        oracle = 20 * np.sum((M * resid) ** 2, axis=1)
        np.testing.assert_allclose(cov.values, oracle, rtol=1e-8, atol=1e-14)

    @pytest.mark.parametrize("kernel", [MIN, MATERN])
    def test_discrete_recursion_oracle(self, rng, kernel):
        n, m, eta = 20, 50, 0.01
        X, Y, c = make_instance(rng, n, kernel)
        params = FilterParams.discrete(eta, m)
        est = fit_kgf_spectral(c, Y, params)
        resid = Y - est.train_predictions
        grid = np.linspace(0, 1, 41)
        cov = empirical_cov_diag(filter_vectors(c, params, grid), resid)
        oracle = discrete_F_recursion(kernel(grid, X), gram(kernel, X), resid, eta, m)
        assert np.max(np.abs(cov.values - oracle)) <= 1e-8

    def test_nonnegative(self, rng):
        X, Y, c = make_instance(rng, 40)
        cov = empirical_cov_diag(filter_vectors(c, FilterParams.continuous(30.0), np.linspace(0, 1, 101)),
                                 rng.standard_normal(40))
        assert np.all(cov.values >= 0)

    def test_length_mismatch(self, rng):
        X, Y, c = make_instance(rng, 4)
        vf = filter_vectors(c, FilterParams.continuous(1.0), [0.5])
        with pytest.raises(ValueError):
            empirical_cov_diag(vf, [1.0, 2.0])


def _setup_band(rng, n=30, kernel=MATERN, t=5.0, grid=None):
    X, Y, c = make_instance(rng, n, kernel)
    params = FilterParams.continuous(t)
    est = fit_kgf_spectral(c, Y, params)
    resid = Y - est.train_predictions
    grid = np.linspace(0, 1, 51) if grid is None else grid
    vf = filter_vectors(c, params, grid)
    return est, resid, vf, empirical_cov_diag(vf, resid)


class TestBootstrap:
    def test_single_sample_gives_abs_normals(self):
        c = decompose(MATERN, [0.4])
        vf = filter_vectors(c, FilterParams.continuous(2.0), np.linspace(0, 1, 11))
        resid = np.array([0.83])
        cov = empirical_cov_diag(vf, resid)
        samples = bootstrap_sup_samples(vf, cov, resid, B=200, seed=5)
        np.testing.assert_array_equal(samples, np.abs(bootstrap_multipliers(5, 1, 200)[0]))

    def test_deterministic(self, rng):
        est, resid, vf, cov = _setup_band(rng)
        a = bootstrap_sup_samples(vf, cov, resid, B=1, seed=11)
        b = bootstrap_sup_samples(vf, cov, resid, B=1, seed=11)
        assert a.shape == (1,) and a[0] == b[0]
        assert bootstrap_sup_samples(vf, cov, resid, B=1, seed=12)[0] != a[0]

    def test_replicates_are_prefix_stable(self, rng):
        est, resid, vf, cov = _setup_band(rng)
        a = bootstrap_sup_samples(vf, cov, resid, B=10, seed=3)
        b = bootstrap_sup_samples(vf, cov, resid, B=25, seed=3)
        # Same multipliers; only the matrix-product blocking may differ.
        np.testing.assert_allclose(a, b[:10], rtol=1e-14)

    @settings(max_examples=15, deadline=None)
    @given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
    def test_residual_scaling_invariance(self, scale, seed):
        est, resid, vf, cov = _setup_band(np.random.default_rng(seed))
        a = bootstrap_sup_samples(vf, cov, resid, B=40, seed=seed)
        cov2 = empirical_cov_diag(vf, scale * resid)
        b = bootstrap_sup_samples(vf, cov2, scale * resid, B=40, seed=seed)
        assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.max(a))

    def test_matches_definition(self, rng):
        est, resid, vf, cov = _setup_band(rng, n=15)
        G = bootstrap_multipliers(9, 15, 20)
        samples = bootstrap_sup_samples(vf, cov, resid, B=20, seed=9)
        w = vf.weights
        for b in range(20):
            W = (w * resid) @ G[:, b] / math.sqrt(15) / np.sqrt(cov.values)
            assert samples[b] == pytest.approx(np.max(np.abs(W)), rel=1e-12)

    def test_discrete_bootstrap_recursion_oracle(self, rng):
        n, m, eta = 20, 60, 0.01
        X, Y, c = make_instance(rng, n, MATERN)
        params = FilterParams.discrete(eta, m)
        est = fit_kgf_spectral(c, Y, params)
        resid = Y - est.train_predictions
        grid = np.linspace(0, 1, 33)
        vf = filter_vectors(c, params, grid)
        cov = empirical_cov_diag(vf, resid)
        samples = bootstrap_sup_samples(vf, cov, resid, B=5, seed=2)
        G = bootstrap_multipliers(2, n, 5)
        Kx, K = MATERN(grid, X), gram(MATERN, X)
        C_rec = discrete_F_recursion(Kx, K, resid, eta, m)
        for b in range(5):
            W = math.sqrt(n) * discrete_G_recursion(Kx, K, resid, G[:, b], eta, m) / np.sqrt(C_rec)
            assert samples[b] == pytest.approx(np.max(np.abs(W)), rel=1e-7)

    def test_degenerate_covariance(self, rng):
        # Every Min-kernel section vanishes at x = 0.
        est, resid, vf, cov = _setup_band(rng, kernel=MIN, grid=np.array([0.5, 0.0, 1.0]))
        with pytest.raises(DegenerateCovarianceError) as info:
            bootstrap_sup_samples(vf, cov, resid, B=3)
        assert info.value.point == 0.0 and info.value.index == 1

    def test_rejects_zero_replicates(self, rng):
        est, resid, vf, cov = _setup_band(rng)
        with pytest.raises(ValueError):
            bootstrap_sup_samples(vf, cov, resid, B=0)


class TestQuantile:
    def test_order_statistics(self):
        assert quantile([1, 2, 3, 4, 5], 0.95) == 5
        assert quantile([5, 3, 1, 4, 2], 0.5) == 3
        assert quantile(np.arange(1, 101), 0.95) == 95

    @pytest.mark.parametrize("q", [0.01, 0.5, 0.99])
    def test_constant(self, q):
        assert quantile([2.5] * 7, q) == 2.5

    @pytest.mark.parametrize("q", [0.0, 1.0, -0.2, 1.3])
    def test_bad_level(self, q):
        with pytest.raises(ValueError):
            quantile([1.0], q)

    def test_empty(self):
        with pytest.raises(ValueError):
            quantile([], 0.5)


class TestBand:
    def test_width_arithmetic(self, rng):
        est, resid, vf, cov = _setup_band(rng)
        cov = type(cov)(cov.grid, np.full(cov.grid.size, 0.25), cov.params)
        band = build_band(est, cov, 2.0, 100, 0.95)
        np.testing.assert_allclose(band.half_width, 0.1, rtol=1e-15)

    def test_zero_and_linear(self, rng):
        est, resid, vf, cov = _setup_band(rng)
        zero = build_band(est, cov, 0.0, 30, 0.95)
        assert np.all(zero.half_width == 0)
        np.testing.assert_array_equal(zero.center, predict(est, cov.grid))
        one, two = build_band(est, cov, 1.3, 30, 0.95), build_band(est, cov, 2.6, 30, 0.95)
        np.testing.assert_allclose(two.half_width, 2 * one.half_width, rtol=1e-15)

    def test_width_formula_recomputed(self, rng):
        est, resid, vf, cov = _setup_band(rng)
        band = build_band(est, cov, 1.7, 30, 0.9)
        assert np.array_equal(band.half_width, 1.7 * 30**-0.5 * np.sqrt(cov.values))

    def test_negative_r(self, rng):
        est, resid, vf, cov = _setup_band(rng)
        with pytest.raises(ValueError):
            build_band(est, cov, -1.0, 30, 0.95)

    def test_covers(self):
        grid = np.linspace(0, 1, 5)
        center = np.sin(grid)
        band = BandResult(grid, center, np.full(5, 0.1), 1.0, 0.95, 10)
        assert covers(band, np.sin)
        shifted = lambda x: np.sin(x) + 0.2 * (x == 0.5)
        assert not covers(band, shifted)
        wider = BandResult(grid, center, np.full(5, 0.3), 1.0, 0.95, 10)
        assert covers(wider, shifted)

    def test_confidence_band_pipeline(self, rng):
        X, Y, c = make_instance(rng, 60, MATERN)
        est = fit_kgf_spectral(c, Y, FilterParams.continuous(12.0))
        grid = np.linspace(0, 1, 101)
        band = confidence_band(est, Y, grid, q=0.9, B=50, seed=4)
        assert band.B == 50 and band.r == quantile(band.samples, 0.9)
        assert np.all(band.lower <= band.center) and np.all(band.upper >= band.center)
        again = confidence_band(est, Y, grid, q=0.9, B=50, seed=4)
        np.testing.assert_array_equal(band.half_width, again.half_width)


class TestPopulation:
    def test_zero_time_and_noise(self):
        assert population_cov_diag(MIN, FilterParams.continuous(0.0), 0.2, 0.5) == 0.0
        assert population_cov_diag(MIN, FilterParams.continuous(10.0), 0.0, 0.5) == 0.0

    def test_quadrature_oracle(self):
        params = FilterParams.continuous(100.0)
        value = population_cov_diag(MIN, params, 0.2, 0.5, 2000)
        oracle = min_population_cov_quadrature(0.5, 100.0, 0.2, 2000)
        assert value == pytest.approx(oracle, rel=1e-4)

    def test_continuous_gain(self):
        t = 4.0
        lam1 = min_spectrum(1)[0]
        v = population_cov_diag(MIN, FilterParams.continuous(t), 1.0, 0.3, n_terms=1)
        assert v == pytest.approx((1 - math.exp(-t * lam1)) ** 2 * 2 * math.sin(math.pi * 0.3 / 2) ** 2, rel=1e-13)

    def test_unsupported_kernel(self):
        with pytest.raises(UnsupportedOperationError):
            population_cov_diag(MATERN, FilterParams.continuous(1.0), 0.2, 0.5)

    def test_lower_bound_assumption(self):
        # C_t(x, x) / (sigma^2 t^(1/2)) stays bounded away from 0 as t grows (decay rate 2).
        # Every Min-kernel eigenfunction vanishes at 0, so the grid starts at 0.1.
        grid = np.linspace(0.1, 1.0, 91)
        ratios = [
            np.min(population_cov_diag(MIN, FilterParams.continuous(t), 0.2, grid)) / (0.04 * math.sqrt(t))
            for t in (1e2, 1e3, 1e4)
        ]
        assert min(ratios) > 0.05

    def test_estimate_zero_time(self):
        assert population_estimate(MIN, FilterParams.continuous(0.0), [1.0, 0.5], 0.4) == 0.0

    def test_estimate_single_eigenfunction(self):
        t = 3.0
        lam1, e1 = min_spectrum(1)
        grid = np.linspace(0, 1, 11)
        vals = population_estimate(MIN, FilterParams.continuous(t), [1.0], grid)
        np.testing.assert_allclose(vals, (1 - math.exp(-t * lam1)) * e1(grid), rtol=1e-13)

    def test_estimate_long_time_recovers_f2(self):
        grid = np.linspace(0, 1, 1001)
        a = F2.mercer_coefficients(MIN, 2000)
        vals = population_estimate(MIN, FilterParams.continuous(1e6), a, grid)
        assert np.max(np.abs(vals - F2(grid))) <= 1e-3

    def test_estimate_quadrature_coefficients(self):
        # Numerical coefficients of an eigenfunction reproduce the analytic ones.
        grid = np.linspace(0, 1, 101)
        e3 = eigen_truth(3)
        numeric = type(e3)(e3.tag, e3.fn).mercer_coefficients(MIN, 50)
        np.testing.assert_allclose(numeric, np.eye(50)[2], atol=1e-12)
        a1 = F1.mercer_coefficients(MIN, 2000)
        assert np.sum(a1**2) == pytest.approx(1.0, abs=1e-3)  # ||f1||_L2 = 1
        vals = population_estimate(MIN, FilterParams.continuous(1e7), a1, grid)
        assert np.max(np.abs(vals - F1(grid))[5:]) <= 2e-2
