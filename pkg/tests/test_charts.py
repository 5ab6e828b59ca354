"""Tests for score functions, chart recursions and quadratic-form statistics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import simpson

from amfewma.basis import build_basis, eval_basis, gram_matrices
from amfewma.charts import (
    Chart,
    ChartState,
    ScoreParams,
    adaptive_weight,
    amfewma_step,
    eta1,
    eta2,
    grid_projector,
    mfewma_step,
    mfewma_update,
    shewhart_t2,
    v2,
)
from amfewma.mfpca import fit_mfpca, mfpca_from_covariance

GRID = np.linspace(-10.0, 10.0, 10_000)


@pytest.fixture(scope="module")
def model():
    basis = build_basis(4, 8)
    grams = gram_matrices(basis)
    rng = np.random.default_rng(2)
    coefs = rng.normal(size=(300, 3, 8)) * np.linspace(1, 0.2, 8)
    return basis, grams, fit_mfpca(coefs, grams), coefs


@pytest.mark.parametrize("eta", [eta1, eta2], ids=["eta1", "eta2"])
@pytest.mark.parametrize("lam", [0.05, 0.3, 0.9])
class TestScoreFunctions:
    def test_odd(self, eta, lam):
        np.testing.assert_allclose(eta(-GRID, 2.0, lam), -eta(GRID, 2.0, lam), atol=1e-15)

    def test_strictly_increasing(self, eta, lam):
        assert np.all(np.diff(eta(GRID, 2.0, lam)) > 0)

    def test_continuous_at_threshold(self, eta, lam):
        c = 2.0
        for edge in (c, -c):
            below = eta(np.nextafter(edge, 0.0), c, lam)
            above = eta(np.nextafter(edge, 2 * edge), c, lam)
            assert above == pytest.approx(below, abs=1e-12)

    def test_sandwich(self, eta, lam):
        e = GRID[GRID > 0]
        out = eta(e, 2.0, lam)
        assert np.all(lam * e <= out + 1e-15)
        assert np.all(out <= e + 1e-15)

    def test_limits(self, eta, lam):
        assert eta(1e-9, 2.0, lam) == pytest.approx(lam * 1e-9, rel=1e-6)
        assert eta(5.0, 2.0, lam) == pytest.approx(5.0 - (1 - lam) * 2.0 if eta is eta1 else 5.0)


class TestAdaptiveWeight:
    def test_zero_error(self):
        assert adaptive_weight(0.0, 1.0, 0.2) == 0.2
        assert adaptive_weight(0.0, 1.0, 0.2, "eta2") == 0.2

    def test_tends_to_one(self):
        assert adaptive_weight(1e6, 1.0, 0.2) == pytest.approx(1.0, abs=1e-5)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            adaptive_weight(1.0, 1.0, 0.2, "eta3")


class TestRecursions:
    def test_mfewma_scalar_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(20, 1, 1))
        y, ref = np.zeros((1, 1)), 0.0
        for xi in x:
            y = mfewma_update(y, xi, 0.3)
            ref = 0.7 * ref + 0.3 * xi[0, 0]
        assert y[0, 0] == pytest.approx(ref, abs=1e-14)

    def test_reduces_to_mfewma_for_large_k(self, model):
        basis, _, _, coefs = model
        sigma = np.ones((3, 8)) * 0.5
        params = ScoreParams(0.2, 1e6, sigma)
        a = ChartState.start(3, 8)
        b = ChartState.start(3, 8)
        for x in coefs[:50]:
            a = amfewma_step(a, x, params, basis)
            b = mfewma_step(b, x, 0.2)
            assert np.max(np.abs(a.Y - b.Y)) <= 1e-8
        assert a.n == 50

    @pytest.mark.parametrize("variant", ["eta1", "eta2"])
    def test_lambda_one_returns_observation(self, model, variant):
        basis, _, _, coefs = model
        params = ScoreParams(1.0, 2.0, np.ones((3, 8)), variant)
        state = ChartState.start(3, 8)
        for x in coefs[:10]:
            state = amfewma_step(state, x, params, basis)
            np.testing.assert_allclose(state.Y, x, atol=1e-10)

    def test_adaptive_moves_further_on_large_errors(self, model):
        basis, _, _, _ = model
        proj = grid_projector(basis)
        sigma = np.full((1, 8), 1.0)
        params = ScoreParams(0.1, 1.0, sigma)
        big = np.full((1, 8), 10.0)
        a = amfewma_step(ChartState.start(1, 8), big, params, basis).Y
        m = mfewma_step(ChartState.start(1, 8), big, 0.1).Y
        assert np.all(proj.values(a) > proj.values(m))

    def test_bad_weight(self):
        with pytest.raises(ValueError):
            mfewma_update(np.zeros((1, 2)), np.ones((1, 2)), 1.5)

    def test_bad_params(self):
        with pytest.raises(ValueError):
            ScoreParams(0.0, 1.0, np.ones((1, 4)))
        with pytest.raises(ValueError):
            ScoreParams(0.5, -1.0, np.ones((1, 4)))


class TestStatistics:
    def test_v2_matches_quadrature(self):
        basis = build_basis(4, 4)
        grams = gram_matrices(basis)
        rng = np.random.default_rng(5)
        A = rng.normal(size=(8, 8))
        model = mfpca_from_covariance(np.zeros((2, 4)), A @ A.T, grams, basis, 1.0)
        t = np.linspace(0, 1, 2001)
        phi = eval_basis(basis, t)
        psi = model.components @ phi.T  # (L, p, t)
        for _ in range(100):
            y = rng.normal(size=(2, 4))
            yv = y @ phi.T
            xi = simpson((psi * yv).sum(axis=1), x=t, axis=-1)
            direct = np.sum(xi**2 / model.eigenvalues)
            assert v2(model, y) == pytest.approx(direct, rel=1e-6)

    def test_shewhart_centers(self, model):
        _, _, m, coefs = model
        assert shewhart_t2(m, m.mean) == pytest.approx(0.0, abs=1e-20)
        assert shewhart_t2(m, coefs[0]) == pytest.approx(v2(m, coefs[0] - m.mean), rel=1e-12)

    def test_t2_mean_is_n_components(self, model):
        _, _, m, coefs = model
        assert shewhart_t2(m, coefs).mean() == pytest.approx(m.n_components * 299 / 300, rel=1e-8)

    def test_negligible_eigenvalues_skipped(self):
        basis = build_basis(2, 2)
        grams = gram_matrices(basis, d=1)
        cov = np.diag([1.0, 0.0])
        m = mfpca_from_covariance(np.zeros((1, 2)), cov, grams, basis, 1.0)
        assert np.isfinite(v2(m, np.ones((1, 2))))

    def test_batched(self, model):
        _, _, m, coefs = model
        out = v2(m, coefs[:5])
        assert out.shape == (5,)
        assert out[2] == pytest.approx(v2(m, coefs[2]))


class TestChart:
    def test_round_trip(self, model):
        basis, _, m, coefs = model
        chart = Chart("amfewma", m, params=ScoreParams(0.3, 2.0, np.ones((3, 8)), "eta2"))
        assert chart.name == "AMFEWMA(lam=0.3,k=2)"
        back = Chart.from_dict(chart.to_dict())
        Y = chart.update(chart.start((4,)), coefs[:4])
        np.testing.assert_array_equal(back.update(back.start((4,)), coefs[:4]), Y)
        np.testing.assert_array_equal(back.statistic(Y), chart.statistic(Y))

    def test_shewhart_ignores_state(self, model):
        _, _, m, coefs = model
        chart = Chart("shewhart", m)
        np.testing.assert_array_equal(chart.update(coefs[0], coefs[1]), coefs[1])

    def test_unknown_kind(self, model):
        with pytest.raises(ValueError):
            Chart("cusum", model[2])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 1.0), st.integers(0, 10_000))
    def test_mfewma_is_convex_combination(self, lam, seed):
        rng = np.random.default_rng(seed)
        Y, X = rng.normal(size=(2, 3, 8))
        out = mfewma_update(Y, X, lam)
        lo, hi = np.minimum(X, Y), np.maximum(X, Y)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
