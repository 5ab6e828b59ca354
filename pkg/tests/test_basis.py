"""Tests for B-spline bases and Gram matrices."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import simpson

from amfewma.basis import BasisSystem, block_gram, build_basis, eval_basis, gram_matrices, inner_product
from amfewma.smoothing import CoefficientProfile


class TestBasisSystem:
    def test_linear_two_function_gram(self):
        # hat functions 1-t and t on [0, 1]
        grams = gram_matrices(build_basis(order=2, n_basis=2), d=1)
        np.testing.assert_allclose(grams.W, [[1 / 3, 1 / 6], [1 / 6, 1 / 3]], atol=1e-14)

    def test_partition_of_unity(self):
        basis = build_basis(4, 15)
        phi = eval_basis(basis, np.linspace(0, 1, 301))
        np.testing.assert_allclose(phi.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(phi >= -1e-14)

    def test_right_endpoint_is_defined(self):
        phi = eval_basis(build_basis(4, 8), [1.0])
        assert np.all(np.isfinite(phi))
        assert phi[0, -1] == pytest.approx(1.0)

    def test_roughness_rank(self):
        grams = gram_matrices(build_basis(4, 15), d=2)
        assert np.linalg.matrix_rank(grams.R, tol=1e-8 * np.abs(grams.R).max()) == 13

    def test_penalty_kills_lines(self):
        basis = build_basis(4, 12)
        grams = gram_matrices(basis)
        # coefficients of f(t) = 2 - 3t: Greville abscissae reproduce linear functions
        greville = np.array([basis.knots[i + 1:i + 4].mean() for i in range(basis.n_basis)])
        c = 2 - 3 * greville
        assert c @ grams.R @ c == pytest.approx(0.0, abs=1e-10)

    def test_inner_product_matches_quadrature(self):
        basis = build_basis(4, 15)
        grams = gram_matrices(basis)
        rng = np.random.default_rng(0)
        a = CoefficientProfile(basis, rng.normal(size=(3, 15)))
        b = CoefficientProfile(basis, rng.normal(size=(3, 15)))
        t = np.linspace(0, 1, 4001)
        direct = simpson((a.evaluate(t) * b.evaluate(t)).sum(axis=0), x=t)
        assert inner_product(a, b, grams) == pytest.approx(direct, abs=1e-8)

    def test_integral_of_one(self):
        for order, k in [(2, 2), (3, 7), (4, 15)]:
            W = gram_matrices(build_basis(order, k), d=1).W
            assert np.ones(k) @ W @ np.ones(k) == pytest.approx(1.0, abs=1e-13)

    def test_constant_and_zero_profiles(self):
        basis = build_basis(4, 15)
        grams = gram_matrices(basis)
        one = CoefficientProfile(basis, np.ones((1, 15)))
        assert inner_product(one, one, grams) == pytest.approx(1.0, abs=1e-13)
        assert inner_product(np.zeros((2, 15)), np.zeros((2, 15)), grams) == 0.0

    def test_inner_product_shape_mismatch(self):
        grams = gram_matrices(build_basis(4, 6))
        with pytest.raises(ValueError):
            inner_product(np.zeros((2, 6)), np.zeros((3, 6)), grams)

    def test_penalty_factor(self):
        grams = gram_matrices(build_basis(4, 12))
        F = grams.penalty_factor
        np.testing.assert_allclose(F.T @ F, grams.R, atol=1e-9 * np.abs(grams.R).max())

    def test_block_gram(self):
        W = gram_matrices(build_basis(4, 6)).W
        B = block_gram(W, 3)
        assert B.shape == (18, 18)
        np.testing.assert_allclose(B[6:12, 6:12], W)
        assert np.all(B[:6, 6:] == 0)

    def test_power_matrices(self):
        grams = gram_matrices(build_basis(4, 10))
        np.testing.assert_allclose(grams.W_sqrt @ grams.W_sqrt, grams.W, atol=1e-13)
        np.testing.assert_allclose(grams.W_inv_sqrt @ grams.W @ grams.W_inv_sqrt, np.eye(10), atol=1e-8)

    def test_round_trip(self):
        basis = build_basis(3, 9, domain=(0.0, 2.0))
        assert BasisSystem.from_dict(basis.to_dict()) == basis

    @pytest.mark.parametrize("kwargs", [dict(order=1, n_basis=4), dict(order=4, n_basis=3)])
    def test_bad_specs(self, kwargs):
        with pytest.raises(ValueError):
            build_basis(**kwargs)

    def test_penalty_order_must_be_below_order(self):
        with pytest.raises(ValueError):
            gram_matrices(build_basis(2, 5), d=2)

    def test_outside_domain(self):
        with pytest.raises(ValueError):
            eval_basis(build_basis(4, 8), [1.5])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 5), st.integers(0, 12))
    def test_gram_positive_definite(self, order, extra):
        grams = gram_matrices(build_basis(order, order + extra), d=order - 1)
        np.testing.assert_allclose(grams.W, grams.W.T)
        assert np.linalg.eigvalsh(grams.W).min() > 0
        assert np.linalg.eigvalsh(grams.R).min() > -1e-9 * np.abs(grams.R).max()
