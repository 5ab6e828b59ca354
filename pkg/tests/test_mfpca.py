"""Tests for multivariate functional PCA."""

import numpy as np
import pytest

from amfewma.basis import block_gram, build_basis, gram_matrices
from amfewma.mfpca import (
    MFPCAModel,
    fit_mfpca,
    mfpca_from_covariance,
    project,
    reconstruct,
    select_n_components,
)
from amfewma.smoothing import CoefficientProfile


@pytest.fixture(scope="module")
def sample():
    basis = build_basis(4, 6)
    grams = gram_matrices(basis)
    rng = np.random.default_rng(11)
    A = rng.normal(size=(12, 12)) * np.linspace(1.0, 0.1, 12)
    coefs = (rng.normal(size=(500, 12)) @ A.T).reshape(500, 2, 6) + 0.3
    return basis, grams, coefs


class TestOracle:
    def test_two_by_two(self):
        # one channel, hat basis: W = [[1/3, 1/6], [1/6, 1/3]]
        basis = build_basis(2, 2)
        grams = gram_matrices(basis, d=1)
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        model = mfpca_from_covariance(np.zeros((1, 2)), cov, grams, basis, 1.0)
        Wh = np.array([[np.sqrt(3) + 1, np.sqrt(3) - 1], [np.sqrt(3) - 1, np.sqrt(3) + 1]]) / (2 * np.sqrt(6))
        np.testing.assert_allclose(Wh @ Wh, grams.W, atol=1e-14)
        S = Wh @ cov @ Wh
        tr, det = np.trace(S), np.linalg.det(S)
        disc = np.sqrt(tr**2 / 4 - det)
        np.testing.assert_allclose(model.eigenvalues, [tr / 2 + disc, tr / 2 - disc], rtol=1e-12)
        for l in range(2):
            b = model.components[l, 0]
            # generalized eigenproblem cov W b = rho b
            np.testing.assert_allclose(cov @ grams.W @ b, model.eigenvalues[l] * b, atol=1e-12)

    def test_orthonormal_components(self, sample):
        basis, grams, coefs = sample
        model = fit_mfpca(coefs, grams)
        B = model.components.reshape(12, -1).T
        np.testing.assert_allclose(B.T @ block_gram(grams.W, 2) @ B, np.eye(12), atol=1e-8)

    def test_round_trip_full_rank(self, sample):
        basis, grams, coefs = sample
        model = fit_mfpca(coefs, grams, variance_threshold=1.0)
        assert model.n_components == 12
        x = CoefficientProfile(basis, coefs[7], "u7")
        back = reconstruct(model, project(model, x))
        np.testing.assert_allclose(back.coefs, x.coefs, atol=1e-8)
        assert back.unit_id == "u7"

    def test_score_variance(self, sample):
        basis, grams, coefs = sample
        model = fit_mfpca(coefs, grams, variance_threshold=1.0)
        var = model.scores(coefs).var(axis=0, ddof=1)
        np.testing.assert_allclose(var, model.eigenvalues, rtol=0.02)
        np.testing.assert_allclose(var, model.eigenvalues, rtol=1e-8)

    def test_scores_uncorrelated(self, sample):
        _, grams, coefs = sample
        model = fit_mfpca(coefs, grams)
        s = model.scores(coefs)
        c = np.cov(s.T)
        np.testing.assert_allclose(c - np.diag(np.diag(c)), 0.0, atol=1e-9)


class TestSelection:
    def test_threshold(self):
        eigs = np.array([4.0, 3.0, 2.0, 1.0])
        assert select_n_components(eigs, 0.7) == 2
        assert select_n_components(eigs, 0.71) == 3
        assert select_n_components(eigs, 1.0) == 4

    def test_zero_variance(self):
        assert select_n_components(np.zeros(3), 0.9) == 1

    def test_sign_convention(self, sample):
        _, grams, coefs = sample
        m1 = fit_mfpca(coefs, grams)
        m2 = fit_mfpca(coefs[::-1].copy(), grams)
        np.testing.assert_allclose(m1.components, m2.components, atol=1e-8)
        for comp in m1.components.reshape(12, -1):
            first = comp[np.flatnonzero(np.abs(comp) > 1e-9)[0]]
            assert first > 0


class TestStandardize:
    def test_scaling_a_channel_leaves_scores_unchanged(self, sample):
        _, grams, coefs = sample
        scaled = coefs.copy()
        scaled[:, 1] *= 50.0
        a = fit_mfpca(coefs, grams, standardize=True)
        b = fit_mfpca(scaled, grams, standardize=True)
        np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, rtol=1e-8)
        np.testing.assert_allclose(np.abs(a.scores(coefs)), np.abs(b.scores(scaled)), atol=1e-8)
        assert b.channel_scale[1] == pytest.approx(50 * a.channel_scale[1])


class TestErrors:
    def test_too_few(self, sample):
        _, grams, coefs = sample
        with pytest.raises(ValueError, match="at least 2"):
            fit_mfpca(coefs[:1], grams)

    def test_non_finite(self, sample):
        _, grams, coefs = sample
        bad = coefs.copy()
        bad[3, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            fit_mfpca(bad, grams)

    def test_basis_mismatch(self, sample):
        _, grams, coefs = sample
        with pytest.raises(ValueError):
            fit_mfpca(coefs[:, :, :5], grams)

    def test_reconstruct_length(self, sample):
        _, grams, coefs = sample
        model = fit_mfpca(coefs, grams)
        with pytest.raises(ValueError):
            reconstruct(model, np.zeros(model.n_components + 1))

    def test_serialization(self, sample):
        _, grams, coefs = sample
        model = fit_mfpca(coefs, grams)
        back = MFPCAModel.from_dict(model.to_dict())
        np.testing.assert_array_equal(back.scores(coefs), model.scores(coefs))
        with pytest.raises(ValueError, match="version"):
            MFPCAModel.from_dict({**model.to_dict(), "format_version": 99})
