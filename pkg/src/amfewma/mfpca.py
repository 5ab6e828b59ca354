"""Multivariate functional PCA on basis coefficients."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from amfewma.basis import BasisSystem, GramMatrices, block_gram
from amfewma.smoothing import CoefficientProfile

FORMAT_VERSION = 1
_EIG_CLAMP = 1e-10


@dataclass(frozen=True)
class ScoreVector:
    unit_id: str
    scores: np.ndarray


@dataclass(frozen=True)
class MFPCAModel:
    """Fitted MFPCA.

    ``components[l]`` is the ``(p, K)`` coefficient matrix of the l-th
    eigenfunction; all ``p*K`` components are kept and ``n_components`` marks
    the truncation. ``channel_scale`` holds the per-channel scaling (ones
    unless the fit was standardized).
    """

    basis: BasisSystem
    W: np.ndarray
    mean: np.ndarray
    eigenvalues: np.ndarray
    components: np.ndarray
    n_components: int
    channel_scale: np.ndarray
    variance_threshold: float = 0.9

    @property
    def p(self) -> int:
        return self.mean.shape[0]

    @property
    def explained(self) -> np.ndarray:
        """Cumulative explained-variance fractions for 1..p*K components."""
        total = self.eigenvalues.sum()
        if total <= 0:
            return np.ones_like(self.eigenvalues)
        return np.cumsum(self.eigenvalues) / total

    @cached_property
    def loadings(self) -> np.ndarray:
        """``(p*K, p*K)`` matrix mapping scaled centered coefficients to scores."""
        flat = self.components.reshape(self.components.shape[0], -1).T
        return block_gram(self.W, self.p) @ flat

    def _scaled(self, coefs: np.ndarray, center: bool) -> np.ndarray:
        c = np.asarray(coefs, dtype=float)
        if c.shape[-2:] != self.mean.shape:
            raise ValueError(f"expected coefficient shape (..., {self.p}, {self.basis.n_basis}), got {c.shape}")
        if center:
            c = c - self.mean
        return c / self.channel_scale[:, None]

    def scores(self, coefs, n: int | None = None, center: bool = True) -> np.ndarray:
        """Scores of one or many ``(..., p, K)`` coefficient arrays on the first ``n`` components."""
        n = self.n_components if n is None else n
        c = self._scaled(coefs, center)
        flat = c.reshape(c.shape[:-2] + (-1,))
        return flat @ self.loadings[:, :n]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "mfpca",
            "basis": self.basis.to_dict(),
            "W": self.W.tolist(),
            "mean": self.mean.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "components": self.components.tolist(),
            "n_components": self.n_components,
            "channel_scale": self.channel_scale.tolist(),
            "variance_threshold": self.variance_threshold,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MFPCAModel":
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported MFPCA format version {data.get('format_version')!r}")
        return cls(
            basis=BasisSystem.from_dict(data["basis"]),
            W=np.asarray(data["W"], dtype=float),
            mean=np.asarray(data["mean"], dtype=float),
            eigenvalues=np.asarray(data["eigenvalues"], dtype=float),
            components=np.asarray(data["components"], dtype=float),
            n_components=int(data["n_components"]),
            channel_scale=np.asarray(data["channel_scale"], dtype=float),
            variance_threshold=float(data.get("variance_threshold", 0.9)),
        )


def _as_array(sample) -> tuple[np.ndarray, BasisSystem | None]:
    if isinstance(sample, np.ndarray):
        return np.asarray(sample, dtype=float), None
    sample = list(sample)
    if sample and isinstance(sample[0], CoefficientProfile):
        basis = sample[0].basis
        if any(s.basis != basis for s in sample):
            raise ValueError("all profiles must share one basis system")
        return np.stack([s.coefs for s in sample]), basis
    return np.asarray(sample, dtype=float), None


def select_n_components(eigenvalues: np.ndarray, threshold: float) -> int:
    """Smallest L whose cumulative explained variance reaches ``threshold``."""
    total = eigenvalues.sum()
    if total <= 0:
        return 1
    cum = np.cumsum(eigenvalues) / total
    return int(min(np.searchsorted(cum, threshold - 1e-12) + 1, eigenvalues.size))


def fit_mfpca(
    sample,
    grams: GramMatrices,
    variance_threshold: float = 0.9,
    standardize: bool = False,
    basis: BasisSystem | None = None,
    mean: np.ndarray | None = None,
) -> MFPCAModel:
    """MFPCA of N profiles given as ``(N, p, K)`` coefficients or CoefficientProfiles.

    The covariance of ``W^{1/2} (c_i - cbar)`` is eigendecomposed and the
    eigenvectors mapped back through ``W^{-1/2}``. Pass ``mean`` to center at
    a known mean instead of the sample mean.
    """
    C, sample_basis = _as_array(sample)
    basis = basis or sample_basis or grams.basis
    if basis is None:
        raise ValueError("basis system unknown; pass basis=")
    if not 0 < variance_threshold <= 1:
        raise ValueError("variance_threshold must lie in (0, 1]")
    if C.ndim != 3:
        raise ValueError(f"sample must have shape (N, p, K), got {C.shape}")
    N, p, K = C.shape
    if N < 2:
        raise ValueError("MFPCA needs at least 2 profiles")
    if K != basis.n_basis:
        raise ValueError(f"sample has {K} coefficients per channel, basis has {basis.n_basis}")
    if not np.all(np.isfinite(C)):
        raise ValueError("sample contains non-finite coefficients")

    cbar = C.mean(axis=0) if mean is None else np.asarray(mean, dtype=float)
    centered = C - cbar
    scale = np.ones(p)
    if standardize:
        var = np.einsum("njk,kl,njl->j", centered, grams.W, centered) / (N - 1)
        scale = np.where(var > 0, np.sqrt(var), 1.0)
    flat = (centered / scale[:, None]).reshape(N, p * K)
    cov = flat.T @ flat / (N - 1)
    return mfpca_from_covariance(cbar, cov, grams, basis, variance_threshold, scale)


def mfpca_from_covariance(
    mean: np.ndarray,
    cov: np.ndarray,
    grams: GramMatrices,
    basis: BasisSystem | None = None,
    variance_threshold: float = 0.9,
    channel_scale: np.ndarray | None = None,
) -> MFPCAModel:
    """MFPCA from the ``(p*K, p*K)`` covariance of the (scaled) coefficient vectors."""
    basis = basis or grams.basis
    mean = np.asarray(mean, dtype=float)
    p, K = mean.shape
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (p * K, p * K):
        raise ValueError(f"covariance must be {(p * K, p * K)}, got {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariance contains non-finite entries")
    Wh = np.kron(np.eye(p), grams.W_sqrt)
    Whi = np.kron(np.eye(p), grams.W_inv_sqrt)
    S = Wh @ cov @ Wh
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    if np.any(vals < -_EIG_CLAMP * max(1.0, abs(vals[0]))):
        raise np.linalg.LinAlgError("sample covariance has materially negative eigenvalues")
    vals = np.clip(vals, 0.0, None)

    B = Whi @ vecs
    for l in range(B.shape[1]):
        nz = np.flatnonzero(np.abs(B[:, l]) > 1e-9)
        if nz.size and B[nz[0], l] < 0:
            B[:, l] = -B[:, l]

    return MFPCAModel(
        basis=basis,
        W=grams.W,
        mean=mean,
        eigenvalues=vals,
        components=B.T.reshape(p * K, p, K),
        n_components=select_n_components(vals, variance_threshold),
        channel_scale=np.ones(p) if channel_scale is None else np.asarray(channel_scale, dtype=float),
        variance_threshold=variance_threshold,
    )


def project(model: MFPCAModel, x) -> ScoreVector:
    """Scores ``xi_l = <psi_l, x - mu>_H`` on the retained components."""
    if isinstance(x, CoefficientProfile):
        if x.basis != model.basis:
            raise ValueError("profile basis does not match the model basis")
        return ScoreVector(x.unit_id, model.scores(x.coefs))
    return ScoreVector("", model.scores(np.asarray(x, dtype=float)))


def reconstruct(model: MFPCAModel, scores) -> CoefficientProfile:
    """Truncated expansion ``mu + D sum_l xi_l psi_l`` as a CoefficientProfile."""
    s = np.asarray(getattr(scores, "scores", scores), dtype=float)
    if s.shape != (model.n_components,):
        raise ValueError(f"expected {model.n_components} scores, got shape {s.shape}")
    comp = np.tensordot(s, model.components[: model.n_components], axes=1)
    unit = getattr(scores, "unit_id", "")
    return CoefficientProfile(model.basis, model.mean + comp * model.channel_scale[:, None], unit)
