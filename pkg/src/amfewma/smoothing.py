"""Roughness-penalized least-squares smoothing with GCV-selected penalty."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from amfewma.basis import BasisSystem, GramMatrices, eval_basis

DEFAULT_LAMBDA_GRID = np.logspace(-8, 4, 25)

#: GCV values closer than this (relative to the mean squared response) count as ties.
_TIE_RTOL = 1e-12
_SINGULAR_RTOL = 1e-10


@dataclass(frozen=True)
class DiscreteProfile:
    """Raw observations ``(t_i, y_i)`` of one channel of one unit."""

    unit_id: str
    channel: int
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if t.ndim != 1 or t.shape != y.shape:
            raise ValueError("t and y must be 1-d arrays of equal length")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError(f"unit {self.unit_id!r} channel {self.channel}: t must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)

    @property
    def m(self) -> int:
        return self.t.size


@dataclass(frozen=True)
class CoefficientProfile:
    """A ``p``-channel functional datum stored as a ``(p, K)`` coefficient matrix."""

    basis: BasisSystem
    coefs: np.ndarray
    unit_id: str = ""

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.coefs, dtype=float))
        if c.shape[1] != self.basis.n_basis:
            raise ValueError(f"coefficient matrix has {c.shape[1]} columns, basis has {self.basis.n_basis}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "coefs", c)

    @property
    def p(self) -> int:
        return self.coefs.shape[0]

    def evaluate(self, grid) -> np.ndarray:
        """Values on ``grid``, shape ``(p, len(grid))``."""
        return self.coefs @ eval_basis(self.basis, grid).T


def gcv_criterion(sse, df, m: int):
    """Generalized cross-validation score ``(sse/m) / (1 - df/m)**2``."""
    return (np.asarray(sse) / m) / (1.0 - np.asarray(df) / m) ** 2


def fit_penalized(profile: DiscreteProfile, basis: BasisSystem, grams: GramMatrices, lambda_s: float):
    """Minimize ``||y - Phi c||^2 + lambda_s c' R c``.

    Returns
    -------
    coefs : ndarray of shape (K,)
    df : float
        Trace of the hat matrix.
    sse : float
        Residual sum of squares.
    """
    if lambda_s < 0:
        raise ValueError("lambda_s must be nonnegative")
    phi = eval_basis(basis, profile.t)
    m, K = phi.shape
    # QR of the stacked system [Phi; sqrt(lambda) F] avoids forming the normal equations
    A = np.vstack([phi, np.sqrt(lambda_s) * grams.penalty_factor])
    Q, Rq = np.linalg.qr(A)
    diag = np.abs(np.diag(Rq))
    if diag.min() <= _SINGULAR_RTOL * max(diag.max(), 1e-300):
        raise ValueError(
            f"singular normal equations (m={m}, K={K}, lambda_s={lambda_s}); "
            "use more observation points or a positive smoothing parameter"
        )
    coefs = linalg.solve_triangular(Rq, Q[:m].T @ profile.y)
    df = float(np.sum(Q[:m] ** 2))
    resid = profile.y - phi @ coefs
    return coefs, df, float(resid @ resid)


class Smoother:
    """Batched GCV smoothing of many profiles observed on one common grid ``t``.

    When ``Phi' Phi`` is positive definite the penalized smoother is
    diagonalized once (Demmler-Reinsch), so every candidate ``lambda_s``
    costs only ``O(K)`` per profile.
    """

    def __init__(self, basis: BasisSystem, grams: GramMatrices, t, lambda_grid=DEFAULT_LAMBDA_GRID):
        self.basis = basis
        self.grams = grams
        self.t = np.asarray(t, dtype=float)
        self.lambda_grid = np.sort(np.asarray(lambda_grid, dtype=float))
        if self.lambda_grid.size == 0:
            raise ValueError("lambda grid must be nonempty")
        if np.any(self.lambda_grid < 0):
            raise ValueError("lambda grid must be nonnegative")
        self.m = self.t.size
        self.phi = eval_basis(basis, self.t)
        B = self.phi.T @ self.phi
        self._dr = None
        if self.m >= basis.n_basis:
            try:
                L = np.linalg.cholesky(B)
            except np.linalg.LinAlgError:
                L = None
            if L is not None and np.linalg.cond(B) < 1e12:
                Linv = linalg.solve_triangular(L, np.eye(basis.n_basis), lower=True)
                # singular values of F L^-T resolve the penalty null space to machine precision
                _, sv, Vt = np.linalg.svd(grams.penalty_factor @ Linv.T, full_matrices=True)
                d = np.zeros(basis.n_basis)
                d[: sv.size] = sv**2
                Q = Vt.T
                self._dr = (self.phi @ Linv.T @ Q, Linv.T @ Q, d)
        self.df = np.array([self._df(lam) for lam in self.lambda_grid])

    def _shrink(self, lam: float) -> np.ndarray:
        return 1.0 / (1.0 + lam * self._dr[2])

    def _df(self, lam: float) -> float:
        if self._dr is not None:
            return float(self._shrink(lam).sum())
        A = self.phi.T @ self.phi + lam * self.grams.R
        try:
            return float(np.trace(np.linalg.solve(A, self.phi.T @ self.phi)))
        except np.linalg.LinAlgError:
            return float("inf")

    def gcv_table(self, Y) -> tuple[np.ndarray, np.ndarray]:
        """GCV score and sse for every profile (rows of ``Y``) and grid value."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        n_lam = self.lambda_grid.size
        sse = np.empty((Y.shape[0], n_lam))
        if self._dr is not None:
            U = self._dr[0]
            z = Y @ U
            perp = Y - z @ U.T
            base = np.einsum("ij,ij->i", perp, perp)
            for i, lam in enumerate(self.lambda_grid):
                s = self._shrink(lam)
                sse[:, i] = base + ((1.0 - s) ** 2 * z**2).sum(axis=1)
        else:
            for i, lam in enumerate(self.lambda_grid):
                A = self.phi.T @ self.phi + lam * self.grams.R
                try:
                    H = self.phi @ np.linalg.solve(A, self.phi.T)
                except np.linalg.LinAlgError:
                    sse[:, i] = np.nan
                    continue
                r = Y - Y @ H.T
                sse[:, i] = np.einsum("ij,ij->i", r, r)
        with np.errstate(divide="ignore", invalid="ignore"):
            gcv = gcv_criterion(sse, self.df[None, :], self.m)
        saturated = self.df >= self.m - 1e-9
        gcv[:, saturated] = np.inf
        gcv[~np.isfinite(gcv)] = np.inf
        return gcv, sse

    def select(self, Y) -> np.ndarray:
        """Index of the GCV-optimal grid value for each profile; ties go to larger lambda."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        gcv, _ = self.gcv_table(Y)
        if np.all(np.isinf(gcv[0])):
            raise ValueError(f"every lambda_s on the grid saturates the fit (df >= m = {self.m})")
        scale = np.mean(Y**2, axis=1)
        scale = np.where(scale > 0, scale, 1.0)
        best = gcv.min(axis=1)
        near = gcv <= (best + _TIE_RTOL * scale)[:, None]
        # last True along the ascending grid = largest tied lambda
        return near.shape[1] - 1 - np.argmax(near[:, ::-1], axis=1)

    def coefficients(self, Y, index) -> np.ndarray:
        """Penalized coefficients of each row of ``Y`` at grid position ``index``."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        index = np.broadcast_to(np.asarray(index), (Y.shape[0],))
        if self._dr is not None:
            U, T, d = self._dr
            s = 1.0 / (1.0 + self.lambda_grid[index][:, None] * d[None, :])
            return (s * (Y @ U)) @ T.T
        out = np.empty((Y.shape[0], self.basis.n_basis))
        for i in np.unique(index):
            rows = index == i
            A = self.phi.T @ self.phi + self.lambda_grid[i] * self.grams.R
            out[rows] = np.linalg.solve(A, self.phi.T @ Y[rows].T).T
        return out

    def fit(self, Y) -> tuple[np.ndarray, np.ndarray]:
        """GCV-select and fit every row of ``Y``; returns ``(coefs, lambdas)``."""
        idx = self.select(Y)
        return self.coefficients(Y, idx), self.lambda_grid[idx]


def gcv_select(profile: DiscreteProfile, basis: BasisSystem, grams: GramMatrices, grid=DEFAULT_LAMBDA_GRID):
    """Pick ``lambda_s`` from ``grid`` minimizing GCV; returns ``(lambda_s, coefs)``."""
    sm = Smoother(basis, grams, profile.t, grid)
    coefs, lam = sm.fit(profile.y[None, :])
    return float(lam[0]), coefs[0]


def smooth_unit(
    raw: Sequence[DiscreteProfile],
    basis: BasisSystem,
    grams: GramMatrices,
    grid=DEFAULT_LAMBDA_GRID,
    p: int | None = None,
) -> CoefficientProfile:
    """Smooth each channel of one unit independently and stack into a ``(p, K)`` profile."""
    if not raw:
        raise ValueError("no channels supplied")
    by_channel = {prof.channel: prof for prof in raw}
    p = p if p is not None else max(by_channel)
    missing = [j for j in range(1, p + 1) if j not in by_channel]
    if missing:
        raise ValueError(f"unit {raw[0].unit_id!r} is missing channel(s) {missing}")
    rows = [gcv_select(by_channel[j], basis, grams, grid)[1] for j in range(1, p + 1)]
    return CoefficientProfile(basis, np.vstack(rows), raw[0].unit_id)


def smooth_array(values: np.ndarray, t, basis: BasisSystem, grams: GramMatrices, grid=DEFAULT_LAMBDA_GRID) -> np.ndarray:
    """Smooth an array of curves ``(..., m)`` sampled on a shared grid into ``(..., K)`` coefficients."""
    values = np.asarray(values, dtype=float)
    sm = Smoother(basis, grams, t, grid)
    flat = values.reshape(-1, values.shape[-1])
    coefs, _ = sm.fit(flat)
    return coefs.reshape(values.shape[:-1] + (basis.n_basis,))
