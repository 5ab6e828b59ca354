"""B-spline basis systems with exact Gram and roughness-penalty matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.interpolate import BSpline

_DOMAIN_TOL = 1e-12


@dataclass(frozen=True)
class BasisSystem:
    """Clamped B-spline basis of polynomial order ``order`` on ``domain``.

    ``breakpoints`` are the interior breakpoints; the boundary knots are
    repeated ``order`` times so the basis interpolates at both endpoints.
    """

    order: int
    breakpoints: tuple[float, ...]
    domain: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        lo, hi = self.domain
        if not hi > lo:
            raise ValueError("domain must satisfy lo < hi")
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp.size and (np.any(np.diff(bp) <= 0) or bp[0] <= lo or bp[-1] >= hi):
            raise ValueError("interior breakpoints must be strictly increasing inside the domain")
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in bp))
        object.__setattr__(self, "domain", (float(lo), float(hi)))

    @property
    def n_basis(self) -> int:
        return len(self.breakpoints) + self.order

    @property
    def degree(self) -> int:
        return self.order - 1

    @cached_property
    def knots(self) -> np.ndarray:
        lo, hi = self.domain
        return np.concatenate([np.full(self.order, lo), self.breakpoints, np.full(self.order, hi)])

    @cached_property
    def spans(self) -> np.ndarray:
        """Distinct knot values, i.e. the boundaries of the polynomial pieces."""
        return np.concatenate([[self.domain[0]], self.breakpoints, [self.domain[1]]])

    @cached_property
    def _spline(self) -> BSpline:
        return BSpline(self.knots, np.eye(self.n_basis), self.degree, extrapolate=False)

    def _derivative(self, d: int) -> BSpline:
        return self._spline if d == 0 else self._spline.derivative(d)

    def to_dict(self) -> dict:
        return {"order": self.order, "breakpoints": list(self.breakpoints), "domain": list(self.domain)}

    @classmethod
    def from_dict(cls, data: dict) -> "BasisSystem":
        return cls(int(data["order"]), tuple(data["breakpoints"]), tuple(data.get("domain", (0.0, 1.0))))


@dataclass(frozen=True)
class GramMatrices:
    """Inner-product matrix ``W`` and order-``d`` roughness matrix ``R``."""

    W: np.ndarray
    R: np.ndarray
    d: int = 2
    basis: BasisSystem | None = field(default=None, compare=False)
    R_factor: np.ndarray | None = field(default=None, compare=False, repr=False)

    @cached_property
    def penalty_factor(self) -> np.ndarray:
        """A matrix ``F`` with ``F.T @ F == R``.

        The quadrature factor keeps the null space of ``R`` (polynomials of
        degree < d) exact; without it the ``d`` smallest eigenvalues are zeroed.
        """
        if self.R_factor is not None:
            return self.R_factor
        vals, vecs = np.linalg.eigh(self.R)
        vals[: self.d] = 0.0
        return np.sqrt(np.clip(vals, 0.0, None))[:, None] * vecs.T

    @cached_property
    def W_sqrt(self) -> np.ndarray:
        return _sym_power(self.W, 0.5)

    @cached_property
    def W_inv_sqrt(self) -> np.ndarray:
        return _sym_power(self.W, -0.5)


def _sym_power(a: np.ndarray, power: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(a)
    vals = np.clip(vals, 0.0, None)
    if power < 0:
        if np.any(vals <= 0):
            raise np.linalg.LinAlgError("matrix is singular; negative power undefined")
    return (vecs * vals**power) @ vecs.T


def build_basis(order: int = 4, n_basis: int = 15, domain: tuple[float, float] = (0.0, 1.0)) -> BasisSystem:
    """Clamped B-spline basis with ``n_basis - order`` equispaced interior breakpoints."""
    if order < 2:
        raise ValueError(f"order must be >= 2, got {order}")
    if n_basis < order:
        raise ValueError(f"n_basis ({n_basis}) must be >= order ({order})")
    lo, hi = domain
    n_interior = n_basis - order
    interior = lo + (hi - lo) * np.arange(1, n_interior + 1) / (n_interior + 1)
    return BasisSystem(order, tuple(interior), (lo, hi))


def eval_basis(basis: BasisSystem, grid, deriv: int = 0) -> np.ndarray:
    """Evaluate every basis function (or its ``deriv``-th derivative) on ``grid``.

    Returns an array of shape ``(len(grid), n_basis)``.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    lo, hi = basis.domain
    span = hi - lo
    if np.any(grid < lo - _DOMAIN_TOL * span) or np.any(grid > hi + _DOMAIN_TOL * span):
        raise ValueError(f"grid points must lie in [{lo}, {hi}]")
    grid = np.clip(grid, lo, hi)
    out = basis._derivative(deriv)(grid)
    # extrapolate=False leaves NaN exactly at the right endpoint for some scipy builds
    if np.isnan(out).any():
        bad = np.isnan(out).any(axis=1)
        nudged = np.where(grid[bad] >= hi, np.nextafter(hi, lo), grid[bad])
        out[bad] = basis._derivative(deriv)(nudged)
    return out


def gauss_nodes(basis: BasisSystem, n_per_span: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights, ``n_per_span`` per knot span."""
    x, w = np.polynomial.legendre.leggauss(n_per_span)
    a, b = basis.spans[:-1], basis.spans[1:]
    half = (b - a)[:, None] / 2.0
    nodes = (a[:, None] + half * (x[None, :] + 1.0)).ravel()
    weights = (half * w[None, :]).ravel()
    return nodes, weights


def gram_matrices(basis: BasisSystem, d: int = 2) -> GramMatrices:
    """Exact ``W[k1, k2] = <phi_k1, phi_k2>`` and ``R = <phi_k1^(d), phi_k2^(d)>``.

    Integration is composite Gauss-Legendre with ``order + d`` nodes per span,
    which is exact for the piecewise-polynomial integrands.
    """
    if d < 0 or d >= basis.order:
        raise ValueError(f"derivative order d={d} must satisfy 0 <= d < order={basis.order}")
    nodes, weights = gauss_nodes(basis, basis.order + d)
    phi = eval_basis(basis, nodes)
    dphi = eval_basis(basis, nodes, deriv=d) if d else phi
    W = (phi * weights[:, None]).T @ phi
    R = (dphi * weights[:, None]).T @ dphi
    W = 0.5 * (W + W.T)
    R = 0.5 * (R + R.T)
    return GramMatrices(W=W, R=R, d=d, basis=basis, R_factor=np.sqrt(weights)[:, None] * dphi)


def _coefs(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(getattr(x, "coefs", x), dtype=float))


def inner_product(a, b, grams: GramMatrices) -> float:
    """Functional inner product ``sum_j <a_j, b_j>`` of two multivariate profiles.

    ``a`` and ``b`` are coefficient matrices of shape ``(p, K)`` (or objects
    exposing ``.coefs``).
    """
    ca, cb = _coefs(a), _coefs(b)
    if ca.shape != cb.shape:
        raise ValueError(f"shape mismatch: {ca.shape} vs {cb.shape}")
    if ca.shape[-1] != grams.W.shape[0]:
        raise ValueError(f"coefficient length {ca.shape[-1]} does not match basis size {grams.W.shape[0]}")
    return float(np.einsum("jk,kl,jl->", ca, grams.W, cb))


def block_gram(W: np.ndarray, p: int) -> np.ndarray:
    """Block-diagonal ``diag(W, ..., W)`` for ``p`` channels."""
    return np.kron(np.eye(p), W)
