"""Chart statistics: MFEWMA, adaptive MFEWMA, Hotelling-type V^2 and Shewhart T^2.

All recursions operate on coefficient arrays with arbitrary leading batch
dimensions, ``(..., p, K)``, so many monitored sequences advance together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from amfewma.basis import BasisSystem, eval_basis
from amfewma.mfpca import MFPCAModel

DEFAULT_GRID_SIZE = 100
_RHO_RTOL = 1e-12
VARIANTS = ("eta1", "eta2")
KINDS = ("shewhart", "mfewma", "amfewma")


def eta1(e, c, lam):
    """Huber-type score: ``lam*e`` inside ``[-c, c]``, ``e -/+ (1-lam) c`` outside."""
    e = np.asarray(e, dtype=float)
    c = np.asarray(c, dtype=float)
    out = np.where(e > c, e - (1.0 - lam) * c, np.where(e < -c, e + (1.0 - lam) * c, lam * e))
    return out if out.ndim else float(out)


def eta2(e, c, lam):
    """Biweight-type score, smooth at ``|e| = c`` and equal to ``e`` beyond it."""
    e = np.asarray(e, dtype=float)
    c = np.asarray(c, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(c > 0, e / c, np.inf)
    inner = e * (1.0 - (1.0 - lam) * (1.0 - r**2) ** 2)
    out = np.where(np.abs(e) <= c, inner, e)
    return out if out.ndim else float(out)


_SCORES = {"eta1": eta1, "eta2": eta2}


def score_function(variant: str):
    try:
        return _SCORES[variant]
    except KeyError:
        raise ValueError(f"unknown score function {variant!r}; choose from {VARIANTS}") from None


def adaptive_weight(e, c, lam, variant: str = "eta1"):
    """Effective smoothing weight ``eta(e)/e``, with the limit ``lam`` at ``e = 0``."""
    e = np.asarray(e, dtype=float)
    eta = score_function(variant)(e, c, lam)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(e == 0, lam, eta / np.where(e == 0, 1.0, e))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ScoreParams:
    """Adaptive-chart parameters; ``sigma`` is the ``(p, K)`` coefficient matrix of the pointwise sd."""

    lam: float
    k: float
    sigma: np.ndarray
    variant: str = "eta1"

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise ValueError(f"lambda must be in (0, 1], got {self.lam}")
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")
        score_function(self.variant)
        object.__setattr__(self, "sigma", np.atleast_2d(np.asarray(self.sigma, dtype=float)))

    def to_dict(self) -> dict:
        return {"lam": self.lam, "k": self.k, "variant": self.variant, "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "ScoreParams":
        return cls(float(data["lam"]), float(data["k"]), np.asarray(data["sigma"]), data.get("variant", "eta1"))


@dataclass
class ChartState:
    """Current chart statistic ``Y`` (``(..., p, K)`` coefficients) after ``n`` observations."""

    Y: np.ndarray
    n: int = 0
    grid_size: int = DEFAULT_GRID_SIZE

    @classmethod
    def start(cls, p: int, K: int, batch: tuple[int, ...] = (), grid_size: int = DEFAULT_GRID_SIZE) -> "ChartState":
        return cls(np.zeros(batch + (p, K)), 0, grid_size)


@dataclass(frozen=True)
class GridProjector:
    """Evaluation on an equispaced grid and least-squares re-projection onto the basis."""

    grid: np.ndarray
    phi: np.ndarray
    pinv: np.ndarray

    def values(self, coefs: np.ndarray) -> np.ndarray:
        return coefs @ self.phi.T

    def coefs(self, values: np.ndarray) -> np.ndarray:
        return values @ self.pinv.T


@lru_cache(maxsize=32)
def grid_projector(basis: BasisSystem, grid_size: int = DEFAULT_GRID_SIZE) -> GridProjector:
    lo, hi = basis.domain
    grid = np.linspace(lo, hi, grid_size)
    phi = eval_basis(basis, grid)
    if grid_size < basis.n_basis:
        raise ValueError(f"evaluation grid ({grid_size}) must have at least K={basis.n_basis} points")
    return GridProjector(grid, phi, np.linalg.pinv(phi))


def mfewma_update(Y: np.ndarray, X: np.ndarray, lam) -> np.ndarray:
    """``(I - Lambda) Y + Lambda X`` in coefficient space; ``lam`` scalar or per-channel."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0) or np.any(lam > 1):
        raise ValueError("MFEWMA weights must lie in (0, 1]")
    if lam.ndim:
        lam = lam[:, None]
    return Y + lam * (X - Y)


def amfewma_update(Y: np.ndarray, X: np.ndarray, params: ScoreParams, proj: GridProjector) -> np.ndarray:
    """Pointwise adaptive update on the evaluation grid, re-projected onto the basis."""
    c = params.k * _positive(proj.values(params.sigma))
    E = proj.values(X - Y)
    step = score_function(params.variant)(E, c, params.lam)
    return Y + proj.coefs(step)


def _positive(sd: np.ndarray) -> np.ndarray:
    floor = 1e-12 * max(float(np.max(np.abs(sd))), 1e-300)
    return np.maximum(sd, floor)


def mfewma_step(state: ChartState, x, lam) -> ChartState:
    x = np.asarray(getattr(x, "coefs", x), dtype=float)
    if x.shape[-2:] != state.Y.shape[-2:]:
        raise ValueError("observation and chart state have different shapes")
    return ChartState(mfewma_update(state.Y, x, lam), state.n + 1, state.grid_size)


def amfewma_step(state: ChartState, x, params: ScoreParams, basis: BasisSystem) -> ChartState:
    x = np.asarray(getattr(x, "coefs", x), dtype=float)
    if x.shape[-2:] != state.Y.shape[-2:] or x.shape[-1] != basis.n_basis:
        raise ValueError("observation, chart state and basis dimensions disagree")
    if params.sigma.shape != x.shape[-2:]:
        raise ValueError("sigma profile shape does not match the observations")
    proj = grid_projector(basis, state.grid_size)
    return ChartState(amfewma_update(state.Y, x, params, proj), state.n + 1, state.grid_size)


def _active(model: MFPCAModel) -> int:
    rho = model.eigenvalues[: model.n_components]
    if rho.size == 0 or rho[0] <= 0:
        raise ValueError("degenerate covariance: all retained eigenvalues are negligible")
    return int(np.sum(rho > _RHO_RTOL * rho[0]))


def hotelling(model: MFPCAModel, coefs, center: bool) -> np.ndarray:
    """``sum_l xi_l^2 / rho_l`` over retained, non-negligible components."""
    n = _active(model)
    xi = model.scores(np.asarray(getattr(coefs, "coefs", coefs), dtype=float), n=n, center=center)
    return (xi**2 / model.eigenvalues[:n]).sum(axis=-1)


def v2(model: MFPCAModel, y) -> np.ndarray | float:
    """Functional Hotelling statistic of a chart statistic ``y`` (target = zero function)."""
    out = hotelling(model, y, center=False)
    return float(out) if np.ndim(out) == 0 else out


def shewhart_t2(model: MFPCAModel, x) -> np.ndarray | float:
    """Hotelling T^2 of an observation on the Phase-I MFPCA (centered at its mean)."""
    out = hotelling(model, x, center=True)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Chart:
    """A monitoring scheme: recursion ``kind`` plus the model of its statistic.

    ``kind`` is ``shewhart`` (statistic = observation), ``mfewma`` (uses
    ``lam``) or ``amfewma`` (uses ``params``). ``model`` is the MFPCA used
    for the quadratic form.
    """

    kind: str
    model: MFPCAModel
    lam: float = 1.0
    params: ScoreParams | None = None
    grid_size: int = DEFAULT_GRID_SIZE
    name: str = field(default="")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown chart kind {self.kind!r}")
        if self.kind == "amfewma" and self.params is None:
            raise ValueError("amfewma chart needs ScoreParams")
        if self.kind == "amfewma":
            object.__setattr__(self, "lam", self.params.lam)
        if not self.name:
            object.__setattr__(self, "name", default_name(self.kind, self.lam, self.params))

    @property
    def basis(self) -> BasisSystem:
        return self.model.basis

    def start(self, batch: tuple[int, ...] = ()) -> np.ndarray:
        return np.zeros(batch + self.model.mean.shape)

    def update(self, Y: np.ndarray, X: np.ndarray) -> np.ndarray:
        if self.kind == "shewhart":
            return np.array(X, dtype=float, copy=True)
        if self.kind == "mfewma":
            return mfewma_update(Y, X, self.lam)
        return amfewma_update(Y, X, self.params, grid_projector(self.basis, self.grid_size))

    def statistic(self, Y: np.ndarray) -> np.ndarray:
        return hotelling(self.model, Y, center=self.kind == "shewhart")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "name": self.name,
            "lam": self.lam,
            "params": self.params.to_dict() if self.params is not None else None,
            "grid_size": self.grid_size,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Chart":
        params = ScoreParams.from_dict(data["params"]) if data.get("params") else None
        return cls(data["kind"], MFPCAModel.from_dict(data["model"]), float(data.get("lam", 1.0)), params,
                   int(data.get("grid_size", DEFAULT_GRID_SIZE)), data.get("name", ""))


def default_name(kind: str, lam: float, params: ScoreParams | None) -> str:
    if kind == "shewhart":
        return "SHEWHART"
    if kind == "mfewma":
        return f"MFEWMA(lam={lam:g})"
    return f"AMFEWMA(lam={params.lam:g},k={params.k:g})"
