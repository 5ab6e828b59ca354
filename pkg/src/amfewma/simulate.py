"""Synthetic multivariate DRC-like profiles with splash-weld and peak-shift contaminations."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import gamma

from amfewma.smoothing import DiscreteProfile

# Contamination sizes per severity level 0..6.
SCENARIO_TABLE = {
    1: (0.0, 0.0019, 0.0038, 0.0056, 0.0075, 0.0094, 0.0112),
    2: (0.0, 0.025, 0.050, 0.075, 0.100, 0.125, 0.150),
}


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: int = 1
    severity: int = 0
    M_E: float = 0.0
    M_P: float = 0.0

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise ValueError(f"scenario must be 1 or 2, got {self.scenario}")
        if self.scenario == 1 and self.M_P != 0:
            raise ValueError("scenario 1 has no phase-shift contamination (M_P must be 0)")
        if self.scenario == 2 and self.M_E != 0:
            raise ValueError("scenario 2 has no expulsion contamination (M_E must be 0)")
        if self.severity == 0 and (self.M_E or self.M_P):
            raise ValueError("severity level 0 is in control; contamination sizes must be 0")

    @property
    def B_E(self) -> int:
        return int(self.scenario == 1)

    @property
    def B_P(self) -> int:
        return int(self.scenario == 2)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "severity": self.severity, "M_E": self.M_E, "M_P": self.M_P,
                "B_E": self.B_E, "B_P": self.B_P}


def scenario_table(scenario: int, severity: int) -> ScenarioSpec:
    if scenario not in SCENARIO_TABLE:
        raise ValueError(f"scenario must be 1 or 2, got {scenario}")
    if not 0 <= severity <= 6:
        raise ValueError(f"severity level must be in 0..6, got {severity}")
    size = SCENARIO_TABLE[scenario][severity]
    if scenario == 1:
        return ScenarioSpec(1, severity, M_E=size, M_P=0.0)
    return ScenarioSpec(2, severity, M_E=0.0, M_P=size)


def bessel_corr(z, rho: float = 0.125, nu: float = 0.0, tol: float = 1e-16):
    """Bessel correlation ``J_nu(|z|/rho)`` summed from its power series."""
    x = np.abs(np.asarray(z, dtype=float)) / rho
    q = -(x**2) / 4.0
    term = np.full_like(x, 1.0 / gamma(nu + 1.0))
    total = term.copy()
    j = 0
    while True:
        j += 1
        term = term * q / (j * (nu + j))
        total = total + term
        # stop once past the peak term and every term is negligible
        if j > 2 and np.all(np.abs(term) < tol):
            break
        if j > 500:
            raise RuntimeError("Bessel series failed to converge")
    if nu:
        total = total * (x / 2.0) ** nu
    return total if total.ndim else float(total)


def mean_m(t):
    """Mean DRC-like curve."""
    t = np.asarray(t, dtype=float)
    out = (
        0.2074
        + 0.3117 * np.exp(-371.4 * t)
        + 0.5284 * (1.0 - np.exp(0.8217 * t))
        - 423.3 * (1.0 + np.tanh(-26.15 * (t + 0.1715)))
    )
    return out if out.ndim else float(out)


def contamination_CE(t, M_E: float):
    """Expulsion (splash-weld) drop: zero up to t=0.5, then linear down to -M_E at t=1."""
    t = np.asarray(t, dtype=float)
    out = np.minimum(0.0, -2.0 * M_E * (t - 0.5))
    return out if out.ndim else float(out)


def time_warp(t, M_P: float, as_printed: bool = False):
    """Piecewise-linear warp delaying the peak by ``M_P``.

    The middle piece defaults to the continuous form pinned at ``h(0.05)=0.05``
    and ``h(0.6)=0.6-M_P``; ``as_printed=True`` uses the literal
    intercept, which is discontinuous at both ends of the piece.
    """
    t = np.asarray(t, dtype=float)
    a = (0.55 - M_P) / 0.55
    b = (0.4 + M_P) / 0.4
    if as_printed:
        middle = a * t - (1.0 + a) * 0.05
    else:
        middle = 0.05 + a * (t - 0.05)
    out = np.where(t <= 0.05, t, np.where(t <= 0.6, middle, b * t + 1.0 - b))
    return out if out.ndim else float(out)


def contamination_CP(t, M_P: float, as_printed: bool = False):
    """Peak-time phase shift ``m(h(t)) - m(t) - (M_P/20) t``."""
    t = np.asarray(t, dtype=float)
    if M_P == 0 and not as_printed:
        # identity warp; skip the rounding of m(h(t)) - m(t)
        return np.zeros_like(t) if t.ndim else 0.0
    out = mean_m(time_warp(t, M_P, as_printed)) - mean_m(t) - (M_P / 20.0) * t
    return out if np.ndim(out) else float(out)


def contamination(t, spec: ScenarioSpec, as_printed: bool = False) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    if spec.B_E:
        out = out + contamination_CE(t, spec.M_E)
    if spec.B_P:
        out = out + contamination_CP(t, spec.M_P, as_printed)
    return out


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    w = np.zeros_like(grid)
    dx = np.diff(grid)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return w


@dataclass(frozen=True)
class GeneratorModel:
    """Spectral model of the cross-correlated Gaussian process ``Z``.

    ``eigenfunctions`` has shape ``(L*, p, n_grid)`` on ``grid`` and is
    orthonormal under the trapezoid inner product summed over channels.
    """

    p: int
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    grid: np.ndarray
    weights: np.ndarray
    channel_corr: np.ndarray
    rho: float = 0.125
    nu: float = 0.0
    sigma: float = 0.002
    sigma_e: float = 0.005
    n_points: int = 25
    as_printed: bool = False

    @property
    def n_components(self) -> int:
        return self.eigenvalues.size

    @property
    def obs_t(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_points)

    def eigenfunctions_at(self, t) -> np.ndarray:
        """Nystrom extension of the eigenfunctions to arbitrary points, ``(L*, p, len(t))``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        kern = bessel_corr(t[:, None] - self.grid[None, :], self.rho, self.nu) * self.weights[None, :]
        # integral of G_lj(t, s) psi_ij(s) ds, summed over j
        k_psi = np.einsum("ts,ijs->ijt", kern, self.eigenfunctions)
        mixed = np.einsum("lj,ijt->ilt", self.channel_corr, k_psi)
        return mixed / self.eigenvalues[:, None, None]

    @cached_property
    def _psi_obs(self) -> np.ndarray:
        return self.eigenfunctions_at(self.obs_t)

    def draw(self, n: int, rng: np.random.Generator, spec: ScenarioSpec | None = None) -> np.ndarray:
        """Draw ``n`` units observed on ``obs_t``; returns ``(n, p, n_points)`` values."""
        spec = spec or ScenarioSpec()
        t = self.obs_t
        xi = rng.standard_normal((n, self.n_components)) * np.sqrt(self.eigenvalues)
        noise = rng.standard_normal((n, self.p, t.size)) * self.sigma_e
        Z = np.einsum("ni,ijt->njt", xi, self._psi_obs)
        base = mean_m(t) + contamination(t, spec, self.as_printed)
        return base[None, None, :] + self.sigma * Z + noise


def build_generator(
    p: int = 5,
    n_components: int = 10,
    grid_size: int = 200,
    rho: float = 0.125,
    nu: float = 0.0,
    sigma: float = 0.002,
    sigma_e: float = 0.005,
    n_points: int = 25,
    as_printed: bool = False,
) -> GeneratorModel:
    """Spectral decomposition of the Bessel-kernel cross-correlation operator.

    1. eigendecompose the common diagonal kernel ``G_ll``;
    2. build ``G_lj = sum_k eta_k / (1 + |l-j|) theta_k theta_k'``;
    3. eigendecompose the stacked operator and keep ``n_components`` pairs.
    """
    if grid_size < 2 * n_components:
        raise ValueError("grid_size must be at least twice n_components")
    grid = np.linspace(0.0, 1.0, grid_size)
    w = trapezoid_weights(grid)
    sw = np.sqrt(w)
    G0 = bessel_corr(grid[:, None] - grid[None, :], rho, nu)
    eta, v = np.linalg.eigh(sw[:, None] * G0 * sw[None, :])
    if eta.min() < -1e-8:
        raise np.linalg.LinAlgError(f"Bessel kernel is not PSD (min eigenvalue {eta.min():.3g})")
    eta = np.clip(eta, 0.0, None)
    theta = v / sw[:, None]

    idx = np.arange(p)
    A = 1.0 / (1.0 + np.abs(idx[:, None] - idx[None, :]))
    mercer = (theta * eta) @ theta.T
    G = np.kron(A, mercer)

    SW = np.tile(sw, p)
    lam, U = np.linalg.eigh(SW[:, None] * G * SW[None, :])
    if lam.min() < -1e-8:
        raise np.linalg.LinAlgError(f"assembled correlation operator is not PSD (min eigenvalue {lam.min():.3g})")
    order = np.argsort(lam)[::-1][:n_components]
    lam = lam[order]
    psi = (U[:, order] / SW[:, None]).T.reshape(n_components, p, grid_size)
    return GeneratorModel(
        p=p, eigenvalues=lam, eigenfunctions=psi, grid=grid, weights=w, channel_corr=A,
        rho=rho, nu=nu, sigma=sigma, sigma_e=sigma_e, n_points=n_points, as_printed=as_printed,
    )


def draw_unit(model: GeneratorModel, spec: ScenarioSpec, rng: np.random.Generator, unit_id: str = "0"):
    """One unit as ``p`` DiscreteProfiles on the observation grid."""
    values = model.draw(1, rng, spec)[0]
    return [DiscreteProfile(unit_id, j + 1, model.obs_t, values[j]) for j in range(model.p)]


def draw_units(model: GeneratorModel, spec: ScenarioSpec, n: int, seed) -> np.ndarray:
    """``n`` units from one seeded stream; returns ``(n, p, n_points)``."""
    return model.draw(n, np.random.default_rng(seed), spec)
