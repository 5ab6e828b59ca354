"""Phase I design: bootstrap run lengths, control-limit calibration and (lambda, k) optimization."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Iterator, Sequence

import numpy as np

from amfewma.basis import GramMatrices
from amfewma.charts import DEFAULT_GRID_SIZE, Chart, ScoreParams, grid_projector
from amfewma.mfpca import FORMAT_VERSION, fit_mfpca, mfpca_from_covariance

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.1, 0.2, 0.3, 0.5, 0.7, 1.0)
DEFAULT_KS = (1.0, 2.0, 3.0, 4.0, 5.0)
CENSOR_WARN_FRACTION = 0.01


# --------------------------------------------------------------------------- sequences


def as_seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


class ArraySequences:
    """Monitoring sequences held in memory as an ``(n_seq, n_obs, p, K)`` array."""

    def __init__(self, data: np.ndarray):
        self.data = np.asarray(data, dtype=float)
        if self.data.ndim != 4:
            raise ValueError("sequence array must have shape (n_seq, n_obs, p, K)")

    @property
    def n_seq(self) -> int:
        return self.data.shape[0]

    @property
    def n_obs(self) -> int:
        return self.data.shape[1]

    def batch(self, n: int) -> np.ndarray:
        return self.data[:, n]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.data)


class BootstrapSequences:
    """Sequences of profiles resampled i.i.d. with replacement from ``pool``.

    Only the ``(n_seq, n_obs)`` index matrix is stored; sequence ``s`` draws
    its indices from its own substream spawned from ``seed``.
    """

    def __init__(self, pool: np.ndarray, n_seq: int, n_obs: int, seed):
        pool = np.asarray(pool, dtype=float)
        if pool.ndim != 3 or pool.shape[0] == 0:
            raise ValueError("bootstrap pool must be a nonempty (N, p, K) array")
        self.pool = pool
        self.seed = seed
        children = as_seed_sequence(seed).spawn(n_seq)
        self.index = np.stack(
            [np.random.default_rng(c).integers(0, pool.shape[0], size=n_obs) for c in children]
        ) if n_seq else np.zeros((0, n_obs), dtype=int)

    @property
    def n_seq(self) -> int:
        return self.index.shape[0]

    @property
    def n_obs(self) -> int:
        return self.index.shape[1]

    def batch(self, n: int) -> np.ndarray:
        return self.pool[self.index[:, n]]

    def __iter__(self) -> Iterator[np.ndarray]:
        for row in self.index:
            yield self.pool[row]


def bootstrap_sequences(pool, n_seq: int, n_obs: int, seed) -> BootstrapSequences:
    return BootstrapSequences(pool, n_seq, n_obs, seed)


# --------------------------------------------------------------------------- run lengths


@dataclass(frozen=True)
class ShiftSpec:
    """Mean shift ``delta`` (``(p, K)``) or replacement ``sequences`` from observation ``n0`` on."""

    delta: np.ndarray | None = None
    n0: int = 1
    sequences: object | None = None

    def __post_init__(self):
        if self.n0 < 1:
            raise ValueError("shift location n0 must be >= 1")

    def scaled(self, c: float) -> "ShiftSpec":
        return ShiftSpec(None if self.delta is None else c * self.delta, self.n0, self.sequences)


@dataclass(frozen=True)
class RunLengthStats:
    run_lengths: np.ndarray
    censored: np.ndarray
    cap: int

    @property
    def arl(self) -> float:
        return float(self.run_lengths.mean())

    @property
    def se(self) -> float:
        n = self.run_lengths.size
        return float(self.run_lengths.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")

    @property
    def censored_fraction(self) -> float:
        return float(self.censored.mean())

    def quantiles(self, q=(0.1, 0.5, 0.9)) -> np.ndarray:
        return np.quantile(self.run_lengths, q)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "arl": self.arl,
            "se": self.se,
            "n_seq": int(self.run_lengths.size),
            "censored_fraction": self.censored_fraction,
            "cap": self.cap,
            "quantiles": dict(zip(("q10", "q50", "q90"), self.quantiles().tolist())),
            "run_lengths": self.run_lengths.tolist(),
        }


def simulate_statistics(chart: Chart, sequences) -> np.ndarray:
    """Monitoring statistic of every sequence at every step, no resets: ``(n_seq, n_obs)``."""
    Y = chart.start((sequences.n_seq,))
    out = np.empty((sequences.n_seq, sequences.n_obs))
    for n in range(sequences.n_obs):
        Y = chart.update(Y, sequences.batch(n))
        out[:, n] = chart.statistic(Y)
    return out


def first_exceedance(stats: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-start run lengths at limit ``h``; censored sequences get ``n_obs``."""
    over = stats > h
    hit = over.any(axis=1)
    rl = np.where(hit, over.argmax(axis=1) + 1, stats.shape[1])
    return rl, ~hit


def estimate_arl(chart: Chart, h: float, sequences, shift: ShiftSpec | None = None) -> RunLengthStats:
    """Run every sequence until its first alarm at or after the shift location.

    Alarms before ``shift.n0`` reset the statistic to zero and are not
    counted; the run length is measured from ``n0`` (inclusive). Sequences
    without an alarm are censored at ``n_obs - n0 + 1``.
    """
    shift = shift or ShiftSpec()
    n0 = shift.n0
    n_total = sequences.n_obs
    if n0 > n_total:
        raise ValueError(f"shift location {n0} exceeds sequence length {n_total}")
    post = shift.sequences
    if post is not None and (post.n_seq != sequences.n_seq or post.n_obs < n_total - n0 + 1):
        raise ValueError("post-shift sequences do not cover the monitoring horizon")
    S = sequences.n_seq
    cap = n_total - n0 + 1
    rl = np.full(S, cap, dtype=int)
    done = np.zeros(S, dtype=bool)
    Y = chart.start((S,))
    for n in range(n_total):
        i = n + 1
        if i >= n0 and post is not None:
            X = post.batch(i - n0)
        else:
            X = sequences.batch(n)
        if i >= n0 and shift.delta is not None:
            X = X + shift.delta
        live = ~done
        Y[live] = chart.update(Y[live], X[live])
        alarm = np.zeros(S, dtype=bool)
        alarm[live] = chart.statistic(Y[live]) > h
        if i < n0:
            Y[alarm] = 0.0
            continue
        rl[alarm] = i - n0 + 1
        done |= alarm
        if done.all():
            break
    stats = RunLengthStats(rl, ~done, cap)
    if stats.censored_fraction > CENSOR_WARN_FRACTION:
        warnings.warn(
            f"{stats.censored_fraction:.1%} of sequences censored at {cap} observations; ARL is biased low",
            RuntimeWarning,
            stacklevel=2,
        )
    return stats


# --------------------------------------------------------------------------- chart construction


def sigma_profile(pool: np.ndarray, basis, grid_size: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    """Pointwise standard deviation of the pool on the evaluation grid, as ``(p, K)`` coefficients."""
    proj = grid_projector(basis, grid_size)
    values = proj.values(np.asarray(pool, dtype=float))
    return proj.coefs(values.std(axis=0, ddof=1))


def statistic_covariance(chart: Chart, training: np.ndarray, n_seq: int, n_obs: int, burn_in: int, seed):
    """Mean and covariance of the chart statistic pooled over bootstrap runs past ``burn_in``."""
    if n_obs <= burn_in:
        raise ValueError(f"n_obs ({n_obs}) must exceed burn_in ({burn_in})")
    seqs = bootstrap_sequences(training, n_seq, n_obs, seed)
    Y = chart.start((n_seq,))
    d = int(np.prod(Y.shape[1:]))
    total = np.zeros(d)
    outer = np.zeros((d, d))
    count = 0
    for n in range(n_obs):
        Y = chart.update(Y, seqs.batch(n))
        if n >= burn_in:
            flat = Y.reshape(n_seq, d)
            total += flat.sum(axis=0)
            outer += flat.T @ flat
            count += n_seq
    mean = total / count
    cov = (outer - count * np.outer(mean, mean)) / (count - 1)
    return mean.reshape(Y.shape[1:]), cov


def build_chart(
    kind: str,
    training: np.ndarray,
    grams: GramMatrices,
    lam: float = 1.0,
    k: float | None = None,
    variant: str = "eta1",
    sigma: np.ndarray | None = None,
    variance_threshold: float = 0.9,
    n_seq: int = 500,
    n_obs: int = 300,
    burn_in: int = 50,
    grid_size: int = DEFAULT_GRID_SIZE,
    seed=0,
    name: str = "",
) -> Chart:
    """Fit the monitoring model of a chart on the (centered) training sample.

    SHEWHART uses the MFPCA of the raw observations; the EWMA-type charts use
    the MFPCA of their statistic pooled over bootstrap sequences.
    """
    training = np.asarray(training, dtype=float)
    basis = grams.basis
    if kind == "shewhart":
        model = fit_mfpca(training, grams, variance_threshold, basis=basis)
        return Chart("shewhart", model, grid_size=grid_size, name=name)
    placeholder = fit_mfpca(training[:2], grams, 1.0, basis=basis)
    params = None
    if kind == "amfewma":
        if k is None:
            raise ValueError("amfewma chart needs k")
        sig = sigma_profile(training, basis, grid_size) if sigma is None else sigma
        params = ScoreParams(lam, k, sig, variant)
    draft = Chart(kind, placeholder, lam, params, grid_size, name)
    mean, cov = statistic_covariance(draft, training, n_seq, n_obs, burn_in, seed)
    model = mfpca_from_covariance(mean, cov, grams, basis, variance_threshold)
    return Chart(kind, model, lam, params, grid_size, name)


# --------------------------------------------------------------------------- calibration


@dataclass(frozen=True)
class ChartDesign:
    chart: Chart
    h: float
    arl0: float
    achieved_arl: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "chart_design",
            "h": self.h,
            "arl0": self.arl0,
            "achieved_arl": self.achieved_arl,
            "metadata": self.metadata,
            "chart": self.chart.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChartDesign":
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported design format version {data.get('format_version')!r}")
        return cls(Chart.from_dict(data["chart"]), float(data["h"]), float(data["arl0"]),
                   float(data.get("achieved_arl", float("nan"))), dict(data.get("metadata", {})))


def limit_for_arl(stats: np.ndarray, arl0: float) -> tuple[float, float]:
    """Smallest limit ``h`` with zero-start ARL >= ``arl0`` on precomputed statistics.

    The ARL is a nondecreasing step function of ``h`` that only jumps at
    observed statistic values, so bisection over the sorted values is exact.
    """
    values = np.unique(stats[np.isfinite(stats)])
    if values.size == 0:
        raise ValueError("no finite statistics to calibrate on")
    below = values[0] - max(abs(values[0]) * 1e-9, 1e-300)
    candidates = np.concatenate([[below], values])

    def arl_at(h):
        return first_exceedance(stats, h)[0].mean()

    if arl_at(candidates[-1]) < arl0:
        raise ValueError(
            f"ARL0={arl0} is unreachable with sequences of {stats.shape[1]} observations; increase n_obs"
        )
    lo, hi = 0, candidates.size - 1
    if arl_at(candidates[lo]) >= arl0:
        return float(candidates[lo]), float(arl_at(candidates[lo]))
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if arl_at(candidates[mid]) >= arl0:
            hi = mid
        else:
            lo = mid
    return float(candidates[hi]), float(arl_at(candidates[hi]))


def calibrate_h(chart: Chart, tuning: np.ndarray, arl0: float, n_seq: int = 500, n_obs: int = 300, seed=0) -> ChartDesign:
    """Control limit reaching in-control ARL ``arl0`` on bootstrap sequences from the tuning set."""
    if arl0 < 1:
        raise ValueError("ARL0 must be >= 1")
    if n_obs < arl0:
        raise ValueError(f"ARL0={arl0} is unreachable with n_obs={n_obs}; increase n_obs")
    seqs = bootstrap_sequences(tuning, n_seq, n_obs, seed)
    stats = simulate_statistics(chart, seqs)
    h, achieved = limit_for_arl(stats, arl0)
    rl, cens = first_exceedance(stats, h)
    if cens.mean() > CENSOR_WARN_FRACTION:
        warnings.warn(f"{cens.mean():.1%} of calibration sequences censored; consider larger n_obs", RuntimeWarning,
                      stacklevel=2)
    meta = {"n_seq": n_seq, "n_obs": n_obs, "seed": _jsonable_seed(seed), "censored_fraction": float(cens.mean())}
    return ChartDesign(chart, h, arl0, achieved, meta)


def _jsonable_seed(seed):
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    if isinstance(seed, np.random.SeedSequence):
        return {"entropy": _jsonable_seed(seed.entropy), "spawn_key": [int(k) for k in seed.spawn_key]}
    return str(seed)


# --------------------------------------------------------------------------- shifts and optimization


def bootstrap_sd(pool: np.ndarray, basis, n_boot: int = 100, seed=0, grid_size: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    """Bootstrap-averaged pointwise standard deviation on the evaluation grid, ``(p, G)``."""
    pool = np.asarray(pool, dtype=float)
    if pool.ndim != 3 or pool.shape[0] == 0:
        raise ValueError("pool must be a nonempty (N, p, K) array")
    values = grid_projector(basis, grid_size).values(pool)
    rng = np.random.default_rng(seed)
    N = pool.shape[0]
    if N < 2:
        return np.zeros(values.shape[1:])
    sds = np.empty((n_boot,) + values.shape[1:])
    for b in range(n_boot):
        sds[b] = values[rng.integers(0, N, size=N)].std(axis=0, ddof=1)
    return sds.mean(axis=0)


def default_shifts(pool: np.ndarray, basis, n_boot: int = 100, seed=0, scales=(0.5, 2.0),
                   grid_size: int = DEFAULT_GRID_SIZE, n0: int = 1) -> tuple[ShiftSpec, ShiftSpec]:
    """Small and large mean shifts ``c * sigma_hat`` built from the bootstrap sd.

    The pool is taken as centered at the bootstrap mean, so the out-of-control
    mean ``mu_hat + c * sigma_hat`` is a shift of ``c * sigma_hat``, projected
    back onto the basis.
    """
    sd = bootstrap_sd(pool, basis, n_boot, seed, grid_size)
    if not np.any(sd > 0):
        warnings.warn("pool has zero variance; default shifts are zero", RuntimeWarning, stacklevel=2)
    sd_coefs = grid_projector(basis, grid_size).coefs(sd)
    small, large = scales
    return ShiftSpec(small * sd_coefs, n0), ShiftSpec(large * sd_coefs, n0)


@dataclass(frozen=True)
class ThetaResult:
    lam: float
    k: float
    h: float
    arl_ic: float
    arl_small: float
    arl_large: float
    feasible: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def select_theta(rows: Sequence[ThetaResult], epsilon: float) -> tuple[ThetaResult, list[ThetaResult]]:
    """Two-stage selection: best large-shift ARL, then best small-shift ARL within ``(1+eps)`` of it."""
    if not rows:
        raise ValueError("empty candidate grid")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    def key(r, arl):
        return (arl, r.lam, r.k)

    best_large = min(rows, key=lambda r: key(r, r.arl_large))
    bound = (1.0 + epsilon) * best_large.arl_large
    marked = [ThetaResult(**{**r.__dict__, "feasible": r.arl_large <= bound}) for r in rows]
    feasible = [r for r in marked if r.feasible]
    return min(feasible, key=lambda r: key(r, r.arl_small)), marked


@dataclass
class OptimizationReport:
    best: ThetaResult
    table: list[ThetaResult]
    theta_large: ThetaResult
    epsilon: float

    def to_dict(self) -> dict:
        return {"best": self.best.to_dict(), "theta_large": self.theta_large.to_dict(), "epsilon": self.epsilon,
                "table": [r.to_dict() for r in self.table]}


def optimize_theta(
    training: np.ndarray,
    tuning: np.ndarray,
    grams: GramMatrices,
    small: ShiftSpec,
    large: ShiftSpec,
    arl0: float = 20.0,
    epsilon: float = 0.05,
    grid: Iterable[tuple[float, float]] | None = None,
    variant: str = "eta1",
    sigma: np.ndarray | None = None,
    variance_threshold: float = 0.9,
    n_seq: int = 500,
    n_obs: int = 300,
    burn_in: int = 50,
    grid_size: int = DEFAULT_GRID_SIZE,
    seed=0,
) -> tuple[ChartDesign, OptimizationReport]:
    """Choose ``(lambda, k)`` for the adaptive chart by the two-stage ARL criterion.

    Every candidate is calibrated to ``arl0`` on the tuning set; its ARLs at
    the two shifts are estimated on common bootstrap sequences.
    """
    grid = list(product(DEFAULT_LAMBDAS, DEFAULT_KS) if grid is None else grid)
    if small.delta is not None and large.delta is not None:
        W = grams.W
        n_small = np.einsum("jk,kl,jl->", small.delta, W, small.delta)
        n_large = np.einsum("jk,kl,jl->", large.delta, W, large.delta)
        if n_small >= n_large:
            warnings.warn("small shift is not smaller than the large shift", RuntimeWarning, stacklevel=2)
    training = np.asarray(training, dtype=float)
    tuning = np.asarray(tuning, dtype=float)
    sig = sigma_profile(training, grams.basis, grid_size) if sigma is None else sigma
    ss = as_seed_sequence(seed)
    s_cov, s_cal, s_arl = ss.spawn(3)
    oc_len = max(n_obs, small.n0 + n_obs - 1)
    oc_seqs = bootstrap_sequences(tuning, n_seq, oc_len, s_arl)
    rows, designs = [], {}
    for lam, k in grid:
        chart = build_chart("amfewma", training, grams, lam=lam, k=k, variant=variant, sigma=sig,
                            variance_threshold=variance_threshold, n_seq=n_seq, n_obs=n_obs, burn_in=burn_in,
                            grid_size=grid_size, seed=s_cov)
        design = calibrate_h(chart, tuning, arl0, n_seq, n_obs, s_cal)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            a_small = estimate_arl(chart, design.h, oc_seqs, small).arl
            a_large = estimate_arl(chart, design.h, oc_seqs, large).arl
        rows.append(ThetaResult(float(lam), float(k), design.h, design.achieved_arl, a_small, a_large))
        designs[(float(lam), float(k))] = design
        log.info("theta=(%g, %g): h=%.4g ARL0=%.2f ARL(small)=%.3f ARL(large)=%.3f",
                 lam, k, design.h, design.achieved_arl, a_small, a_large)
    best, table = select_theta(rows, epsilon)
    theta_large = min(table, key=lambda r: (r.arl_large, r.lam, r.k))
    chosen = designs[(best.lam, best.k)]
    chart = Chart("amfewma", chosen.chart.model, best.lam, chosen.chart.params, grid_size, "AMFEWMA*")
    design = ChartDesign(chart, chosen.h, arl0, chosen.achieved_arl,
                         {**chosen.metadata, "optimized": True, "lam": best.lam, "k": best.k})
    return design, OptimizationReport(best, table, theta_large, epsilon)
