"""Simulation-study orchestration: Phase I design, Phase II ARLs per scenario and severity, RMI."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from itertools import product
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from amfewma.basis import build_basis, gram_matrices
from amfewma.design import (
    DEFAULT_KS,
    DEFAULT_LAMBDAS,
    ArraySequences,
    ChartDesign,
    ShiftSpec,
    bootstrap_sequences,
    build_chart,
    calibrate_h,
    default_shifts,
    estimate_arl,
    optimize_theta,
    sigma_profile,
)
from amfewma.mfpca import FORMAT_VERSION
from amfewma.simulate import build_generator, contamination, scenario_table
from amfewma.smoothing import DEFAULT_LAMBDA_GRID, Smoother

log = logging.getLogger(__name__)

PAPER_AMFEWMA_GRID = tuple(product((0.1, 0.2, 0.3, 0.5), (2.0, 3.0, 4.0)))


@dataclass
class ExperimentConfig:
    """Simulation-study settings; defaults are the desk-scale replica."""

    seed: int
    scenarios: tuple[int, ...] = (1, 2)
    severities: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6)
    shewhart: bool = True
    mfewma_lams: tuple[float, ...] = (0.1, 0.2, 0.3, 0.5)
    amfewma_grid: tuple[tuple[float, float], ...] = PAPER_AMFEWMA_GRID
    optimize: bool = True
    theta_grid: tuple[tuple[float, float], ...] = tuple(product(DEFAULT_LAMBDAS, DEFAULT_KS))
    epsilon: float = 0.05
    n_boot: int = 100
    shift_scales: tuple[float, float] = (0.5, 2.0)
    variant: str = "eta1"
    phase1_total: int = 600
    n_train: int = 250
    n_tune: int = 350
    n_seq: int = 200
    n_obs: int = 150
    n_phase2_seq: int = 200
    phase2_horizon: int = 100
    shift_location: int = 100
    resample_pool: bool = False
    phase2_pool_size: int = 1000
    n_runs: int = 5
    arl0: float = 20.0
    variance_threshold: float = 0.9
    order: int = 4
    n_basis: int = 15
    lambda_grid: tuple[float, ...] = tuple(DEFAULT_LAMBDA_GRID.tolist())
    grid_size: int = 100
    burn_in: int = 50
    as_printed: bool = False
    rmi_charts: tuple[str, ...] | None = None

    def __post_init__(self):
        self.scenarios = tuple(int(s) for s in self.scenarios)
        self.severities = tuple(int(s) for s in self.severities)
        self.mfewma_lams = tuple(float(x) for x in self.mfewma_lams)
        self.amfewma_grid = tuple((float(a), float(b)) for a, b in self.amfewma_grid)
        self.theta_grid = tuple((float(a), float(b)) for a, b in self.theta_grid)
        self.shift_scales = tuple(float(x) for x in self.shift_scales)
        self.lambda_grid = tuple(float(x) for x in self.lambda_grid)
        if self.rmi_charts is not None:
            self.rmi_charts = tuple(self.rmi_charts)
        if self.n_train + self.n_tune != self.phase1_total:
            raise ValueError(
                f"train ({self.n_train}) + tune ({self.n_tune}) must equal the Phase I total ({self.phase1_total})"
            )
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.shift_location < 1:
            raise ValueError("shift_location must be >= 1")

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def chart_names(self) -> list[str]:
        names = ["SHEWHART"] if self.shewhart else []
        names += [f"MFEWMA(lam={lam:g})" for lam in self.mfewma_lams]
        names += [f"AMFEWMA(lam={lam:g},k={k:g})" for lam, k in self.amfewma_grid]
        if self.optimize:
            names.append("AMFEWMA*")
        return names

    def default_rmi_charts(self) -> list[str]:
        names = self.chart_names()
        if self.rmi_charts is not None:
            return [n for n in self.rmi_charts if n in names]
        return [n for n in names if not n.startswith("AMFEWMA(")]


def compute_rmi(arls: Mapping[str, Sequence[float]], reduction: str = "mean") -> dict[str, float]:
    """Relative mean index of each chart against the per-severity best chart.

    ``arls[chart]`` lists the ARLs at severities 1..S. ``reduction='mean'``
    divides the summed relative deficiencies by S; ``'sum'`` leaves them summed.
    """
    if not arls:
        raise ValueError("no charts given")
    if reduction not in ("mean", "sum"):
        raise ValueError("reduction must be 'mean' or 'sum'")
    lengths = {len(v) for v in arls.values()}
    if len(lengths) != 1:
        raise ValueError("every chart needs an ARL at every severity level")
    table = np.array([list(v) for v in arls.values()], dtype=float)
    if not np.all(np.isfinite(table)):
        missing = [name for name, row in zip(arls, table) if not np.all(np.isfinite(row))]
        raise ValueError(f"missing ARL cells for {missing}")
    best = table.min(axis=0)
    rel = (table - best) / best
    total = rel.sum(axis=1)
    if reduction == "mean":
        total = total / table.shape[1]
    return dict(zip(arls, total.tolist()))


@dataclass
class ResultTable:
    rows: list[dict]
    rmi: list[dict]
    config: dict = field(default_factory=dict)
    designs: list[dict] = field(default_factory=list)

    def cell(self, chart: str, scenario: int, sl: int) -> dict:
        for r in self.rows:
            if r["chart"] == chart and r["scenario"] == scenario and r["sl"] == sl:
                return r
        raise KeyError((chart, scenario, sl))

    def arl(self, chart: str, scenario: int, sl: int) -> float:
        return self.cell(chart, scenario, sl)["arl"]

    def rmi_of(self, chart: str, scenario: int) -> float:
        for r in self.rmi:
            if r["chart"] == chart and r["scenario"] == scenario:
                return r["rmi"]
        raise KeyError((chart, scenario))

    def to_json(self, path) -> None:
        doc = {"format_version": FORMAT_VERSION, "seed": self.config.get("seed"), "config": self.config,
               "rows": self.rows, "rmi": self.rmi, "designs": self.designs}
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def from_json(cls, path) -> "ResultTable":
        doc = json.loads(Path(path).read_text())
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported result format version {doc.get('format_version')!r}")
        return cls(doc["rows"], doc.get("rmi", []), doc.get("config", {}), doc.get("designs", []))

    def to_csv(self, path) -> None:
        cols = ["chart", "scenario", "sl", "arl", "se", "q10", "q50", "q90", "censored_fraction", "n_runs"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.rows)

    def rmi_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["chart", "scenario", "rmi"])
            w.writeheader()
            w.writerows(self.rmi)


def rmi_rows(rows: Sequence[dict], charts: Sequence[str], scenarios: Sequence[int], severities: Sequence[int],
             reduction: str = "mean") -> list[dict]:
    out = []
    oc = [s for s in severities if s >= 1]
    if not oc:
        return out
    index = {(r["chart"], r["scenario"], r["sl"]): r["arl"] for r in rows}
    for sc in scenarios:
        arls = {c: [index.get((c, sc, sl), math.nan) for sl in oc] for c in charts}
        for chart, value in compute_rmi(arls, reduction).items():
            out.append({"chart": chart, "scenario": sc, "rmi": value})
    return out


# --------------------------------------------------------------------------- one run


def _phase2_units(gen, n_seq: int, length: int, ss: np.random.SeedSequence) -> np.ndarray:
    """IC draws for each Phase-II sequence from its own substream: ``(n_seq, length, p, m)``."""
    return np.stack([gen.draw(length, np.random.default_rng(c)) for c in ss.spawn(n_seq)])


def _design_charts(cfg: ExperimentConfig, train, tune, phase1, grams, ss) -> tuple[dict, dict]:
    s_cov, s_cal, s_opt, s_shift = ss.spawn(4)
    common = dict(variance_threshold=cfg.variance_threshold, n_seq=cfg.n_seq, n_obs=cfg.n_obs,
                  burn_in=cfg.burn_in, grid_size=cfg.grid_size, seed=s_cov)
    sigma = sigma_profile(train, grams.basis, cfg.grid_size)
    charts = []
    if cfg.shewhart:
        charts.append(build_chart("shewhart", train, grams, **common))
    for lam in cfg.mfewma_lams:
        charts.append(build_chart("mfewma", train, grams, lam=lam, **common))
    for lam, k in cfg.amfewma_grid:
        charts.append(build_chart("amfewma", train, grams, lam=lam, k=k, variant=cfg.variant, sigma=sigma, **common))
    designs = {c.name: calibrate_h(c, tune, cfg.arl0, cfg.n_seq, cfg.n_obs, s_cal) for c in charts}
    extra = {}
    if cfg.optimize:
        small, large = default_shifts(phase1, grams.basis, cfg.n_boot, s_shift, cfg.shift_scales, cfg.grid_size)
        design, report = optimize_theta(
            train, tune, grams, small, large, cfg.arl0, cfg.epsilon, cfg.theta_grid, cfg.variant, sigma,
            cfg.variance_threshold, cfg.n_seq, cfg.n_obs, cfg.burn_in, cfg.grid_size, s_opt,
        )
        designs[design.chart.name] = design
        extra["optimization"] = report.to_dict()
    return designs, extra


def run_single(cfg: ExperimentConfig, run: int) -> tuple[list[dict], dict]:
    """One simulation run; returns per-cell records and design summaries."""
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(run,))
    s_phase1, s_split, s_design, s_phase2 = ss.spawn(4)
    gen = build_generator(as_printed=cfg.as_printed)
    basis = build_basis(cfg.order, cfg.n_basis)
    grams = gram_matrices(basis)
    smoother = Smoother(basis, grams, gen.obs_t, cfg.lambda_grid)

    def smooth(values):
        flat = values.reshape(-1, values.shape[-1])
        return smoother.fit(flat)[0].reshape(values.shape[:-1] + (basis.n_basis,))

    phase1 = smooth(gen.draw(cfg.phase1_total, np.random.default_rng(s_phase1)))
    perm = np.random.default_rng(s_split).permutation(cfg.phase1_total)
    mu = phase1[perm[: cfg.n_train]].mean(axis=0)
    phase1 = phase1 - mu
    train, tune = phase1[perm[: cfg.n_train]], phase1[perm[cfg.n_train:]]

    designs, extra = _design_charts(cfg, train, tune, phase1, grams, s_design)
    summary = {"run": run, **extra,
               "charts": {name: {"h": d.h, "achieved_arl": d.achieved_arl, "L": d.chart.model.n_components,
                                 "lam": d.chart.lam, "k": d.chart.params.k if d.chart.params else None}
                          for name, d in designs.items()}}

    n0, H, S = cfg.shift_location, cfg.phase2_horizon, cfg.n_phase2_seq
    s_units, s_pre, s_post = s_phase2.spawn(3)
    if cfg.resample_pool:
        pool_raw = gen.draw(cfg.phase2_pool_size, np.random.default_rng(s_units))
        ic = bootstrap_sequences(smooth(pool_raw) - mu, S, n0 - 1 + H, s_pre)
    else:
        raw = _phase2_units(gen, S, n0 - 1 + H, s_units)
        pre = smooth(raw[:, : n0 - 1]) - mu
        post_raw = raw[:, n0 - 1:]

    records = []
    for sc in cfg.scenarios:
        for sl in cfg.severities:
            curve = contamination(gen.obs_t, scenario_table(sc, sl), cfg.as_printed)
            if cfg.resample_pool:
                # same resampling indices at every severity
                post = bootstrap_sequences(smooth(pool_raw + curve) - mu, S, H, s_post)
                shift = ShiftSpec(n0=n0, sequences=post)
                seqs = ic
            else:
                seqs = ArraySequences(np.concatenate([pre, smooth(post_raw + curve) - mu], axis=1))
                shift = ShiftSpec(n0=n0)
            for name, d in designs.items():
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    # in control: zero-state run length counted from the first observation
                    stats = estimate_arl(d.chart, d.h, seqs, None if sl == 0 else shift)
                records.append({"run": run, "chart": name, "scenario": sc, "sl": sl, "arl": stats.arl,
                                "se": stats.se, "censored_fraction": stats.censored_fraction,
                                "run_lengths": stats.run_lengths.tolist()})
            log.info("run %d scenario %d SL %d done", run, sc, sl)
    return records, summary


def aggregate(records: Sequence[dict], cfg: ExperimentConfig) -> list[dict]:
    """Equal-weight average of per-run ARLs; quantiles from the pooled run lengths."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r["chart"], r["scenario"], r["sl"]), []).append(r)
    order = {name: i for i, name in enumerate(cfg.chart_names())}
    rows = []
    for (chart, sc, sl), recs in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][2], order.get(kv[0][0], 99))):
        arls = np.array([r["arl"] for r in recs])
        ses = np.array([r["se"] for r in recs])
        pooled = np.concatenate([r["run_lengths"] for r in recs])
        q10, q50, q90 = np.quantile(pooled, (0.1, 0.5, 0.9))
        rows.append({
            "chart": chart, "scenario": sc, "sl": sl, "arl": float(arls.mean()),
            "se": float(np.sqrt(np.nansum(ses**2)) / len(recs)),
            "q10": float(q10), "q50": float(q50), "q90": float(q90),
            "censored_fraction": float(np.mean([r["censored_fraction"] for r in recs])),
            "n_runs": len(recs), "run_arls": arls.tolist(),
        })
    return rows


def run_experiment(cfg: ExperimentConfig, threads: int = 1, rmi_reduction: str = "mean") -> ResultTable:
    """Run ``cfg.n_runs`` independent simulation runs and summarize them."""
    runs = range(cfg.n_runs)
    if threads == 1 or cfg.n_runs == 1:
        outputs = [_run_with_context(cfg, r) for r in runs]
    else:
        with ProcessPoolExecutor(max_workers=None if threads == 0 else threads) as pool:
            outputs = list(pool.map(_run_with_context, [cfg] * cfg.n_runs, runs))
    records = [rec for recs, _ in outputs for rec in recs]
    rows = aggregate(records, cfg)
    rmi = rmi_rows(rows, cfg.default_rmi_charts(), cfg.scenarios, cfg.severities, rmi_reduction)
    return ResultTable(rows, rmi, cfg.to_dict(), [summary for _, summary in outputs])


def _run_with_context(cfg: ExperimentConfig, run: int):
    try:
        return run_single(cfg, run)
    except Exception as exc:
        raise RuntimeError(f"simulation run {run} failed: {exc}") from exc
