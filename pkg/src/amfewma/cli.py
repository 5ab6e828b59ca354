"""Command-line interface: ``amfewma <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from amfewma.basis import BasisSystem, build_basis, gram_matrices
from amfewma.charts import DEFAULT_GRID_SIZE
from amfewma.design import (
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
from amfewma.experiment import ExperimentConfig, ResultTable, rmi_rows, run_experiment
from amfewma.io import IngestError, ingest, read_json, write_json, write_profiles, write_rows
from amfewma.mfpca import MFPCAModel, fit_mfpca
from amfewma.simulate import build_generator, contamination, scenario_table
from amfewma.smoothing import DEFAULT_LAMBDA_GRID, Smoother

log = logging.getLogger("amfewma")

PHASE1_DEFAULTS = {
    "order": 4,
    "n_basis": 15,
    "variance_threshold": 0.9,
    "standardize": False,
    "train_fraction": 250 / 600,
    "lambda_grid": DEFAULT_LAMBDA_GRID.tolist(),
}


class CliError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise CliError(f"{path}: config must be a JSON object")
    return data


def _smooth_report(report, basis: BasisSystem, lambda_grid) -> np.ndarray:
    values = report.values()
    smoother = Smoother(basis, gram_matrices(basis), report.t, np.asarray(lambda_grid))
    flat = values.reshape(-1, values.shape[-1])
    return smoother.fit(flat)[0].reshape(values.shape[:2] + (basis.n_basis,))


# --------------------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    spec = scenario_table(args.scenario, args.sl)
    gen = build_generator(p=args.p, as_printed=args.as_printed)
    values = gen.draw(args.n, np.random.default_rng(args.seed), spec)
    out = Path(args.out)
    n_rows = write_profiles(out, values, gen.obs_t)
    write_json(out.with_suffix(out.suffix + ".json"), {"kind": "simulation", "scenario": spec.to_dict(),
                                                       "n_units": args.n, "p": args.p, "n_rows": n_rows,
                                                       "as_printed": args.as_printed}, seed=args.seed)
    print(f"wrote {n_rows} rows to {out}")
    return 0


def cmd_fit_phase1(args) -> int:
    cfg = {**PHASE1_DEFAULTS, **_load_config(args.config)}
    unknown = set(cfg) - set(PHASE1_DEFAULTS)
    if unknown:
        raise CliError(f"unknown phase-1 config keys: {sorted(unknown)}")
    report = ingest(args.data)
    basis = build_basis(int(cfg["order"]), int(cfg["n_basis"]))
    grams = gram_matrices(basis)
    coefs = _smooth_report(report, basis, cfg["lambda_grid"])
    N = coefs.shape[0]
    n_train = int(round(N * float(cfg["train_fraction"])))
    if not 2 <= n_train <= N - 1:
        raise CliError(f"train fraction leaves {n_train} training units out of {N}")
    perm = np.random.default_rng(args.seed).permutation(N)
    train = np.sort(perm[:n_train])
    model = fit_mfpca(coefs[train], grams, float(cfg["variance_threshold"]), bool(cfg["standardize"]), basis)
    write_json(args.out, {
        "kind": "phase1",
        "config": cfg,
        "unit_ids": [u[0].unit_id for u in report.profiles],
        "t": report.t.tolist(),
        "coefs": coefs.tolist(),
        "train": train.tolist(),
        "tune": np.sort(perm[n_train:]).tolist(),
        "model": model.to_dict(),
    }, seed=args.seed)
    print(f"Phase I: {N} units, p={coefs.shape[1]}, K={basis.n_basis}, L={model.n_components}; wrote {args.out}")
    return 0


def _phase1_parts(doc):
    model = MFPCAModel.from_dict(doc["model"])
    coefs = np.asarray(doc["coefs"], dtype=float) - model.mean
    return model, coefs[doc["train"]], coefs[doc["tune"]], coefs


def cmd_design_chart(args) -> int:
    doc = read_json(args.model)
    if doc.get("kind") != "phase1":
        raise CliError(f"{args.model} is not a Phase I artifact")
    model, train, tune, centered = _phase1_parts(doc)
    grams = gram_matrices(model.basis)
    ss = np.random.SeedSequence(args.seed)
    s_build, s_cal, s_shift, s_opt = ss.spawn(4)
    if args.optimize:
        small, large = default_shifts(centered, model.basis, args.n_boot, s_shift, grid_size=args.grid_size)
        design, report = optimize_theta(train, tune, grams, small, large, args.arl0, args.epsilon,
                                        variant=args.variant, n_seq=args.n_seq, n_obs=args.n_obs,
                                        burn_in=args.burn_in, grid_size=args.grid_size, seed=s_opt)
        extra = {"optimization": report.to_dict()}
    else:
        if args.chart == "amfewma" and args.k is None:
            raise CliError("--k is required for an amfewma chart")
        chart = build_chart(args.chart, train, grams, lam=args.lam, k=args.k, variant=args.variant,
                            sigma=sigma_profile(train, model.basis, args.grid_size),
                            variance_threshold=model.variance_threshold, n_seq=args.n_seq, n_obs=args.n_obs,
                            burn_in=args.burn_in, grid_size=args.grid_size, seed=s_build)
        design = calibrate_h(chart, tune, args.arl0, args.n_seq, args.n_obs, s_cal)
        extra = {}
    meta = {**design.metadata, **extra, "phase1_mean": model.mean.tolist(),
            "lambda_grid": doc["config"]["lambda_grid"], "seed": args.seed}
    design = ChartDesign(design.chart, design.h, design.arl0, design.achieved_arl, meta)
    write_json(args.out, {k: v for k, v in design.to_dict().items() if k != "format_version"}, seed=args.seed)
    print(f"{design.chart.name}: h={design.h:.6g}, IC ARL={design.achieved_arl:.3f}; wrote {args.out}")
    return 0


def _load_design(path) -> ChartDesign:
    doc = read_json(path)
    if doc.get("kind") != "chart_design":
        raise CliError(f"{path} is not a chart design")
    return ChartDesign.from_dict(doc)


def _centered_stream(design: ChartDesign, path) -> tuple[list[str], np.ndarray]:
    report = ingest(path)
    coefs = _smooth_report(report, design.chart.basis, design.metadata.get("lambda_grid", DEFAULT_LAMBDA_GRID))
    mean = np.asarray(design.metadata.get("phase1_mean", np.zeros(coefs.shape[1:])))
    if mean.shape != coefs.shape[1:]:
        raise CliError(f"stream has shape {coefs.shape[1:]} per unit, design expects {mean.shape}")
    return [u[0].unit_id for u in report.profiles], coefs - mean


def cmd_monitor(args) -> int:
    design = _load_design(args.design)
    ids, X = _centered_stream(design, args.data)
    chart = design.chart
    Y = chart.start()
    rows = []
    for i, (uid, x) in enumerate(zip(ids, X), start=1):
        Y = chart.update(Y, x)
        stat = float(chart.statistic(Y))
        alarm = stat > design.h
        rows.append({"index": i, "unit_id": uid, "statistic": repr(stat), "limit": repr(design.h),
                     "alarm": int(alarm)})
        if alarm and args.reset:
            Y = chart.start()
    write_rows(args.out, rows, ["index", "unit_id", "statistic", "limit", "alarm"])
    n_alarm = sum(r["alarm"] for r in rows)
    print(f"{len(rows)} observations, {n_alarm} alarms (rate {n_alarm / max(len(rows), 1):.4f}); wrote {args.out}")
    return 0


def cmd_evaluate_arl(args) -> int:
    design = _load_design(args.design)
    chart = design.chart
    ss = np.random.SeedSequence(args.seed)
    n0 = args.shift_location
    length = n0 - 1 + args.horizon
    if args.pool is not None:
        _, pool = _centered_stream(design, args.pool)
        seqs = bootstrap_sequences(pool, args.n_seq, length, ss)
        source = {"pool": str(args.pool)}
    else:
        basis = chart.basis
        gen = build_generator(p=chart.model.p, as_printed=args.as_printed)
        spec = scenario_table(args.scenario, args.sl)
        grams = gram_matrices(basis)
        grid = np.asarray(design.metadata.get("lambda_grid", DEFAULT_LAMBDA_GRID))
        smoother = Smoother(basis, grams, gen.obs_t, grid)
        curve = contamination(gen.obs_t, spec, args.as_printed)
        raw = np.stack([gen.draw(length, np.random.default_rng(c)) for c in ss.spawn(args.n_seq)])
        raw[:, n0 - 1:] += curve
        flat = raw.reshape(-1, raw.shape[-1])
        coefs = smoother.fit(flat)[0].reshape(raw.shape[:-1] + (basis.n_basis,))
        mean = np.asarray(design.metadata.get("phase1_mean", np.zeros(coefs.shape[2:])))
        seqs = ArraySequences(coefs - mean)
        source = {"scenario": spec.to_dict()}
    shift = ShiftSpec(n0=n0) if (args.pool is None and args.sl > 0) else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        stats = estimate_arl(chart, design.h, seqs, shift)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_json(args.out, {**{k: v for k, v in stats.to_dict().items() if k != "format_version"},
                          "kind": "run_lengths", "chart": chart.name, "h": design.h,
                          "shift_location": n0 if shift else None, **source}, seed=args.seed)
    print(f"{chart.name}: ARL={stats.arl:.3f} (se {stats.se:.3f}); wrote {args.out}")
    return 0


def cmd_run_experiment(args) -> int:
    data = _load_config(args.config)
    data["seed"] = args.seed
    try:
        cfg = ExperimentConfig.from_dict(data)
    except TypeError as exc:
        raise CliError(f"bad experiment config: {exc}") from None
    table = run_experiment(cfg, threads=args.threads, rmi_reduction=args.rmi_reduction)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    table.to_json(prefix.with_suffix(".json"))
    table.to_csv(prefix.with_suffix(".csv"))
    table.rmi_to_csv(prefix.with_name(prefix.stem + "_rmi.csv"))
    print(f"{len(table.rows)} result rows; wrote {prefix.with_suffix('.csv')} and {prefix.with_suffix('.json')}")
    return 0


def cmd_compute_rmi(args) -> int:
    table = ResultTable.from_json(args.table)
    cfg = table.config
    charts = args.charts or ExperimentConfig.from_dict(cfg).default_rmi_charts()
    scenarios = sorted({r["scenario"] for r in table.rows})
    severities = sorted({r["sl"] for r in table.rows})
    rows = rmi_rows(table.rows, charts, scenarios, severities, args.reduction)
    write_rows(args.out, rows, ["chart", "scenario", "rmi"])
    for r in rows:
        print(f"scenario {r['scenario']}  {r['chart']:<24s} {r['rmi']:.4f}")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amfewma", description="Adaptive multivariate functional EWMA charts.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw synthetic profiles to a long-format CSV")
    p.add_argument("--scenario", type=int, choices=(1, 2), default=1)
    p.add_argument("--sl", type=int, choices=range(7), default=0, metavar="{0..6}")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p", type=int, default=5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--as-printed", action="store_true", help="use the literal time-warp intercept")
    p.add_argument("--out", default="profiles.csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-phase1", help="smooth Phase I profiles and fit the MFPCA model")
    p.add_argument("data")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True, help="seed of the train/tune split")
    p.add_argument("--out", default="phase1.json")
    p.set_defaults(func=cmd_fit_phase1)

    p = sub.add_parser("design-chart", help="build and calibrate a chart from a Phase I artifact")
    p.add_argument("model")
    p.add_argument("--chart", choices=("shewhart", "mfewma", "amfewma"), default="amfewma")
    p.add_argument("--lam", type=float, default=0.2)
    p.add_argument("--k", type=float)
    p.add_argument("--variant", choices=("eta1", "eta2"), default="eta1")
    p.add_argument("--optimize", action="store_true", help="choose (lambda, k) by the two-shift criterion")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--n-boot", type=int, default=100)
    p.add_argument("--arl0", type=float, default=20.0)
    p.add_argument("--n-seq", type=int, default=500)
    p.add_argument("--n-obs", type=int, default=300)
    p.add_argument("--burn-in", type=int, default=50)
    p.add_argument("--grid-size", type=int, default=DEFAULT_GRID_SIZE)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default="design.json")
    p.set_defaults(func=cmd_design_chart)

    p = sub.add_parser("monitor", help="run a designed chart over a profile stream")
    p.add_argument("design")
    p.add_argument("data")
    p.add_argument("--reset", action="store_true", help="restart the statistic after each alarm")
    p.add_argument("--out", default="chart.csv")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("evaluate-arl", help="estimate run lengths of a designed chart")
    p.add_argument("design")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scenario", type=int, choices=(1, 2), default=1)
    src.add_argument("--pool", help="CSV of profiles to resample (in control)")
    p.add_argument("--sl", type=int, choices=range(7), default=0, metavar="{0..6}")
    p.add_argument("--n-seq", type=int, default=200)
    p.add_argument("--shift-location", type=int, default=100)
    p.add_argument("--horizon", type=int, default=100)
    p.add_argument("--as-printed", action="store_true")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default="arl.json")
    p.set_defaults(func=cmd_evaluate_arl)

    p = sub.add_parser("run-experiment", help="run the simulation study")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--threads", type=int, default=1, help="worker processes (0 = auto)")
    p.add_argument("--rmi-reduction", choices=("mean", "sum"), default="mean")
    p.add_argument("--out", default="results")
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("compute-rmi", help="RMI of the charts in a result table")
    p.add_argument("table")
    p.add_argument("--charts", nargs="+")
    p.add_argument("--reduction", choices=("mean", "sum"), default="mean")
    p.add_argument("--out", default="rmi.csv")
    p.set_defaults(func=cmd_compute_rmi)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "threads", 1) < 0:
        parser.error("--threads must be >= 0")
    try:
        return args.func(args)
    except (CliError, IngestError, ValueError, KeyError, OSError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
