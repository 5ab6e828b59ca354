"""End-to-end tests of the command-line interface."""

import csv
import json

import numpy as np
import pytest

from amfewma.cli import main
from amfewma.experiment import compute_rmi
from amfewma.io import ingest
from amfewma.simulate import build_generator, scenario_table


pytestmark = pytest.mark.filterwarnings("ignore:.*censored:RuntimeWarning")


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("simulate", "--scenario", 1, "--sl", 0, "--n", 2000, "--seed", 11, "--out", d / "phase1.csv") == 0
    cfg = d / "p1.json"
    cfg.write_text(json.dumps({"train_fraction": 0.4}))
    assert run("fit-phase1", d / "phase1.csv", "--config", cfg, "--seed", 2, "--out", d / "model.json") == 0
    return d


class TestSimulate:
    def test_row_count(self, tmp_path):
        out = tmp_path / "s.csv"
        assert run("simulate", "--scenario", 1, "--sl", 0, "--n", 20, "--seed", 7, "--out", out) == 0
        with open(out) as fh:
            assert sum(1 for _ in fh) == 1 + 20 * 5 * 25
        side = json.loads((tmp_path / "s.csv.json").read_text())
        assert side["seed"] == 7 and side["format_version"] == 1

    def test_round_trip_bit_exact(self, tmp_path):
        out = tmp_path / "s.csv"
        run("simulate", "--scenario", 2, "--sl", 4, "--n", 6, "--seed", 3, "--out", out)
        expected = build_generator().draw(6, np.random.default_rng(3), scenario_table(2, 4))
        np.testing.assert_array_equal(ingest(out).values(), expected)

    def test_seed_required(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("simulate", "--n", 5)
        assert exc.value.code == 2
        assert "--seed" in capsys.readouterr().err

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            run("simulate", "--n", 5, "--seed", 1, "--colour", "red")
        assert exc.value.code == 2

    def test_module_error(self, tmp_path, capsys):
        assert run("fit-phase1", tmp_path / "missing.csv", "--seed", 1) == 1
        err = json.loads(capsys.readouterr().err)
        assert err["command"] == "fit-phase1"


class TestPipeline:
    @pytest.mark.parametrize("chart,extra", [("shewhart", []), ("mfewma", ["--lam", 0.3, "--reset"])])
    def test_monitor_alarm_rate(self, workspace, tmp_path, chart, extra):
        design = tmp_path / "d.json"
        flags = [a for a in extra if a != "--reset"]
        assert run("design-chart", workspace / "model.json", "--chart", chart, *flags, "--seed", 5,
                   "--out", design) == 0
        doc = json.loads(design.read_text())
        assert doc["format_version"] == 1 and doc["seed"] == 5
        stream = tmp_path / "ic.csv"
        run("simulate", "--n", 10_000, "--seed", 99, "--out", stream)
        out = tmp_path / "chart.csv"
        assert run("monitor", design, stream, "--out", out, *(["--reset"] if "--reset" in extra else [])) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 10_000
        rate = np.mean([int(r["alarm"]) for r in rows])
        assert rate * 20 == pytest.approx(1.0, abs=0.35)

    def test_evaluate_arl(self, workspace, tmp_path):
        design = tmp_path / "d.json"
        run("design-chart", workspace / "model.json", "--chart", "amfewma", "--lam", 0.2, "--k", 3,
            "--n-seq", 200, "--n-obs", 150, "--seed", 1, "--out", design)
        arls = []
        for sl in (0, 6):
            out = tmp_path / f"a{sl}.json"
            assert run("evaluate-arl", design, "--scenario", 1, "--sl", sl, "--n-seq", 60, "--seed", 4,
                       "--out", out) == 0
            doc = json.loads(out.read_text())
            assert doc["format_version"] == 1 and doc["seed"] == 4 and doc["n_seq"] == 60
            arls.append(doc["arl"])
        assert arls[1] < arls[0]

    def test_amfewma_needs_k(self, workspace, tmp_path):
        assert run("design-chart", workspace / "model.json", "--chart", "amfewma", "--seed", 1,
                   "--out", tmp_path / "x.json") == 1

    def test_optimize(self, workspace, tmp_path):
        design = tmp_path / "opt.json"
        assert run("design-chart", workspace / "model.json", "--optimize", "--n-seq", 30, "--n-obs", 60,
                   "--burn-in", 10, "--n-boot", 10, "--seed", 3, "--out", design) == 0
        doc = json.loads(design.read_text())
        assert doc["chart"]["name"] == "AMFEWMA*"
        assert len(doc["metadata"]["optimization"]["table"]) == 30


class TestExperimentCommands:
    def test_run_and_rmi(self, tmp_path):
        cfg = {
            "scenarios": [1], "severities": [0, 2, 6], "mfewma_lams": [0.3], "amfewma_grid": [], "optimize": False,
            "phase1_total": 120, "n_train": 50, "n_tune": 70, "n_seq": 40, "n_obs": 60, "n_phase2_seq": 20,
            "phase2_horizon": 20, "shift_location": 10, "n_runs": 1, "burn_in": 10, "grid_size": 40,
        }
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        prefix = tmp_path / "res"
        code = run("run-experiment", "--config", tmp_path / "cfg.json", "--seed", 8, "--out", prefix)
        assert code == 0
        with open(tmp_path / "res.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 1 * 3
        assert json.loads((tmp_path / "res.json").read_text())["seed"] == 8
        assert run("compute-rmi", tmp_path / "res.json", "--out", tmp_path / "rmi.csv") == 0
        with open(tmp_path / "rmi.csv") as fh:
            rmi = list(csv.DictReader(fh))
        assert {r["chart"] for r in rmi} == {"SHEWHART", "MFEWMA(lam=0.3)"}
        table = json.loads((tmp_path / "res.json").read_text())["rows"]
        arl = {(r["chart"], r["sl"]): r["arl"] for r in table}
        expected = compute_rmi({c: [arl[(c, 2)], arl[(c, 6)]] for c in ("SHEWHART", "MFEWMA(lam=0.3)")})
        assert {r["chart"]: float(r["rmi"]) for r in rmi} == pytest.approx(expected)

    def test_bad_config_key(self, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"n_sequences": 3}))
        assert run("run-experiment", "--config", tmp_path / "cfg.json", "--seed", 1) == 1
