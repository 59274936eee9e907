import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from musci import __version__
from musci.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from musci.dataset import Dataset, write_csv
from musci.simulate import LOCAL_COLUMNS, REPLICATION_COLUMNS, SCENARIO_COLUMNS, WEIGHT_COLUMNS

OUTPUTS = ("scenario.csv", "replications.csv", "local_coverage.csv", "weights.csv", "run_meta.json")
MINIMAL = {
    "seed": 11,
    "defaults": {"replications": 2, "n_test": 200, "methods": ["fed2", "target-only"]},
    "scenarios": [{"n_k": 100}],
}


def write_json(path, doc):
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def data_csv(tmp_path, small_data):
    p = tmp_path / "data.csv"
    write_csv(small_data, p)
    return p


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("MUSCI_SEED", raising=False)


# -- simulate ------------------------------------------------------------------

def test_simulate_minimal(tmp_path):
    cfg = write_json(tmp_path / "c.json", MINIMAL)
    assert main(["-q", "simulate", str(cfg), "--out", str(tmp_path / "o"), "--workers", "1"]) == EXIT_OK
    for name, cols in (("scenario.csv", SCENARIO_COLUMNS), ("replications.csv", REPLICATION_COLUMNS),
                       ("local_coverage.csv", LOCAL_COLUMNS), ("weights.csv", WEIGHT_COLUMNS)):
        assert read_rows(tmp_path / "o" / name)[0] == cols
    meta = json.loads((tmp_path / "o" / "run_meta.json").read_text())
    assert meta["seed"] == 11 and meta["version"] == __version__ and meta["config"] == MINIMAL


def test_simulate_deterministic_across_workers(tmp_path):
    cfg = write_json(tmp_path / "c.json", MINIMAL)
    for name, w in (("a", "1"), ("b", "1"), ("c", "2")):
        assert main(["-q", "simulate", str(cfg), "--out", str(tmp_path / name), "--workers", w]) == EXIT_OK
    for f in OUTPUTS:
        ref = (tmp_path / "a" / f).read_bytes()
        assert (tmp_path / "b" / f).read_bytes() == ref
        assert (tmp_path / "c" / f).read_bytes() == ref


def test_simulate_output_dir_from_config(tmp_path):
    cfg = write_json(tmp_path / "c.json", {**MINIMAL, "output_dir": str(tmp_path / "cfgout"), "workers": 1})
    assert main(["-q", "simulate", str(cfg)]) == EXIT_OK
    assert (tmp_path / "cfgout" / "scenario.csv").exists()


def test_simulate_needs_output_dir(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", MINIMAL)
    assert main(["-q", "simulate", str(cfg)]) == EXIT_USAGE
    assert "output directory" in capsys.readouterr().err


def test_env_seed_overrides(tmp_path, monkeypatch):
    cfg = write_json(tmp_path / "c.json", MINIMAL)
    monkeypatch.setenv("MUSCI_SEED", "99")
    assert main(["-q", "simulate", str(cfg), "--out", str(tmp_path / "o"), "--workers", "1"]) == EXIT_OK
    assert json.loads((tmp_path / "o" / "run_meta.json").read_text())["seed"] == 99
    monkeypatch.setenv("MUSCI_SEED", "abc")
    assert main(["-q", "simulate", str(cfg), "--out", str(tmp_path / "p")]) == EXIT_USAGE


def test_simulate_grid_expansion(tmp_path):
    doc = {"defaults": {"replications": 1, "n_test": 100, "methods": ["target-only"], "n_k": 100},
           "grid": {"covariate_shift": ["homogeneous", "weak"], "error_type": ["homoscedastic", "heteroscedastic"]}}
    cfg = write_json(tmp_path / "c.json", doc)
    assert main(["-q", "simulate", str(cfg), "--out", str(tmp_path / "o"), "--workers", "1"]) == EXIT_OK
    assert len(read_rows(tmp_path / "o" / "scenario.csv")) == 1 + 4


def test_malformed_json_cites_offset(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_bytes(b'{"seed": 1,, "scenarios": []}')
    assert main(["simulate", str(p), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "byte offset 11" in capsys.readouterr().err


def test_malformed_json_offset_counts_bytes(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_bytes('{"output_dir": "é", }'.encode())
    assert main(["simulate", str(p)]) == EXIT_USAGE
    # "é" is two bytes in UTF-8, so the trailing brace sits at byte 21
    assert "byte offset 21" in capsys.readouterr().err


@pytest.mark.parametrize("doc", [
    {"scenarios": [{"n_k": 10}]},
    {"scenarios": [{"colour": "red"}]},
    {"scenarios": []},
    {"seed": 1},
    {"scenarios": [{"alpha": 0.5}]},
    {"scenarios": [{"methods": ["fed9"]}]},
])
def test_schema_violations(tmp_path, capsys, doc):
    cfg = write_json(tmp_path / "c.json", doc)
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "schema" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["simulate", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_USAGE


# -- fit / predict -------------------------------------------------------------------

def test_fit_target_only_has_no_weights(tmp_path, data_csv):
    out = tmp_path / "p.json"
    assert main(["fit", str(data_csv), "--method", "target-only", "--out", str(out)]) == EXIT_OK
    assert "weights" not in json.loads(out.read_text())


def test_fit_federated_weights_sum(tmp_path, data_csv):
    out = tmp_path / "p.json"
    assert main(["fit", str(data_csv), "--method", "federated", "--scheme", "fed2", "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert abs(sum(doc["weights"]) - 1) <= 1e-9
    assert doc["method"]["label"] == "FedII"
    assert len(doc["diagnostics"]["site_quantiles"]) == 5


@pytest.mark.parametrize("alpha", ["0.0", "0.5", "-0.1"])
def test_fit_alpha_domain(tmp_path, data_csv, alpha):
    assert main(["fit", str(data_csv), "--alpha", alpha, "--out", str(tmp_path / "p.json")]) == EXIT_USAGE


def test_fit_schema_violation(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("site,observed,y,x1\n0,1,,0.5\n", encoding="utf-8")
    assert main(["fit", str(bad), "--out", str(tmp_path / "p.json")]) == EXIT_USAGE


def test_fit_estimation_failure(tmp_path, small_data, capsys):
    obs = small_data.observed & (small_data.site != 0)
    data = Dataset(small_data.X, small_data.site, obs, np.where(obs, small_data.y, np.nan), small_data.num_sites)
    p = tmp_path / "d.csv"
    write_csv(data, p)
    assert main(["fit", str(p), "--out", str(tmp_path / "p.json")]) == EXIT_RUNTIME
    assert "score model" in capsys.readouterr().err


def test_fit_reports_dropped_site(tmp_path, small_data, capsys):
    obs = small_data.observed & (small_data.site != 3)
    data = Dataset(small_data.X, small_data.site, obs, np.where(obs, small_data.y, np.nan), small_data.num_sites)
    p = tmp_path / "d.csv"
    write_csv(data, p)
    assert main(["fit", str(p), "--out", str(tmp_path / "p.json")]) == EXIT_OK
    assert "site 3" in capsys.readouterr().err


def test_fit_predict_round_trip(tmp_path, data_csv):
    pred = tmp_path / "p.json"
    assert main(["fit", str(data_csv), "--score", "asr", "--out", str(pred)]) == EXIT_OK
    cov = tmp_path / "x.csv"
    cov.write_text("x1\n" + "\n".join(str(v) for v in np.linspace(0.01, 0.99, 25)) + "\n", encoding="utf-8")
    out = tmp_path / "iv.csv"
    assert main(["predict", str(pred), str(cov), "--out", str(out)]) == EXIT_OK
    rows = read_rows(out)
    assert rows[0] == ["lower", "upper", "empty"] and len(rows) == 26
    lo = np.array([float(r[0]) for r in rows[1:]])
    hi = np.array([float(r[1]) for r in rows[1:]])
    assert np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))
    r_hat = json.loads(pred.read_text())["threshold"]
    np.testing.assert_allclose(hi - lo, 2 * r_hat)


def test_predict_accepts_extra_columns(tmp_path, data_csv):
    pred = tmp_path / "p.json"
    main(["fit", str(data_csv), "--method", "target-only", "--out", str(pred)])
    cov = tmp_path / "x.csv"
    cov.write_text("id,x1\na,0.2\nb,0.4\n", encoding="utf-8")
    assert main(["predict", str(pred), str(cov), "--out", str(tmp_path / "o.csv")]) == EXIT_OK
    assert len(read_rows(tmp_path / "o.csv")) == 3


def test_predict_dimension_mismatch(tmp_path, data_csv):
    pred = tmp_path / "p.json"
    main(["fit", str(data_csv), "--method", "target-only", "--out", str(pred)])
    cov = tmp_path / "x.csv"
    cov.write_text("x1,x2\n0.1,0.2\n", encoding="utf-8")
    assert main(["predict", str(pred), str(cov), "--out", str(tmp_path / "o.csv")]) == EXIT_USAGE


def test_predict_empty_cqr_rows_flagged(tmp_path, data_csv):
    pred = tmp_path / "p.json"
    main(["fit", str(data_csv), "--score", "cqr", "--out", str(pred)])
    doc = json.loads(pred.read_text())
    doc["threshold"] = -100.0
    pred.write_text(json.dumps(doc), encoding="utf-8")
    cov = tmp_path / "x.csv"
    cov.write_text("x1\n0.5\n", encoding="utf-8")
    assert main(["predict", str(pred), str(cov), "--out", str(tmp_path / "o.csv")]) == EXIT_OK
    assert read_rows(tmp_path / "o.csv")[1] == ["", "", "1"]


def test_predict_bad_predictor(tmp_path):
    pred = write_json(tmp_path / "p.json", {"format": "something"})
    cov = tmp_path / "x.csv"
    cov.write_text("x1\n0.5\n", encoding="utf-8")
    assert main(["predict", str(pred), str(cov), "--out", str(tmp_path / "o.csv")]) == EXIT_USAGE


def test_inputs_not_mutated(tmp_path, data_csv):
    before = data_csv.read_bytes()
    main(["fit", str(data_csv), "--out", str(tmp_path / "p.json")])
    assert data_csv.read_bytes() == before


# -- report -----------------------------------------------------------------------

def _replications(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPLICATION_COLUMNS)
        for r in rows:
            w.writerow(r)


def test_report_single_method(tmp_path):
    src = tmp_path / "replications.csv"
    _replications(src, [["s", 0, 1, "FedII", 0.9, 3.3, 1.6, 0], ["s", 1, 2, "FedII", 0.8, 3.1, 1.5, 0]])
    assert main(["report", str(src), "--out", str(tmp_path / "r")]) == EXIT_OK
    rows = read_rows(tmp_path / "r" / "summary.csv")
    assert rows[0] == ["scenario", "method", "replications", "CP", "sd_CP", "wd", "sd_wd"]
    assert len(rows) == 2
    assert abs(float(rows[1][3]) - 0.85) <= 1e-12 and abs(float(rows[1][5]) - 3.2) <= 1e-12
    assert len(read_rows(tmp_path / "r" / "boxplot_long.csv")) == 1 + 4


def test_report_means_match_input(tmp_path):
    cfg = write_json(tmp_path / "c.json", MINIMAL)
    main(["-q", "simulate", str(cfg), "--out", str(tmp_path / "o"), "--workers", "1"])
    assert main(["report", str(tmp_path / "o" / "replications.csv"), "--out", str(tmp_path / "r")]) == EXIT_OK
    with open(tmp_path / "o" / "replications.csv", newline="") as fh:
        reps = list(csv.DictReader(fh))
    with open(tmp_path / "r" / "summary.csv", newline="") as fh:
        summary = list(csv.DictReader(fh))
    for s in summary:
        vals = [r for r in reps if r["method"] == s["method"]]
        assert abs(float(s["CP"]) - np.mean([float(r["coverage"]) for r in vals])) <= 1e-12
        assert abs(float(s["wd"]) - np.mean([float(r["width"]) for r in vals])) <= 1e-12
    assert (tmp_path / "r" / "local_curves.csv").read_bytes() == (tmp_path / "o" / "local_coverage.csv").read_bytes()


def test_report_empty_input(tmp_path):
    src = tmp_path / "replications.csv"
    _replications(src, [])
    assert main(["report", str(src), "--out", str(tmp_path / "r")]) == EXIT_USAGE


def test_report_missing_columns(tmp_path):
    src = tmp_path / "replications.csv"
    src.write_text("scenario,method\ns,FedII\n", encoding="utf-8")
    assert main(["report", str(src), "--out", str(tmp_path / "r")]) == EXIT_USAGE


# -- entry point ------------------------------------------------------------------

def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "musci", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and __version__ in res.stdout


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as info:
        main(["fit"])
    assert info.value.code == EXIT_USAGE
