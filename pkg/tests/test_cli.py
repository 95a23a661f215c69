"""Command-line interface: exit codes, formats and determinism."""

from __future__ import annotations

import json

import numpy as np
import pytest

from mecal.cli import main
from mecal.dataset import write_csv
from mecal.simulate import Scenario, generate_dataset

from .conftest import simple_linear_dataset


def _write(path, text: str) -> str:
    path.write_text(text)
    return str(path)


@pytest.fixture
def exact_fit_csv(tmp_path):
    # y = 1 + w1 exactly: the naive linear fit returns (1, 1).
    lines = ["y,w1,w2"]
    for v in (0.0, 1.0, 2.0, 3.0):
        lines.append(f"{1.0 + v},{v},")
    return _write(tmp_path / "exact.csv", "\n".join(lines) + "\n")


def test_fit_naive_exact(exact_fit_csv, tmp_path, capsys):
    out = tmp_path / "fit.json"
    code = main(["fit", "--data", exact_fit_csv, "--model", "linear", "--method", "naive", "--seed", "1", "--out", str(out)])
    assert code == 0
    payload = json.loads(out.read_text())
    est = payload["fits"][0]["estimates"]
    assert est["beta0"] == pytest.approx(1.0, abs=1e-10)
    assert est["beta_x"] == pytest.approx(1.0, abs=1e-10)
    assert payload["provenance"]["seed"] == 1


def test_fit_missing_column_exit_2(tmp_path, capsys):
    path = _write(tmp_path / "bad.csv", "y,w2\n1.0,2.0\n")
    code = main(["fit", "--data", path, "--model", "linear", "--method", "naive", "--seed", "1"])
    assert code == 2
    assert "'w1'" in capsys.readouterr().err


def test_fit_validation_failure_exit_2(tmp_path, capsys):
    path = _write(tmp_path / "bad.csv", "y,w1\n1.0,2.0\n3.0,x\n")
    code = main(["fit", "--data", path, "--model", "linear", "--seed", "1"])
    assert code == 2
    assert "row 1" in capsys.readouterr().err


def test_fit_numerical_error_exit_3(tmp_path, capsys):
    # All-one binary outcome: degenerate logistic fit.
    lines = ["y,w1"] + [f"1,{v}" for v in range(6)]
    path = _write(tmp_path / "sep.csv", "\n".join(lines) + "\n")
    code = main(["fit", "--data", path, "--model", "logistic", "--method", "naive", "--seed", "1"])
    assert code == 3


def test_fit_multiple_methods_with_bayes(tmp_path):
    d = simple_linear_dataset(n=80, seed=6)
    data_path = tmp_path / "d.csv"
    write_csv(d, str(data_path))
    out = tmp_path / "fit.json"
    code = main(
        [
            "fit", "--data", str(data_path), "--model", "linear",
            "--method", "naive", "--method", "rc-efficient", "--method", "bayes",
            "--chains", "2", "--burnin", "80", "--iters", "120",
            "--seed", "7", "--out", str(out),
        ]
    )
    assert code == 0
    payload = json.loads(out.read_text())
    methods = [f["method"] for f in payload["fits"]]
    assert methods == ["naive", "rc-efficient", "bayes"]
    bayes = payload["fits"][2]
    assert "rhat" in bayes["diagnostics"]
    assert bayes["intervals"]["beta_x"][0] < bayes["estimates"]["beta_x"] < bayes["intervals"]["beta_x"][1]


def test_fit_cox_bayes_gamma_process_flags(tmp_path):
    d = generate_dataset(Scenario(kind="cox", reliability=0.7, beta_x=0.5, n=150, seed=44), 0)
    data_path = tmp_path / "cox.csv"
    write_csv(d, str(data_path))
    out = tmp_path / "fit.json"
    code = main(
        [
            "fit", "--data", str(data_path), "--model", "cox", "--method", "bayes",
            "--gp-c", "0.001", "--gp-rate", "0.01", "--prior-beta-var-informative",
            "--chains", "2", "--burnin", "100", "--iters", "150",
            "--seed", "3", "--out", str(out),
        ]
    )
    assert code == 0
    payload = json.loads(out.read_text())
    est = payload["fits"][0]["estimates"]
    assert "beta0" not in est
    assert np.isfinite(est["beta_x"])


_SIM_CONFIG = """
[grid]
model = "linear"
n = 200
reps = %d
replication_fraction = 0.1
seed = 123
reliabilities = [0.7]
r_squared = [0.5]
methods = ["rc", "bayes"]

[mcmc]
chains = 2
burnin = 100
iters = 150
"""


def test_simulate_smoke_single_rep(tmp_path):
    cfg = _write(tmp_path / "grid.toml", _SIM_CONFIG % 1)
    out = tmp_path / "res.json"
    code = main(["simulate", "--config", cfg, "--seed", "5", "--out", str(out)])
    assert code == 0
    payload = json.loads(out.read_text())
    assert len(payload["results"]) == 1
    methods = payload["results"][0]["methods"]
    assert set(methods) == {"rc", "bayes"}
    assert len(methods["bayes"]["estimates"]) == 1


def test_simulate_bad_config_exit_2(tmp_path, capsys):
    cfg = _write(tmp_path / "grid.toml", "[grid]\nmodel = 'linear'\n")
    assert main(["simulate", "--config", cfg, "--seed", "1"]) == 2


def _strip_volatile(payload: dict) -> dict:
    prov = dict(payload.get("provenance", {}))
    for key in ("timestamp", "wall_time_s", "threads"):
        prov.pop(key, None)
    out = dict(payload)
    out["provenance"] = prov
    return out


def test_simulate_rerun_same_seed_identical(tmp_path):
    cfg = _write(tmp_path / "grid.toml", _SIM_CONFIG % 2)
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / f"res_{tag}.json"
        assert main(["simulate", "--config", cfg, "--seed", "9", "--out", str(out)]) == 0
        outs.append(json.loads(out.read_text()))
    a, b = (_strip_volatile(p) for p in outs)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_report_markdown_and_csv_agree(tmp_path):
    cfg = _write(tmp_path / "grid.toml", _SIM_CONFIG % 2)
    res = tmp_path / "res.json"
    assert main(["simulate", "--config", cfg, "--seed", "2", "--out", str(res)]) == 0
    md_path, csv_path = tmp_path / "t.md", tmp_path / "t.csv"
    assert main(["report", "--results", str(res), "--format", "md", "--out", str(md_path)]) == 0
    assert main(["report", "--results", str(res), "--format", "csv", "--out", str(csv_path)]) == 0
    md = md_path.read_text()
    import csv as csv_mod
    import io

    rows = list(csv_mod.reader(io.StringIO(csv_path.read_text())))
    numbers = rows[1][2:]
    assert numbers  # rc/bayes means and sds
    for cell in numbers:
        if cell:
            assert cell in md


def test_report_empty_results_ok(tmp_path):
    res = _write(tmp_path / "res.json", '{"provenance": {}, "results": []}')
    assert main(["report", "--results", str(res), "--format", "md"]) == 0


def test_report_malformed_json_exit_2(tmp_path, capsys):
    res = _write(tmp_path / "res.json", "{not json")
    assert main(["report", "--results", str(res)]) == 2


def test_threads_env_default(monkeypatch):
    monkeypatch.setenv("MECAL_THREADS", "6")
    from mecal.cli import build_parser

    args = build_parser().parse_args(["report", "--results", "x.json"])
    assert args.threads == 6
