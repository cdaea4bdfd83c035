import json
import subprocess
import sys

import numpy as np
import pytest

from girsanov_lab import cli
from girsanov_lab.exceptions import ConfigError
from girsanov_lab.harness import (
    ExperimentConfig,
    MetricRow,
    RunReport,
    config_to_ini,
    pseudoinverse_suite,
    read_config,
    report_csv,
    report_json,
    run_experiment,
    write_report,
)
from girsanov_lab.models import REGISTRY, build_model

SMALL = """
[weights]
kind = weights
model = brownian_shift
theta = 0.5
n_steps = 8
paths = 2000
levels = 1, 2
seed = 3

[compare]
kind = compare
model = ou_shift
n_steps = 16
paths = 2000
seed = 4

[truncation]
kind = truncation
model = path_dependent
n_steps = 16
paths = 20000
levels = 1, 2, 4, 8

[galerkin]
kind = galerkin
model = galerkin
N = 4
n_steps = 8
paths = 500

[pinv]
kind = pseudoinverse
size = 6
count = 50
"""


@pytest.fixture(scope="module")
def configs():
    return read_config(SMALL)


# -- configuration ---------------------------------------------------------


def test_config_parses_reserved_and_model_keys(configs):
    cfg = configs[0]
    assert cfg.kind == "weights" and cfg.model == "brownian_shift"
    assert cfg.params == {"theta": 0.5}
    assert cfg.levels == (1.0, 2.0)
    assert cfg.master_seed == 3 and cfg.n_steps == 8 and cfg.paths == 2000


def test_seed_override(configs):
    assert all(c.master_seed == 99 for c in read_config(SMALL, seed=99))


@pytest.mark.parametrize(
    "items, key",
    [
        ({}, "kind"),
        ({"kind": "nope"}, "kind"),
        ({"kind": "weights", "model": "ou_shift", "n_steps": "4"}, "paths"),
        ({"kind": "weights", "model": "nope", "n_steps": "4", "paths": "4"}, "model"),
        ({"kind": "weights", "model": "ou_shift", "n_steps": "0", "paths": "4"}, "n_steps"),
        ({"kind": "weights", "model": "ou_shift", "n_steps": "x", "paths": "4"}, "n_steps"),
        ({"kind": "weights", "model": "ou_shift", "n_steps": "4", "paths": "4", "T": "0"}, "T"),
        ({"kind": "truncation", "model": "ou_shift", "n_steps": "4", "paths": "4", "levels": "-1"}, "levels"),
        ({"kind": "galerkin", "model": "ou_shift", "n_steps": "4", "paths": "4"}, "model"),
    ],
)
def test_config_errors_name_offending_key(items, key):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_mapping("s", items)
    assert info.value.key == key


def test_malformed_and_empty_config():
    with pytest.raises(ConfigError):
        read_config("no section header\n")
    with pytest.raises(ConfigError):
        read_config("")


def test_bad_model_parameter_is_config_error():
    cfg = ExperimentConfig.from_mapping(
        "s", {"kind": "weights", "model": "ou_shift", "n_steps": "4", "paths": "4", "bogus": "1"}
    )
    with pytest.raises(ConfigError):
        run_experiment(cfg)


def test_echo_round_trip(configs):
    again = read_config(config_to_ini(configs))
    assert [c.echo() for c in again] == [c.echo() for c in configs]


# -- registry --------------------------------------------------------------


def test_registry_models_build():
    assert set(REGISTRY) == {"brownian_shift", "ou_shift", "path_dependent", "degenerate_matrix", "galerkin"}
    for name in REGISTRY:
        build_model(name)
    with pytest.raises(KeyError):
        build_model("nope")


def test_degenerate_matrix_rank():
    model = build_model("degenerate_matrix", d=3, m=4, rank=2)
    assert np.linalg.matrix_rank(model.params["sigma_matrix"]) == 2
    with pytest.raises(ValueError):
        build_model("degenerate_matrix", d=2, m=2, rank=3)


# -- report serialization --------------------------------------------------


def test_empty_report_is_header_only():
    assert report_csv(RunReport({}, [])) == "metric,value,stderr,pass\n"


def test_one_row_report_is_two_lines():
    text = report_csv(RunReport({}, [MetricRow("m", 0.1, None, True)]))
    assert text == "metric,value,stderr,pass\nm,0.10000000000000001,,true\n"


def test_json_round_trip():
    rep = RunReport({"kind": "weights"}, [MetricRow("a", 1.5, 0.25, True), MetricRow("b", -2.0), MetricRow("c", 0.0, None, False)])
    again = RunReport.from_dict(json.loads(report_json(rep)))
    assert again == rep


def test_seventeen_significant_digits():
    x = 0.1 + 0.2
    line = report_csv(RunReport({}, [MetricRow("x", x)])).splitlines()[1]
    assert float(line.split(",")[1]) == x


def test_write_report_uses_lf(tmp_path):
    rep = RunReport({}, [MetricRow("m", 1.0)])
    for fmt in ("csv", "json"):
        path = write_report(rep, tmp_path / "out", fmt)
        assert path.suffix == f".{fmt}"
        assert b"\r" not in path.read_bytes()
    with pytest.raises(ValueError):
        write_report(rep, tmp_path / "out", "xml")


# -- experiments -----------------------------------------------------------


def test_each_kind_runs_and_passes(configs):
    for cfg in configs:
        rep = run_experiment(cfg)
        assert rep.rows
        assert rep.all_passed, (cfg.name, [r for r in rep.rows if r.passed is False])


def test_weights_report_has_mean_weight_row(configs):
    rows = {r.metric: r for r in run_experiment(configs[0]).rows}
    assert rows["mean_rho_T"].passed is True
    assert "mean_rho_n[1]" in rows and "ess" in rows


def test_pseudoinverse_rows_below_tolerance(configs):
    rows = run_experiment(configs[-1]).rows
    assert {r.metric for r in rows} >= {"max_residual[MPM=M]", "max_residual[closed_form]"}
    assert all(r.value <= 1e-10 for r in rows)


def test_pseudoinverse_suite_is_seeded():
    assert pseudoinverse_suite(30, 5, 1) == pseudoinverse_suite(30, 5, 1)


@pytest.mark.parametrize("index", range(5))
def test_reports_identical_across_worker_counts(configs, index):
    cfg = configs[index]
    a = report_csv(run_experiment(cfg, workers=1))
    b = report_csv(run_experiment(cfg, workers=4))
    assert a == b
    assert report_json(run_experiment(cfg, workers=1)) == report_json(run_experiment(cfg, workers=3))


def test_rerun_from_echo_reproduces_report(configs):
    cfg = configs[1]
    rep = run_experiment(cfg)
    (again,) = read_config(config_to_ini([ExperimentConfig.from_mapping(cfg.name, rep.config)]))
    assert report_csv(run_experiment(again)) == report_csv(rep)


# -- command line ----------------------------------------------------------


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(SMALL)
    return path


def test_cli_list_models(capsys):
    assert cli.main(["list-models"]) == 0
    out = capsys.readouterr().out
    for name in REGISTRY:
        assert name in out


def test_cli_run_writes_reports(config_file, tmp_path):
    out = tmp_path / "reports"
    assert cli.main(["run", str(config_file), "--out", str(out), "--format", "json"]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["compare.json", "galerkin.json", "pinv.json", "truncation.json", "weights.json"]
    data = json.loads((out / "weights.json").read_text())
    assert data["config"]["kind"] == "weights"


def test_cli_seed_override_and_determinism(config_file, tmp_path, monkeypatch):
    outs = []
    for workers in ("1", "3"):
        monkeypatch.setenv("GIRSANOV_LAB_WORKERS", workers)
        out = tmp_path / f"w{workers}"
        assert cli.main(["run", str(config_file), "--seed", "11", "--out", str(out)]) == 0
        outs.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert outs[0] == outs[1]
    default = tmp_path / "default"
    cli.main(["run", str(config_file), "--out", str(default)])
    assert (default / "weights.csv").read_bytes() != outs[0]["weights.csv"]


def test_cli_exit_code_on_failed_flag(tmp_path):
    # theta = 6 gives lognormal weights with variance e^36 - 1, so 2000 paths
    # almost surely miss the unit mean by more than 3 standard errors
    path = tmp_path / "fail.ini"
    path.write_text("[bad]\nkind = weights\nmodel = brownian_shift\ntheta = 6\nn_steps = 4\npaths = 2000\n")
    assert cli.main(["run", str(path), "--out", str(tmp_path)]) == 1


def test_cli_exit_code_on_config_error(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[x]\nkind = weights\nmodel = nope\nn_steps = 4\npaths = 4\n")
    assert cli.main(["run", str(path), "--out", str(tmp_path)]) == 2
    assert cli.main(["run", str(tmp_path / "missing.ini")]) == 2


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "girsanov_lab.cli", "list-models"], capture_output=True, text=True, check=False
    )
    assert proc.returncode == 0 and "ou_shift" in proc.stdout
