"""Command-line interface: config handling, every command, determinism, errors."""
import csv
import json
import subprocess
import sys

import pytest

from fairdefer import __version__
from fairdefer.cli import ConfigError, main, parse_config
from fairdefer.pipeline import ExperimentReport

TINY = {
    "seed": 4,
    "dataset": {"kind": "synthetic", "synthetic": {"n": 300}},
    "train": {"max_epochs": 30, "patience_epochs": 5},
    "dm": {"scenario": "inconsistent"},
    "sweep": {"families": ["reject", "defer"], "alpha_fair": [0.0, 1.0],
              "gamma": {"reject": [-0.6, -0.3], "defer": [1.0, 4.0]}, "runs_per_setting": 2},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _run(tmp_path, command, cfg, out, *extra):
    return main([command, "-c", _write(tmp_path, cfg, f"{command}-{out}.json"), "--out",
                 str(tmp_path / out), *extra])


def _read(path):
    return json.loads(path.read_text())


# ---------------------------------------------------------------- config


def test_minimal_config_fills_defaults_and_echoes(tmp_path, capsys):
    cfg = {"seed": 1, "dataset": {"kind": "synthetic", "synthetic": {"n": 200}}}
    assert _run(tmp_path, "prepare-data", cfg, "p") == 0
    echo = _read(tmp_path / "p" / "effective_config.json")
    assert echo["config"]["model"]["temperature"] == 0.5
    assert echo["config"]["train"]["patience_epochs"] == 50
    assert echo["config"]["dataset"]["synthetic"]["feature_dim"] == 4
    assert echo["provenance"]["seed"] == 1 and echo["provenance"]["command"] == "prepare-data"
    assert "output_dir" not in echo["config"]
    summary = _read(tmp_path / "p" / "data_summary.json")
    assert summary["n_train"] + summary["n_test"] == 200
    assert (tmp_path / "p" / "data" / "train" / "features.csv").exists()


def test_misspelled_key_is_named():
    with pytest.raises(ConfigError) as e:
        parse_config({"seed": 1, "dataset": {"kind": "synthetic"}, "modle": {}})
    assert "unknown key 'modle'" in e.value.problems
    with pytest.raises(ConfigError, match="train.patience"):
        parse_config({"seed": 1, "dataset": {"kind": "synthetic"}, "train": {"patience": 3}})


def test_missing_fields_are_listed_together():
    with pytest.raises(ConfigError) as e:
        parse_config({"model": {}})
    assert e.value.problems == ["missing required field 'seed'", "missing required field 'dataset.kind'"]


def test_validation_catches_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config({"seed": 1, "dataset": {"kind": "compas", "path": str(tmp_path / "no.csv")}})
    with pytest.raises(ConfigError, match="dm:"):
        parse_config({"seed": 1, "dataset": {"kind": "synthetic"}, "dm": {"scenario": "psychic"}})
    with pytest.raises(ConfigError, match="seed"):
        parse_config({"seed": "one", "dataset": {"kind": "synthetic"}})


def test_config_error_exit_code_and_json(tmp_path, capsys):
    code = main(["train", "-c", _write(tmp_path, {"dataset": {"kind": "synthetic"}, "typo": 1})])
    assert code == 2
    err = capsys.readouterr().err.splitlines()
    payload = json.loads(err[0])
    assert payload["error"] == "ConfigError" and payload["command"] == "train"
    assert set(payload["problems"]) == {"unknown key 'typo'", "missing required field 'seed'"}
    assert err[1].startswith("fairdefer train: error:")


def test_runtime_error_exit_code(tmp_path, capsys):
    cfg = {"seed": 1, "dataset": {"kind": "prepared", "path": str(tmp_path)}}
    assert main(["train", "-c", _write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 1
    assert json.loads(capsys.readouterr().err.splitlines()[0])["error"] == "DataError"


def test_version_flag():
    out = subprocess.run([sys.executable, "-m", "fairdefer.cli", "--version"], capture_output=True,
                         text=True, check=True).stdout
    assert out.startswith(f"fairdefer {__version__}") and "numpy" in out


# ---------------------------------------------------------------- commands


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sweep")
    assert _run(tmp, "sweep", TINY, "s") == 0
    return tmp / "s"


def test_sweep_outputs(sweep_dir):
    doc = _read(sweep_dir / "sweep.json")
    fams = [r["model_family"] for r in doc["reports"]]
    assert fams == ["reject", "defer"]
    assert all(len(r["points"]) == 4 for r in doc["reports"])
    assert doc["config"]["seed"] == 4 and doc["provenance"]["config_hash"]
    side = _read(sweep_dir / "curves.csv.provenance.json")
    assert side["artifact"] == "curves.csv" and side["config"] == doc["config"]
    bd = _read(sweep_dir / "breakdown.json")
    assert set(bd["bins"]) == {"reject", "defer"}
    assert "finished_at" in _read(sweep_dir / "run_metadata.json")


def test_sweep_then_pareto_is_subset(sweep_dir, tmp_path):
    cfg = {"seed": 4, "pareto": {"input": str(sweep_dir / "sweep.json")}}
    assert _run(tmp_path, "pareto", cfg, "f") == 0
    with open(sweep_dir / "curves.csv") as fh:
        sweep_rows = {tuple(r) for r in csv.reader(fh)}
    with open(tmp_path / "f" / "front.csv") as fh:
        front_rows = [tuple(r) for r in csv.reader(fh)]
    assert len(front_rows) > 1
    assert set(front_rows) <= sweep_rows


def test_sweep_is_byte_identical_across_runs_and_dirs(sweep_dir, tmp_path):
    assert _run(tmp_path, "sweep", TINY, "again") == 0
    for name in ("sweep.json", "curves.csv", "breakdown.json", "effective_config.json",
                 "curves.csv.provenance.json"):
        assert (tmp_path / "again" / name).read_bytes() == (sweep_dir / name).read_bytes(), name


def test_seed_override_changes_results(sweep_dir, tmp_path):
    cfg = dict(TINY, sweep=dict(TINY["sweep"], families=["defer"]))
    assert _run(tmp_path, "sweep", cfg, "s5", "--seed", "5") == 0
    assert _read(tmp_path / "s5" / "sweep.json")["config"]["seed"] == 5


def test_train_dm_then_train_and_evaluate(tmp_path):
    assert _run(tmp_path, "train-dm", TINY, "dm") == 0
    summary = _read(tmp_path / "dm" / "dm_summary.json")
    assert summary["scenario"] == "inconsistent" and 0 <= summary["test_error"] <= 1
    dm_csv = tmp_path / "dm" / "dm_predictions.csv"
    cfg = dict(TINY, model={"family": "defer", "gamma": 3.0}, dm={"predictions": str(dm_csv)})
    assert _run(tmp_path, "train", cfg, "m") == 0
    trained = _read(tmp_path / "m" / "metrics.json")["metrics"]

    ev = dict(cfg, evaluate={"model": str(tmp_path / "m" / "model.json"), "dm_predictions": str(dm_csv)})
    assert _run(tmp_path, "evaluate", ev, "e1") == 0
    assert _run(tmp_path, "evaluate", ev, "e2") == 0
    a = (tmp_path / "e1" / "metrics.json").read_bytes()
    assert a == (tmp_path / "e2" / "metrics.json").read_bytes()
    assert json.loads(a)["metrics"] == trained


def test_evaluate_requires_a_model(tmp_path, capsys):
    assert _run(tmp_path, "evaluate", TINY, "x") == 2
    assert "evaluate.model" in capsys.readouterr().err


def test_report_merges_three_scenarios(tmp_path):
    inputs = []
    for scen in ("high_accuracy", "highly_biased", "inconsistent"):
        cfg = dict(TINY, dm={"scenario": scen},
                   sweep=dict(TINY["sweep"], families=["defer"], alpha_fair=[0.0]))
        assert _run(tmp_path, "sweep", cfg, scen) == 0
        inputs.append(str(tmp_path / scen / "sweep.json"))
    assert _run(tmp_path, "report", {"seed": 0, "report": {"inputs": inputs}}, "r") == 0
    doc = _read(tmp_path / "r" / "report.json")
    assert doc["scenarios"] == ["high_accuracy", "highly_biased", "inconsistent"]
    for r in doc["reports"]:
        rep = ExperimentReport.from_dict(r)  # schema check
        assert rep.model_family == "defer" and len(rep.points) == 2
        assert set(r["provenance"]) >= {"train_hash", "test_hash", "code_version", "scenario"}
