"""Command-line interface: ``fairdefer <command> --config run.json``.

Every command reads one JSON config, fills defaults, echoes the effective
config to the output directory and writes deterministic artifacts.  JSON
artifacts embed the effective config and seed; CSV artifacts get a
``<name>.provenance.json`` sidecar.  Wall-clock metadata goes to
``run_metadata.json`` only, so primary outputs are byte-identical on re-runs.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from fairdefer import __version__
from fairdefer.data import (
    CompasOptions,
    DataError,
    SplitSpec,
    SynthSpec,
    load_compas,
    load_dataset,
    load_health,
    save_dataset,
    split,
    synth_generate,
)
from fairdefer.dm_sim import Corruption, DmPredictions, Scenario, save_dm
from fairdefer.models import load_model, save_model
from fairdefer.nn_core import TrainConfig
from fairdefer.pipeline import (
    CURVE_COLUMNS,
    Experiment,
    ExperimentReport,
    FamilyOptions,
    SweepSetting,
    build_experiment,
    curves_csv,
    deferral_rate_breakdown,
    evaluate_model,
    subgroup_deferral_summary,
    run_sweep,
    train_model,
)

log = logging.getLogger("fairdefer")

COMMANDS = ("prepare-data", "train", "train-dm", "sweep", "evaluate", "pareto", "report")
REQUIRED = object()

DEFAULTS = {
    "seed": REQUIRED,
    "output_dir": "out",
    "dataset": {
        "kind": REQUIRED,  # compas | health | synthetic | prepared
        "path": None,
        "label_column": "two_year_recid",
        "apply_filter": True,
        "split": {"train_fraction": 0.7, "test_fraction": 0.3, "stratify_on": None},
        "synthetic": {
            "n": 4000, "group_rate": 0.5, "base_rates": [0.35, 0.55], "class_means": [-0.25, 0.25],
            "group_shift": 0.4, "feature_dim": 4, "z_informativeness": 0.6, "aux_rate": 0.5,
        },
    },
    "model": {
        "family": "fair_binary",
        "alpha_fair": 0.0,
        "gamma": 0.0,
        "temperature": 0.5,
        "stop_gradient": False,
        "di_form": "soft_mean",
        "gate_estimator": "concrete",
        "posthoc_mode": "defer",
        "posthoc_per_group": True,
        "posthoc_samples": 1000,
        "posthoc_selection": "validation",
        "bnn_prior_std": 0.1,
        "bnn_samples": 10,
    },
    "train": {
        "patience_epochs": 50,
        "max_epochs": 5000,
        "validation_fraction": 0.2,
        "batch_size": None,
        "learning_rate": 0.01,
        "hidden_units": 5,
    },
    "dm": {"scenario": "high_accuracy", "flip_prob": 0.3, "constant_loss": None,
           "corrupted_output": "hard", "predictions": None},
    "sweep": {
        "families": ["defer"],
        "alpha_fair": [0.0, 0.1, 0.3, 1.0, 3.0],
        "gamma": {},  # family -> list of gamma values
        "runs_per_setting": 5,
        "bins": [[0.0, 0.3], [0.3, 0.7], [0.7, 1.0]],
    },
    "evaluate": {"model": None, "dm_predictions": None},
    "pareto": {"input": None},
    "report": {"inputs": []},
}

DEFAULT_GAMMAS = {
    "reject": [-0.7, -0.6, -0.5, -0.4, -0.3],
    "defer": [-0.5, 0.0, 1.0, 2.0, 4.0],
    "posthoc": [0.0, 0.05, 0.1, 0.2, 0.5],
    "punt": [0.0, 0.1, 0.3, 1.0],
    "fair_punt": [0.0, 0.1, 0.3, 1.0],
    "bnn": [0.3, 0.4, 0.5, 0.6],
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _merge(defaults: dict, given: dict, path: str, problems: list[str]) -> dict:
    out = {}
    for key in given:
        if key not in defaults:
            problems.append(f"unknown key '{path}{key}'")
    for key, default in defaults.items():
        if key in given:
            val = given[key]
            # Free-form maps (per-family gamma lists) are taken as given.
            if isinstance(default, dict) and default and isinstance(val, dict):
                out[key] = _merge(default, val, f"{path}{key}.", problems)
            elif isinstance(default, dict) and default and not isinstance(val, dict):
                problems.append(f"'{path}{key}' must be an object")
            else:
                out[key] = copy.deepcopy(val)
        elif default is REQUIRED:
            problems.append(f"missing required field '{path}{key}'")
        elif isinstance(default, dict):
            out[key] = _merge(default, {}, f"{path}{key}.", problems)
        else:
            out[key] = copy.deepcopy(default)
    return out


DATA_FREE_COMMANDS = ("pareto", "report")


def parse_config(source, overrides: dict | None = None, needs_data: bool = True) -> dict:
    """Validated effective config: defaults filled, unknown keys rejected,
    every missing mandatory field reported in one error.

    ``needs_data=False`` (pareto, report) makes the dataset section optional.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ConfigError([f"config file not found: {path}"])
        try:
            given = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError([f"config is not valid JSON: {e}"]) from None
    else:
        given = copy.deepcopy(source)
    if not isinstance(given, dict):
        raise ConfigError(["config must be a JSON object"])
    for k, v in (overrides or {}).items():
        if v is not None:
            given[k] = v
    problems: list[str] = []
    defaults = DEFAULTS
    if not needs_data:
        defaults = copy.deepcopy(DEFAULTS)
        defaults["dataset"]["kind"] = None
    cfg = _merge(defaults, given, "", problems)
    if not problems:
        _validate(cfg, problems, needs_data)
    if problems:
        raise ConfigError(problems)
    return cfg


def _validate(cfg: dict, problems: list[str], needs_data: bool = True):
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        problems.append("'seed' must be an integer")
    ds = cfg["dataset"]
    if not needs_data and ds["kind"] is None:
        pass
    elif ds["kind"] not in ("compas", "health", "synthetic", "prepared"):
        problems.append(f"unknown dataset.kind {ds['kind']!r}")
    elif ds["kind"] != "synthetic":
        if not ds["path"]:
            problems.append(f"dataset.path is required for kind {ds['kind']!r}")
        elif not Path(ds["path"]).exists():
            problems.append(f"dataset.path does not exist: {ds['path']}")
    dm = cfg["dm"]
    try:
        Scenario(dm["scenario"])
        Corruption(flip_prob=dm["flip_prob"], output=dm["corrupted_output"])
    except (TypeError, ValueError) as e:
        problems.append(f"dm: {e}")
    frozen = dm["predictions"]
    if frozen and not Path(frozen).exists():
        problems.append(f"dm.predictions does not exist: {frozen}")
    try:
        build_train_config(cfg)
        FamilyOptions(**_family_option_kwargs(cfg["model"]))
        SweepSetting(cfg["model"]["family"], cfg["model"]["alpha_fair"], cfg["model"]["gamma"])
    except (TypeError, ValueError) as e:
        problems.append(str(e))
    for fam in cfg["sweep"]["families"]:
        if fam not in DEFAULT_GAMMAS and fam not in ("binary", "fair_binary"):
            problems.append(f"unknown sweep family {fam!r}")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def build_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def _family_option_kwargs(model: dict) -> dict:
    return {k: v for k, v in model.items() if k not in ("family", "alpha_fair", "gamma")}


# ---------------------------------------------------------------- artifacts


class Outputs:
    def __init__(self, cfg: dict, command: str):
        # The output location is not part of the experiment; leaving it out
        # keeps artifacts byte-identical when re-run into another directory.
        self.cfg = {k: v for k, v in cfg.items() if k != "output_dir"}
        self.command = command
        self.dir = Path(cfg["output_dir"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []
        self.provenance = {
            "command": command,
            "seed": cfg["seed"],
            "config_hash": config_hash(self.cfg),
            "code_version": __version__,
        }
        self.json("effective_config.json", {"config": self.cfg})

    def json(self, name: str, payload: dict) -> Path:
        doc = dict(payload)
        doc.setdefault("config", self.cfg)
        doc["provenance"] = {**self.provenance, **doc.get("provenance", {})}
        path = self.dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
        self.written.append(name)
        return path

    def csv_sidecar(self, name: str):
        self.json(f"{name}.provenance.json", {"artifact": name})
        self.written.append(name)

    def text(self, name: str, content: str):
        path = self.dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content)
        self.csv_sidecar(name)

    def finish(self, started: float):
        meta = {"command": self.command, "output_dir": str(self.dir), "written": sorted(set(self.written)),
                "wall_seconds": round(time.time() - started, 3),
                "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
        (self.dir / "run_metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------- data plumbing


def load_splits(cfg: dict):
    ds = cfg["dataset"]
    sp = ds["split"]
    spec = SplitSpec(sp["train_fraction"], sp["test_fraction"], cfg["seed"], sp["stratify_on"])
    kind = ds["kind"]
    if kind == "compas":
        return load_compas(ds["path"], spec, CompasOptions(ds["label_column"], ds["apply_filter"]))
    if kind == "health":
        return load_health(ds["path"], spec)
    if kind == "synthetic":
        syn = ds["synthetic"]
        full = synth_generate(SynthSpec(**{k: tuple(v) if isinstance(v, list) else v
                                           for k, v in syn.items()}), cfg["seed"])
        return split(full, spec)
    root = Path(ds["path"])
    return load_dataset(root / "train"), load_dataset(root / "test")


def load_experiment(cfg: dict) -> Experiment:
    train_ds, test_ds = load_splits(cfg)
    frozen = cfg["dm"]["predictions"]
    if frozen:
        preds = DmPredictions.from_csv(frozen)
        return Experiment(train_ds.model_view(), test_ds.model_view(), cfg["dm"]["scenario"],
                          preds.aligned(train_ds.example_ids), preds.aligned(test_ds.example_ids))
    return _build_experiment(cfg, train_ds, test_ds)


def _build_experiment(cfg: dict, train_ds, test_ds) -> Experiment:
    dm = cfg["dm"]
    return build_experiment(train_ds, test_ds, dm["scenario"], build_train_config(cfg), cfg["seed"],
                            dm["flip_prob"], dm["constant_loss"], corrupted_output=dm["corrupted_output"])


def _concat_preds(*preds: DmPredictions) -> DmPredictions:
    return DmPredictions(np.concatenate([p.example_ids for p in preds]),
                         np.concatenate([p.prob for p in preds]),
                         np.concatenate([p.hard for p in preds]))


# ---------------------------------------------------------------- commands


def cmd_prepare_data(cfg, out: Outputs, args):
    train_ds, test_ds = load_splits(cfg)
    save_dataset(train_ds, out.dir / "data" / "train")
    save_dataset(test_ds, out.dir / "data" / "test")
    for part in ("train", "test"):
        out.csv_sidecar(f"data/{part}/features.csv")
    summary = {"n_train": len(train_ds), "n_test": len(test_ds),
               "train_hash": train_ds.content_hash(), "test_hash": test_ds.content_hash(),
               "meta": train_ds.meta}
    out.json("data_summary.json", summary)
    return summary


def cmd_train_dm(cfg, out: Outputs, args):
    train_ds, test_ds = load_splits(cfg)
    exp = _build_experiment(cfg, train_ds, test_ds)
    save_dm(exp.dm, out.dir / "dm_model.json")
    doc = json.loads((out.dir / "dm_model.json").read_text())
    out.json("dm_model.json", {"dm": doc})
    _concat_preds(exp.dm_train, exp.dm_test).to_csv(out.dir / "dm_predictions.csv")
    out.csv_sidecar("dm_predictions.csv")
    from fairdefer.fairness_metrics import disparate_impact_hard, error_rate

    summary = {
        "scenario": exp.scenario,
        "test_error": error_rate(test_ds.labels, exp.dm_test.prob),
        "test_di": disparate_impact_hard(test_ds.labels, test_ds.sensitive, exp.dm_test.prob)[0],
    }
    out.json("dm_summary.json", summary)
    return summary


def _options(cfg) -> FamilyOptions:
    return FamilyOptions(**_family_option_kwargs(cfg["model"]))


def cmd_train(cfg, out: Outputs, args):
    exp = load_experiment(cfg)
    m = cfg["model"]
    setting = SweepSetting(m["family"], m["alpha_fair"], m["gamma"])
    model = train_model(exp, setting, _options(cfg), build_train_config(cfg), cfg["seed"])
    save_model(model, out.dir / "model.json")
    out.json("model.json", json.loads((out.dir / "model.json").read_text()))
    rec = evaluate_model(exp, model, _options(cfg))
    out.json("metrics.json", {"metrics": rec.to_dict(), "provenance": exp.provenance()})
    _concat_preds(exp.dm_train, exp.dm_test).to_csv(out.dir / "dm_predictions.csv")
    out.csv_sidecar("dm_predictions.csv")
    return rec.to_dict()


def cmd_evaluate(cfg, out: Outputs, args):
    ev = cfg["evaluate"]
    if not ev["model"]:
        raise ConfigError(["evaluate.model is required for the evaluate command"])
    model = load_model(ev["model"])
    train_ds, test_ds = load_splits(cfg)
    dm_path = ev["dm_predictions"] or cfg["dm"]["predictions"]
    if dm_path:
        preds = DmPredictions.from_csv(dm_path).aligned(test_ds.example_ids)
    else:
        exp = _build_experiment(cfg, train_ds, test_ds)
        preds = exp.dm_test
    exp = Experiment(train_ds.model_view(), test_ds.model_view(), cfg["dm"]["scenario"],
                     DmPredictions(train_ds.example_ids, np.zeros(len(train_ds)),
                                   np.zeros(len(train_ds), dtype=int)), preds)
    rec = evaluate_model(exp, model, _options(cfg))
    out.json("metrics.json", {"metrics": rec.to_dict(), "provenance": exp.provenance()})
    return rec.to_dict()


def _sweep_settings(cfg) -> list[SweepSetting]:
    sw = cfg["sweep"]
    settings = []
    for fam in sw["families"]:
        if fam == "binary":
            settings.append(SweepSetting("binary"))
            continue
        alphas = [0.0] if fam in ("punt", "bnn") else sw["alpha_fair"]
        gammas = [0.0] if fam == "fair_binary" else sw["gamma"].get(fam, DEFAULT_GAMMAS[fam])
        settings += [SweepSetting(fam, float(a), float(g)) for a in alphas for g in gammas]
    return settings


def cmd_sweep(cfg, out: Outputs, args):
    exp = load_experiment(cfg)
    sw = cfg["sweep"]
    reports = []
    all_points = []
    for fam in sw["families"]:
        settings = [s for s in _sweep_settings(cfg) if s.family == fam]
        points = run_sweep(exp, settings, sw["runs_per_setting"], cfg["seed"], _options(cfg),
                           build_train_config(cfg), jobs=args.jobs)
        all_points += points
        reports.append(ExperimentReport.from_points(exp.scenario, fam, points, exp.provenance()))
    out.json("sweep.json", {"reports": [r.to_dict() for r in reports]})
    out.text("curves.csv", curves_csv(all_points))
    bins = [tuple(b) for b in sw["bins"]]
    out.json("breakdown.json", {
        "bins": {r.model_family: deferral_rate_breakdown(r.points, bins) for r in reports},
        "subgroup_deferral": {r.model_family: subgroup_deferral_summary(r.points, r.model_family)
                              for r in reports},
    })
    return {"points": len(all_points)}


def _read_reports(path) -> list[ExperimentReport]:
    doc = json.loads(Path(path).read_text())
    return [ExperimentReport.from_dict(r) for r in doc["reports"]]


def cmd_pareto(cfg, out: Outputs, args):
    src = cfg["pareto"]["input"]
    if not src:
        raise ConfigError(["pareto.input (a sweep.json) is required for the pareto command"])
    reports = _read_reports(src)
    rows = []
    fronts = {}
    bins = [tuple(b) for b in cfg["sweep"]["bins"]]
    for r in reports:
        front = [r.points[i] for i in r.pareto]
        rows.append(curves_csv(front).splitlines()[1:])
        fronts[r.model_family] = {"front": r.pareto, "bins": deferral_rate_breakdown(r.points, bins)}
    body = ",".join(CURVE_COLUMNS) + "\n" + "".join(line + "\n" for chunk in rows for line in chunk)
    out.text("front.csv", body)
    out.json("fronts.json", {"fronts": fronts, "source": str(src)})
    return {"front_points": sum(len(c) for c in rows)}


def cmd_report(cfg, out: Outputs, args):
    inputs = cfg["report"]["inputs"]
    if not inputs:
        raise ConfigError(["report.inputs must list at least one sweep.json"])
    merged = []
    for path in inputs:
        for r in _read_reports(path):
            merged.append(r.to_dict())
    scenarios = sorted({r["scenario"] for r in merged})
    out.json("report.json", {"scenarios": scenarios, "reports": merged, "sources": [str(p) for p in inputs]})
    return {"reports": len(merged), "scenarios": scenarios}


HANDLERS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "train-dm": cmd_train_dm,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "pareto": cmd_pareto,
    "report": cmd_report,
}


def version_string() -> str:
    return (f"fairdefer {__version__} (python {platform.python_version()}, numpy {np.__version__}, "
            f"pandas {pd.__version__})")


HELP = {
    "prepare-data": "load, split and save a dataset with its summary",
    "train-dm": "train or build the simulated decision-maker and save its predictions",
    "train": "train one model and report its test metrics",
    "evaluate": "score a saved model against saved DM predictions",
    "sweep": "train every (family, alpha, gamma) setting and write curves",
    "pareto": "extract error/DI Pareto fronts from a sweep",
    "report": "merge several sweeps into one report",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairdefer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", "-c", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config's master seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _emit_error(command: str, exc: Exception, code: int) -> int:
    problems = getattr(exc, "problems", [str(exc)])
    payload = {"error": type(exc).__name__, "command": command, "message": str(exc), "problems": problems}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    print(f"fairdefer {command}: error: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = parse_config(args.config, {"seed": args.seed, "output_dir": args.out},
                           needs_data=args.command not in DATA_FREE_COMMANDS)
        out = Outputs(cfg, args.command)
        result = HANDLERS[args.command](cfg, out, args)
        out.finish(started)
    except ConfigError as e:
        return _emit_error(args.command, e, 2)
    except (DataError, ValueError, KeyError, OSError) as e:
        return _emit_error(args.command, e, 1)
    print(json.dumps({"command": args.command, "output_dir": str(out.dir), "result": result},
                     sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
