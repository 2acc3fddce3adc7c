"""Experiment harness: compose model + DM into system predictions, evaluate
on the test split, sweep hyperparameters with median-of-runs aggregation,
extract Pareto fronts and deferral-rate breakdowns.
"""
from __future__ import annotations

import concurrent.futures as cf
import csv
import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from fairdefer import __version__
from fairdefer._splitting import stratified_split_indices
from fairdefer.data import Dataset
from fairdefer.dm_sim import (
    Corruption,
    DmModel,
    DmPredictions,
    Scenario,
    constant_loss_dm,
    dm_predict,
    make_inconsistent,
    oracle_dm,
    oracle_log_likelihood,
    train_dm_biased,
    train_dm_high_accuracy,
)
from fairdefer.fairness_metrics import (
    MetricsRecord,
    UndefinedCellError,
    disparate_impact_hard,
    error_rate,
    lower_median,
    median_record,
    pareto_indices,
    subgroup_accuracies,
    subgroup_key,
)
from fairdefer.models import (
    BnnConfig,
    LossKind,
    LossSpec,
    PosthocConfig,
    SystemPrediction,
    TrainedModel,
    bnn_train,
    posthoc_threshold_search,
)
from fairdefer.nn_core import NonFiniteError, TrainConfig, forward, sigmoid, train

log = logging.getLogger(__name__)

FAMILIES = ("binary", "fair_binary", "reject", "defer", "posthoc", "punt", "fair_punt", "bnn")
COMPAS_BINS = ((0.0, 0.3), (0.3, 0.7), (0.7, 1.0))
HEALTH_BINS = ((0.0, 0.2), (0.2, 0.4), (0.4, 1.0))


# ---------------------------------------------------------------- system composition


def compose_system(y_model, gate, s, dm: DmPredictions, example_ids=None) -> SystemPrediction:
    """``y = (1 - s) y_model + s y_dm`` with the DM aligned by example id."""
    if example_ids is not None:
        dm = dm.aligned(example_ids)
    elif len(dm.prob) != len(np.asarray(y_model)):
        raise ValueError("model and DM outputs differ in length and no ids were given")
    return SystemPrediction.compose(y_model, dm.prob, gate, s, dm.example_ids)


def evaluate_system(sp: SystemPrediction, y, a, aux_group=None) -> MetricsRecord:
    """Every MetricsRecord field from the system's test-split predictions.

    Quantities whose conditioning cell is empty come back as None and are
    named in ``undefined``.
    """
    undefined = []
    err = error_rate(y, sp.y_system)
    try:
        di, fp, fn = disparate_impact_hard(y, a, sp.y_system)
    except UndefinedCellError as e:
        di = fp = fn = None
        undefined.append(f"di:{e.cell}")
    s = sp.gate_sample
    overall = float(np.mean(s))
    per_a = _group_rates(s, a, "A", undefined)
    per_aux = [None, None]
    subgroup, msa = {}, None
    if aux_group is not None:
        per_aux = _group_rates(s, aux_group, "aux", undefined)
        try:
            accs = subgroup_accuracies(y, sp.y_system, a, aux_group)
            subgroup = {subgroup_key(*k): v for k, v in accs.items()}
            msa = min(accs.values())
        except UndefinedCellError as e:
            undefined.append(f"msa:{e.cell}")
    return MetricsRecord(
        error_rate=err,
        di=di,
        di_fp_component=fp,
        di_fn_component=fn,
        deferral_rate=overall,
        deferral_a0=per_a[0],
        deferral_a1=per_a[1],
        deferral_aux0=per_aux[0],
        deferral_aux1=per_aux[1],
        subgroup_accuracy=subgroup,
        min_subgroup_accuracy=msa,
        undefined=undefined,
    )


def _group_rates(s, groups, name, undefined) -> list:
    groups = np.asarray(groups)
    rates = []
    for v in (0, 1):
        m = groups == v
        rates.append(float(s[m].mean()) if m.any() else None)
        if not m.any():
            undefined.append(f"deferral:{name}={v}")
    return rates


# ---------------------------------------------------------------- experiment context


@dataclass
class Experiment:
    """Train/test data plus the scenario's DM outputs on both splits."""

    train: Dataset
    test: Dataset
    scenario: str
    dm_train: DmPredictions
    dm_test: DmPredictions
    dm: DmModel | None = None
    name: str = ""

    def __post_init__(self):
        overlap = set(map(str, self.train.example_ids)) & set(map(str, self.test.example_ids))
        if overlap:
            raise ValueError(f"train and test share {len(overlap)} example id(s)")
        self.dm_train = self.dm_train.aligned(self.train.example_ids)
        self.dm_test = self.dm_test.aligned(self.test.example_ids)

    def provenance(self) -> dict:
        return {
            "train_hash": self.train.content_hash(),
            "test_hash": self.test.content_hash(),
            "n_train": len(self.train),
            "n_test": len(self.test),
            "scenario": self.scenario,
            "code_version": __version__,
        }


def build_experiment(train_ds: Dataset, test_ds: Dataset, scenario: str, config: TrainConfig,
                     seed: int, flip_prob: float = 0.3, constant_loss: float | None = None,
                     name: str = "", corrupted_output: str = "hard") -> Experiment:
    """Train (or construct) the scenario's DM and record its predictions."""
    scenario = Scenario(scenario)
    cfg = replace(config, seed=seed)
    if scenario is Scenario.HIGH_ACCURACY:
        dm = train_dm_high_accuracy(train_ds, cfg, seed)
    elif scenario is Scenario.HIGHLY_BIASED:
        dm = train_dm_biased(train_ds, cfg, seed)
    elif scenario is Scenario.INCONSISTENT:
        dm = make_inconsistent(train_dm_high_accuracy(train_ds, cfg, seed),
                               Corruption(flip_prob=flip_prob, seed=seed, output=corrupted_output))
    elif scenario is Scenario.ORACLE:
        dm = oracle_dm()
    else:
        dm = constant_loss_dm(math.log(0.8) if constant_loss is None else constant_loss)
    return Experiment(train_ds.model_view(), test_ds.model_view(), scenario.value,
                      dm_predict(dm, train_ds), dm_predict(dm, test_ds), dm, name)


# ---------------------------------------------------------------- training one run


@dataclass(frozen=True)
class FamilyOptions:
    temperature: float = 0.5
    stop_gradient: bool = False
    di_form: str = "soft_mean"
    gate_estimator: str = "concrete"
    posthoc_mode: str = "defer"
    posthoc_per_group: bool = True
    posthoc_samples: int = 1000
    posthoc_selection: str = "validation"  # or "test_half"
    bnn_prior_std: float = 0.1
    bnn_samples: int = 10

    def __post_init__(self):
        if self.posthoc_selection not in ("validation", "test_half"):
            raise ValueError("posthoc_selection must be 'validation' or 'test_half'")


@dataclass(frozen=True)
class SweepSetting:
    """One grid point.  For the ``bnn`` family ``gamma`` is the rho threshold
    above which the model defers; for ``posthoc`` it is the hard-loss
    deferral weight."""

    family: str
    alpha_fair: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")


def loss_for(setting: SweepSetting, options: FamilyOptions) -> LossSpec:
    fam = setting.family
    kind = {
        "binary": LossKind.FAIR_BINARY,
        "fair_binary": LossKind.FAIR_BINARY,
        "posthoc": LossKind.FAIR_BINARY,
        "bnn": LossKind.FAIR_BINARY,
        "reject": LossKind.REJECT,
        "defer": LossKind.DEFER,
        "punt": LossKind.PUNT,
        "fair_punt": LossKind.FAIR_PUNT,
    }[fam]
    alpha = 0.0 if fam in ("binary", "punt", "bnn") else setting.alpha_fair
    gated = kind in (LossKind.REJECT, LossKind.DEFER)
    return LossSpec(
        kind=kind,
        alpha_fair=alpha,
        gamma=setting.gamma if kind not in (LossKind.FAIR_BINARY,) else 0.0,
        temperature=options.temperature,
        stop_gradient=options.stop_gradient,
        di_form=options.di_form if gated else "soft_mean",
        gate_estimator=options.gate_estimator,
    )


def _fit_val_split(ds: Dataset, config: TrainConfig):
    rng = np.random.default_rng(config.seed)
    keys = ds.labels * 2 + ds.sensitive
    return stratified_split_indices(keys, config.validation_fraction, rng)


def train_model(exp: Experiment, setting: SweepSetting, options: FamilyOptions,
                config: TrainConfig, seed: int, dm_train_prob=None) -> TrainedModel:
    """Train one model of ``setting.family`` on the experiment's training split.

    ``dm_train_prob`` overrides the DM outputs the defer loss trains against
    (used for oracle-at-training experiments).
    """
    cfg = replace(config, seed=seed)
    ds = exp.train
    dm_prob = exp.dm_train.prob if dm_train_prob is None else np.asarray(dm_train_prob, float)
    loss = loss_for(setting, options)
    fam = setting.family

    if fam == "bnn":
        post, hist = bnn_train(ds.to_batch(), BnnConfig(cfg, options.bnn_prior_std,
                                                         options.bnn_samples), seed)
        return TrainedModel("bnn", seed, bnn=post, rho_threshold=setting.gamma,
                            extra={"best_epoch": hist.best_epoch})

    fit_idx, val_idx = _fit_val_split(ds, cfg)
    batch = ds.to_batch(dm_prob if loss.kind is LossKind.DEFER else None)
    params, hist = train(batch.subset(fit_idx), loss, cfg, seed, validation=batch.subset(val_idx))
    extra = {"best_epoch": hist.best_epoch, "epochs": len(hist.val_loss) - 1}
    if fam != "posthoc":
        return TrainedModel(fam, seed, params=params, loss=loss, extra=extra)

    pcfg = PosthocConfig(gamma=setting.gamma, alpha_fair=setting.alpha_fair,
                         n_samples=options.posthoc_samples, per_group=options.posthoc_per_group,
                         mode=options.posthoc_mode, seed=seed)
    fit_scores = sigmoid(np.asarray(forward(params, ds.features[fit_idx]))[:, 0])
    if options.posthoc_selection == "validation":
        sel_x, sel_y, sel_a = ds.features[val_idx], ds.labels[val_idx], ds.sensitive[val_idx]
        sel_dm = exp.dm_train.prob[val_idx]
    else:
        sel, _ = _test_halves(exp, seed)
        t = exp.test
        sel_x, sel_y, sel_a, sel_dm = t.features[sel], t.labels[sel], t.sensitive[sel], exp.dm_test.prob[sel]
    sel_scores = sigmoid(np.asarray(forward(params, sel_x))[:, 0])
    tset = posthoc_threshold_search(sel_scores, sel_y, sel_a, sel_dm, pcfg,
                                    pool_scores=fit_scores, pool_groups=ds.sensitive[fit_idx])
    return TrainedModel("posthoc", seed, params=params, loss=loss, thresholds=tset, extra=extra)


def _test_halves(exp: Experiment, seed: int):
    rng = np.random.default_rng([seed, 7])
    keys = exp.test.labels * 2 + exp.test.sensitive
    return stratified_split_indices(keys, 0.5, rng)


def evaluate_model(exp: Experiment, model: TrainedModel, options: FamilyOptions | None = None,
                   dataset: Dataset | None = None, dm: DmPredictions | None = None) -> MetricsRecord:
    """Test-split metrics of the model composed with the experiment's DM."""
    ds = exp.test if dataset is None else dataset
    dm = exp.dm_test if dm is None else dm
    if (model.family == "posthoc" and options is not None
            and options.posthoc_selection == "test_half" and dataset is None):
        _, keep = _test_halves(exp, model.seed)
        ds = ds.subset(keep)
    y_model, gate, s = model.outputs(ds.features, ds.sensitive)
    sp = compose_system(y_model, gate, s, dm, ds.example_ids)
    return evaluate_system(sp, ds.labels, ds.sensitive, ds.aux_group)


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepPoint:
    setting: SweepSetting
    scenario: str
    run_seeds: list[int]
    per_run_metrics: list[MetricsRecord]
    median_metrics: MetricsRecord | None
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "setting": asdict(self.setting),
            "scenario": self.scenario,
            "run_seeds": list(self.run_seeds),
            "per_run_metrics": [m.to_dict() for m in self.per_run_metrics],
            "median_metrics": None if self.median_metrics is None else self.median_metrics.to_dict(),
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepPoint":
        return cls(
            setting=SweepSetting(**d["setting"]),
            scenario=d["scenario"],
            run_seeds=d["run_seeds"],
            per_run_metrics=[MetricsRecord.from_dict(m) for m in d["per_run_metrics"]],
            median_metrics=None if d["median_metrics"] is None else MetricsRecord.from_dict(d["median_metrics"]),
            failures=d.get("failures", []),
        )


def derive_seeds(master_seed: int, count: int) -> list[int]:
    """Run seeds shared by every setting of a sweep (matched seeds)."""
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(count)]


def _retry_seed(master_seed: int, run: int) -> int:
    return int(np.random.SeedSequence([master_seed, run, 1]).generate_state(1)[0])


_WORKER_STATE: dict = {}


def _init_worker(exp, options, config):
    _WORKER_STATE.update(exp=exp, options=options, config=config)


def _run_task(task):
    setting, seed, retry_seed = task
    exp, options, config = _WORKER_STATE["exp"], _WORKER_STATE["options"], _WORKER_STATE["config"]
    attempts = []
    for s in (seed, retry_seed):
        try:
            model = train_model(exp, setting, options, config, s)
            rec = evaluate_model(exp, model, options)
            if rec.di is None:
                raise UndefinedCellError(",".join(rec.undefined))
            return s, rec, attempts
        except (NonFiniteError, FloatingPointError, UndefinedCellError) as e:
            attempts.append({"seed": s, "error": f"{type(e).__name__}: {e}"})
    return None, None, attempts


def run_sweep(exp: Experiment, settings, runs_per_setting: int = 5, master_seed: int = 0,
              options: FamilyOptions = FamilyOptions(), config: TrainConfig = TrainConfig(),
              jobs: int = 1) -> list[SweepPoint]:
    """Train ``runs_per_setting`` models per setting and aggregate test metrics.

    A failed run (non-finite loss or undefined test DI) is retried once with a
    fresh seed; a setting with more than half its runs failed is dropped.
    Results are merged in grid order, so ``jobs`` never changes the output.
    """
    settings = list(settings)
    if not settings:
        raise ValueError("empty sweep grid")
    seeds = derive_seeds(master_seed, runs_per_setting)
    tasks = [(st, sd, _retry_seed(master_seed, r)) for st in settings for r, sd in enumerate(seeds)]
    if jobs <= 1:
        _init_worker(exp, options, config)
        results = [_run_task(t) for t in tasks]
    else:
        with cf.ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                    initargs=(exp, options, config)) as pool:
            results = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))

    points = []
    for i, st in enumerate(settings):
        chunk = results[i * runs_per_setting:(i + 1) * runs_per_setting]
        used = [s for s, rec, _ in chunk if rec is not None]
        recs = [rec for _, rec, _ in chunk if rec is not None]
        failures = [a for _, _, att in chunk for a in att]
        n_failed = runs_per_setting - len(recs)
        if n_failed * 2 > runs_per_setting:
            warnings.warn(f"dropping setting {st}: {n_failed}/{runs_per_setting} runs failed", stacklevel=2)
            continue
        points.append(SweepPoint(st, exp.scenario, used, recs, median_record(recs), failures))
    return points


# ---------------------------------------------------------------- fronts and bins


def front_indices(points: list[SweepPoint]) -> list[int]:
    return pareto_indices([p.median_metrics.error_rate for p in points],
                          [p.median_metrics.di for p in points])


def bin_index(rate: float, bins) -> int | None:
    """Half-open ``[a, b)`` bins, the last one closed on the right."""
    for k, (lo, hi) in enumerate(bins):
        last = k == len(bins) - 1
        if lo <= rate < hi or (last and rate == hi):
            return k
    return None


def deferral_rate_breakdown(points: list[SweepPoint], bins=COMPAS_BINS) -> list[dict]:
    """Per deferral bin: member point indices and their Pareto front (indices into ``points``)."""
    out = []
    members = {k: [] for k in range(len(bins))}
    for i, p in enumerate(points):
        k = bin_index(p.median_metrics.deferral_rate, bins)
        if k is not None:
            members[k].append(i)
    for k, (lo, hi) in enumerate(bins):
        idx = members[k]
        sub = [points[i] for i in idx]
        front = [idx[j] for j in front_indices(sub)] if sub else []
        out.append({"bin": [lo, hi], "members": idx, "front": front})
    return out


# ---------------------------------------------------------------- oracle equivalence


def oracle_equivalence_experiment(exp: Experiment, gamma_rejects, alpha_fairs=(0.0,),
                                  runs: int = 5, master_seed: int = 0,
                                  options: FamilyOptions = FamilyOptions(),
                                  config: TrainConfig = TrainConfig()) -> dict:
    """Reject models vs defer models trained against an oracle DM, evaluated
    with the experiment's own DM at test time.

    The defer arm uses ``gamma_defer = gamma_reject - l_oracle`` (the oracle's
    clamped per-example log-likelihood) so the unregularized objectives agree
    exactly.  Both arms share run seeds.
    """
    ll_oracle = oracle_log_likelihood()
    oracle_prob = oracle_dm_probs(exp.train.labels)
    seeds = derive_seeds(master_seed, runs)
    rows = []
    for alpha in alpha_fairs:
        for g in gamma_rejects:
            rej = SweepSetting("reject", alpha, g)
            dfr = SweepSetting("defer", alpha, g - ll_oracle)
            arms = {"reject": [], "defer": []}
            for s in seeds:
                arms["reject"].append(evaluate_model(exp, train_model(exp, rej, options, config, s), options))
                arms["defer"].append(evaluate_model(
                    exp, train_model(exp, dfr, options, config, s, dm_train_prob=oracle_prob), options))
            med = {k: median_record(v) for k, v in arms.items()}
            rows.append({
                "alpha_fair": alpha,
                "gamma_reject": g,
                "gamma_defer": g - ll_oracle,
                "median_reject": med["reject"].to_dict(),
                "median_defer": med["defer"].to_dict(),
                "error_diff": abs(med["defer"].error_rate - med["reject"].error_rate),
                "di_diff": abs(med["defer"].di - med["reject"].di),
                "deferral_diff": abs(med["defer"].deferral_rate - med["reject"].deferral_rate),
                "paired_error_diffs": [d.error_rate - r.error_rate for d, r in zip(arms["defer"], arms["reject"])],
                "paired_di_diffs": [d.di - r.di for d, r in zip(arms["defer"], arms["reject"])],
            })
    return {"run_seeds": seeds, "oracle_log_likelihood": ll_oracle, "settings": rows,
            "provenance": exp.provenance()}


def oracle_dm_probs(y) -> np.ndarray:
    return np.asarray(y, dtype=float)


# ---------------------------------------------------------------- reports


CURVE_COLUMNS = ["family", "scenario", "alpha_fair", "gamma", "error", "di", "di_fp", "di_fn",
                 "deferral_rate", "deferral_a0", "deferral_a1", "deferral_aux0", "deferral_aux1",
                 "msa", "runs"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def curve_rows(points: list[SweepPoint]) -> list[list[str]]:
    rows = []
    for p in points:
        m = p.median_metrics
        rows.append([_fmt(x) for x in (
            p.setting.family, p.scenario, float(p.setting.alpha_fair), float(p.setting.gamma),
            m.error_rate, m.di, m.di_fp_component, m.di_fn_component, m.deferral_rate,
            m.deferral_a0, m.deferral_a1, m.deferral_aux0, m.deferral_aux1,
            m.min_subgroup_accuracy, len(p.per_run_metrics))])
    return rows


def curves_csv(points: list[SweepPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    w.writerows(curve_rows(points))
    return buf.getvalue()


@dataclass
class ExperimentReport:
    scenario: str
    model_family: str
    points: list[SweepPoint]
    pareto: list[int]
    provenance: dict

    def __post_init__(self):
        if any(not 0 <= i < len(self.points) for i in self.pareto):
            raise ValueError("pareto index out of range")

    @classmethod
    def from_points(cls, scenario, family, points, provenance) -> "ExperimentReport":
        return cls(scenario, family, points, front_indices(points) if points else [], provenance)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "model_family": self.model_family,
            "points": [p.to_dict() for p in self.points],
            "pareto_indices": self.pareto,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["scenario"], d["model_family"], [SweepPoint.from_dict(p) for p in d["points"]],
                   d["pareto_indices"], d["provenance"])


def subgroup_deferral_summary(points: list[SweepPoint], family: str = "defer",
                              band=(0.2, 0.8)) -> dict:
    """Median per-aux-group deferral over runs whose overall deferral is in ``band``.

    aux group 0 is the DM-reliable subgroup, 1 the corrupted one.
    """
    recs = [m for p in points if p.setting.family == family for m in p.per_run_metrics
            if band[0] <= m.deferral_rate <= band[1]
            and m.deferral_aux0 is not None and m.deferral_aux1 is not None]
    if not recs:
        return {"runs": 0, "reliable": None, "unreliable": None}
    return {
        "runs": len(recs),
        "reliable": lower_median([m.deferral_aux0 for m in recs]),
        "unreliable": lower_median([m.deferral_aux1 for m in recs]),
    }
