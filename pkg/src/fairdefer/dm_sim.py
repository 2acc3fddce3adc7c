"""Simulated downstream decision-makers (DMs).

A DM is a binary classifier trained like the baseline model but with the
side information Z appended to its inputs.  Variants: high accuracy, biased
(trained with a negative fairness coefficient), inconsistent (a fraction of
its hard predictions flipped on one subgroup), an oracle that returns Y and a
constant-loss DM whose log-likelihood is the same on every example.
"""
from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from fairdefer.data import Dataset
from fairdefer.models.common import clamp
from fairdefer.models.losses import LossKind, LossSpec
from fairdefer.nn_core import Batch, ModelParams, TrainConfig, forward, sigmoid, train

log = logging.getLogger(__name__)

BIASED_ALPHA = -0.1
DEFAULT_FLIP_PROB = 0.30


class Scenario(str, enum.Enum):
    HIGH_ACCURACY = "high_accuracy"
    HIGHLY_BIASED = "highly_biased"
    INCONSISTENT = "inconsistent"
    ORACLE = "oracle"
    CONSTANT_LOSS = "constant_loss"


@dataclass(frozen=True)
class Corruption:
    predicate: str = "aux_group"  # subgroup flipped: examples with aux_group == 1
    flip_prob: float = DEFAULT_FLIP_PROB
    seed: int = 0
    output: str = "hard"  # "hard": report flipped labels; "prob": report p, or 1 - p where flipped

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.output not in ("hard", "prob"):
            raise ValueError("corruption output must be 'hard' or 'prob'")


@dataclass(frozen=True)
class DmModel:
    scenario: Scenario
    base: ModelParams | None = None
    corruption: Corruption | None = None
    constant_loss_value: float | None = None
    alpha_fair: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if (self.corruption is not None) != (self.scenario is Scenario.INCONSISTENT):
            raise ValueError("corruption is present iff the scenario is inconsistent")
        if self.scenario in (Scenario.HIGH_ACCURACY, Scenario.HIGHLY_BIASED, Scenario.INCONSISTENT):
            if self.base is None:
                raise ValueError(f"{self.scenario.value} DM needs trained parameters")
        if self.scenario is Scenario.CONSTANT_LOSS:
            if self.constant_loss_value is None or self.constant_loss_value > 0:
                raise ValueError("constant-loss DM needs a value alpha <= 0")

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.value,
            "base": None if self.base is None else self.base.to_dict(),
            "corruption": None if self.corruption is None else self.corruption.__dict__,
            "constant_loss_value": self.constant_loss_value,
            "alpha_fair": self.alpha_fair,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DmModel":
        return cls(
            scenario=Scenario(d["scenario"]),
            base=None if d["base"] is None else ModelParams.from_dict(d["base"]),
            corruption=None if d["corruption"] is None else Corruption(**d["corruption"]),
            constant_loss_value=d["constant_loss_value"],
            alpha_fair=d.get("alpha_fair", 0.0),
        )


@dataclass
class DmPredictions:
    example_ids: np.ndarray
    prob: np.ndarray
    hard: np.ndarray

    def __post_init__(self):
        self.example_ids = np.asarray(self.example_ids).astype(str)
        self.prob = np.asarray(self.prob, dtype=float)
        self.hard = np.asarray(self.hard, dtype=int)

    def aligned(self, example_ids) -> "DmPredictions":
        """Reorder to ``example_ids``; every id must be present."""
        ids = np.asarray(example_ids).astype(str)
        pos = pd.Index(self.example_ids).get_indexer(ids)
        if (pos < 0).any():
            missing = ids[pos < 0][:5].tolist()
            raise KeyError(f"DM predictions missing example ids, e.g. {missing}")
        return DmPredictions(ids, self.prob[pos], self.hard[pos])

    def to_csv(self, path) -> None:
        df = pd.DataFrame({"example_id": self.example_ids, "y_dm_prob": self.prob, "y_dm_hard": self.hard})
        df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")

    @classmethod
    def from_csv(cls, path) -> "DmPredictions":
        df = pd.read_csv(path, dtype={"example_id": str}, float_precision="round_trip")
        missing = {"example_id", "y_dm_prob", "y_dm_hard"} - set(df.columns)
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        return cls(df["example_id"].to_numpy(), df["y_dm_prob"].to_numpy(), df["y_dm_hard"].to_numpy())


def _require_z(dataset: Dataset):
    if not dataset.has_side_info:
        raise ValueError("the DM needs side information Z, which this dataset lacks")


def train_dm(dataset: Dataset, alpha_fair: float, config: TrainConfig, init_seed: int,
             scenario: Scenario) -> DmModel:
    _require_z(dataset)
    batch = Batch(dataset.dm_features(), dataset.labels, dataset.sensitive, ids=dataset.example_ids)
    loss = LossSpec(LossKind.FAIR_BINARY, alpha_fair=alpha_fair)
    params, _ = train(batch, loss, config, init_seed)
    return DmModel(scenario, base=params, alpha_fair=alpha_fair)


def train_dm_high_accuracy(dataset: Dataset, config: TrainConfig = TrainConfig(), init_seed: int = 0):
    return train_dm(dataset, 0.0, config, init_seed, Scenario.HIGH_ACCURACY)


def train_dm_biased(dataset: Dataset, config: TrainConfig = TrainConfig(), init_seed: int = 0,
                    alpha_fair: float = BIASED_ALPHA):
    return train_dm(dataset, alpha_fair, config, init_seed, Scenario.HIGHLY_BIASED)


def make_inconsistent(dm: DmModel, corruption: Corruption = Corruption()) -> DmModel:
    return DmModel(Scenario.INCONSISTENT, base=dm.base, corruption=corruption, alpha_fair=dm.alpha_fair)


def corrupt_dm(hard_predictions, subgroup_mask, flip_prob: float, seed: int) -> np.ndarray:
    """Flip each hard prediction inside the subgroup with probability ``flip_prob``.

    One uniform draw per example (inside the subgroup or not), so a given
    example's fate depends only on the seed and its position.
    """
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError("flip_prob must lie in [0, 1]")
    hard = np.asarray(hard_predictions, dtype=int)
    mask = np.asarray(subgroup_mask, dtype=bool)
    if not mask.any():
        warnings.warn("corruption predicate selects no examples", stacklevel=2)
    u = np.random.default_rng(seed).uniform(size=len(hard))
    flip = mask & (u < flip_prob)
    return np.where(flip, 1 - hard, hard)


def constant_loss_dm(alpha: float) -> DmModel:
    return DmModel(Scenario.CONSTANT_LOSS, constant_loss_value=float(alpha))


def oracle_dm() -> DmModel:
    return DmModel(Scenario.ORACLE)


def constant_loss_probs(y, alpha: float) -> np.ndarray:
    """``Y e^alpha + (1 - Y)(1 - e^alpha)``, so that l(Y, y_dm) = alpha on every example."""
    if alpha > 0:
        raise ValueError("constant loss alpha must be <= 0 (log-likelihood form)")
    y = np.asarray(y, dtype=float)
    q = math.exp(alpha)
    return y * q + (1 - y) * (1 - q)


def dm_predict(dm: DmModel, dataset: Dataset) -> DmPredictions:
    """DM outputs on ``dataset``.

    Trained DMs report their probability.  Oracle DMs, and corrupted DMs by
    default, report hard labels as probabilities; with ``output="prob"`` a
    corrupted DM instead reports ``1 - p`` on the examples it flipped.
    """
    ids = dataset.example_ids
    y = dataset.labels
    if dm.scenario is Scenario.ORACLE:
        return DmPredictions(ids, y.astype(float), y)
    if dm.scenario is Scenario.CONSTANT_LOSS:
        p = constant_loss_probs(y, dm.constant_loss_value)
        return DmPredictions(ids, p, (p >= 0.5).astype(int))
    _require_z(dataset)
    p = sigmoid(np.asarray(forward(dm.base, dataset.dm_features())).reshape(-1))
    hard = (p >= 0.5).astype(int)
    if dm.scenario is Scenario.INCONSISTENT:
        c = dm.corruption
        if c.predicate != "aux_group" or dataset.aux_group is None:
            raise ValueError("the corruption predicate needs the dataset's aux_group")
        flipped = corrupt_dm(hard, dataset.aux_group == 1, c.flip_prob, c.seed)
        if c.output == "prob":
            return DmPredictions(ids, np.where(flipped != hard, 1.0 - p, p), flipped)
        return DmPredictions(ids, flipped.astype(float), flipped)
    return DmPredictions(ids, p, hard)


def oracle_log_likelihood() -> float:
    """Per-example log-likelihood of the (clamped) oracle DM."""
    return float(np.log(clamp(1.0)))


def save_dm(dm: DmModel, path) -> None:
    import json

    Path(path).write_text(json.dumps(dm.to_dict(), indent=2, sort_keys=True) + "\n")
