"""Post-hoc PASS band on top of a trained binary scorer.

A random search draws lower thresholds from pool scores below 0.5 and upper
thresholds from pool scores above 0.5, so 0.5 always sits inside the band,
and keeps the combination with the smallest hard-decision loss on the
selection split.  Unlike the log-likelihood losses, ``gamma`` here is a plain
nonnegative-is-penalty weight: ``error + gamma * deferral + alpha * DI``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from fairdefer.fairness_metrics import binarize, disparate_impact_hard
from fairdefer.models.common import SystemPrediction, weighted_di

GROUPS = (0, 1)


class Decision(enum.IntEnum):
    PREDICT0 = 0
    PREDICT1 = 1
    PASS = 2


@dataclass
class ThresholdSet:
    thresholds: dict[int, tuple[float, float]]
    selection_loss: float | None = field(default=None, compare=False)

    def __post_init__(self):
        self.thresholds = {int(g): (float(t0), float(t1)) for g, (t0, t1) in self.thresholds.items()}
        for g, (t0, t1) in self.thresholds.items():
            if t0 > t1:
                raise ValueError(f"group {g}: t0={t0} > t1={t1}")

    @classmethod
    def shared(cls, t0: float, t1: float) -> "ThresholdSet":
        return cls({g: (t0, t1) for g in GROUPS})

    def __getitem__(self, group: int) -> tuple[float, float]:
        try:
            return self.thresholds[int(group)]
        except KeyError:
            raise KeyError(f"unknown group {group!r}; known: {sorted(self.thresholds)}") from None

    def to_dict(self) -> dict:
        return {
            "thresholds": {str(g): list(t) for g, t in sorted(self.thresholds.items())},
            "selection_loss": self.selection_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdSet":
        return cls({int(g): tuple(t) for g, t in d["thresholds"].items()}, d.get("selection_loss"))


def apply_thresholds(scores, tset: ThresholdSet, groups, y_dm=None):
    """Decisions and the matching ``SystemPrediction``.

    ``score <= t0`` predicts 0, ``score >= t1`` predicts 1, strictly inside passes.
    Without ``y_dm`` the DM slot is filled with the model's own hard guess.
    """
    scores = np.atleast_1d(np.asarray(scores, dtype=float))
    groups = np.broadcast_to(np.asarray(groups, dtype=int), scores.shape)
    t0 = np.empty_like(scores)
    t1 = np.empty_like(scores)
    for g in np.unique(groups):
        lo, hi = tset[g]
        t0[groups == g] = lo
        t1[groups == g] = hi
    passed = (scores > t0) & (scores < t1)
    decisions = np.where(passed, Decision.PASS, np.where(scores >= t1, Decision.PREDICT1,
                                                         Decision.PREDICT0)).astype(int)
    y_model = np.where(passed, binarize(scores), decisions).astype(float)
    dm = y_model if y_dm is None else np.asarray(y_dm, dtype=float)
    sp = SystemPrediction.compose(y_model, dm, passed.astype(float), passed.astype(int))
    return decisions, sp


@dataclass(frozen=True)
class PosthocConfig:
    gamma: float = 0.0
    alpha_fair: float = 0.0
    n_samples: int = 1000
    per_group: bool = True
    mode: str = "defer"  # "defer": system error incl. DM; "reject": model's own mistakes only
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.mode not in ("defer", "reject"):
            raise ValueError("mode must be 'defer' or 'reject'")


def hard_loss(y, a, scores, groups, tset: ThresholdSet, y_dm, config: PosthocConfig) -> float:
    y = np.asarray(y, dtype=int)
    a = np.asarray(a, dtype=int)
    _, sp = apply_thresholds(scores, tset, groups, y_dm)
    return _hard_loss_from_system(y, a, sp, config)


def _hard_loss_from_system(y, a, sp: SystemPrediction, config: PosthocConfig) -> float:
    s = sp.gate_sample
    defer_rate = s.mean()
    if config.mode == "defer":
        y_hat = binarize(sp.y_system)
        err = np.mean(y_hat != y)
        di = disparate_impact_hard(y, a, y_hat)[0] if config.alpha_fair else 0.0
    else:
        y_hat = binarize(sp.y_model)
        err = np.mean((y_hat != y) & (s == 0))
        di = weighted_di(y, a, y_hat.astype(float), 1.0 - s)[0] if config.alpha_fair else 0.0
    return float(err + config.gamma * defer_rate + config.alpha_fair * di)


def _sample_pairs(pool: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    lo = pool[pool < 0.5]
    hi = pool[pool > 0.5]
    if len(lo) and len(hi):
        return np.column_stack([rng.choice(lo, k), rng.choice(hi, k)])
    # Everything on one side of 0.5: draw both thresholds from the whole pool.
    if not len(pool):
        raise ValueError("empty threshold pool")
    return np.sort(rng.choice(pool, (k, 2)), axis=1)


def posthoc_threshold_search(scores, y, a, y_dm, config: PosthocConfig,
                             pool_scores=None, pool_groups=None) -> ThresholdSet:
    """Random search over PASS bands; see the module docstring.

    ``scores``/``y``/``a``/``y_dm`` form the selection split.  Candidate
    thresholds come from ``pool_scores`` (grouped by ``pool_groups``), by
    default the selection scores themselves.  Ties keep the earliest draw.
    """
    scores = np.asarray(scores, dtype=float)
    y = np.asarray(y, dtype=int)
    a = np.asarray(a, dtype=int)
    if pool_scores is None:
        pool_scores, pool_groups = scores, a
    pool_scores = np.asarray(pool_scores, dtype=float)
    pool_groups = np.asarray(pool_groups, dtype=int)
    rng = np.random.default_rng(config.seed)
    k = config.n_samples
    if config.per_group:
        draws = {g: _sample_pairs(pool_scores[pool_groups == g], k, rng) for g in GROUPS}
    else:
        shared = _sample_pairs(pool_scores, k, rng)
        draws = {g: shared for g in GROUPS}

    best, best_loss = None, np.inf
    for i in range(k):
        tset = ThresholdSet({g: tuple(draws[g][i]) for g in GROUPS})
        loss = hard_loss(y, a, scores, a, tset, y_dm, config)
        if loss < best_loss:
            best, best_loss = tset, loss
    best.selection_loss = float(best_loss)
    return best
