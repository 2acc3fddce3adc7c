"""Shared numerics for the losses: probability clamping, Bernoulli
log-likelihood and the (optionally weighted) soft DI regularizer with
gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fairdefer.fairness_metrics import UndefinedCellError

PROB_FLOOR = 1e-7


def clamp(p):
    return np.clip(np.asarray(p, dtype=float), PROB_FLOOR, 1.0 - PROB_FLOOR)


def _interior(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return ((p > PROB_FLOOR) & (p < 1.0 - PROB_FLOOR)).astype(float)


def log_likelihood(y, p) -> np.ndarray:
    """Per-example ``y log p + (1 - y) log(1 - p)`` with p clamped."""
    y = np.asarray(y, dtype=float)
    pc = clamp(p)
    return y * np.log(pc) + (1 - y) * np.log1p(-pc)


def log_likelihood_grad(y, p) -> np.ndarray:
    """d log_likelihood / dp; zero where the clamp is active."""
    y = np.asarray(y, dtype=float)
    pc = clamp(p)
    return (y / pc - (1 - y) / (1 - pc)) * _interior(p)


def clamped_log(p):
    return np.log(clamp(p))


def clamped_log_grad(p):
    return _interior(p) / clamp(p)


def reduce_scale(reduction: str, n: int) -> float:
    if reduction == "sum":
        return 1.0
    if reduction == "mean":
        return 1.0 / n
    raise ValueError(f"unknown reduction {reduction!r}")


def weighted_di(y, a, p, w=None, squared: bool = False):
    """Soft DI of ``p`` with per-cell means weighted by ``w``.

    Returns ``(value, d_value/dp, d_value/dw)``.  With ``w = 1`` this is the
    plain soft DI (or its squared-component form).  A gap whose cells carry
    no weight contributes 0: it is the DI of an empty prediction set.
    An (A, Y) cell with no examples at all raises ``UndefinedCellError``.
    """
    y = np.asarray(y, dtype=int)
    a = np.asarray(a, dtype=int)
    p = np.asarray(p, dtype=float)
    w = np.ones_like(p) if w is None else np.asarray(w, dtype=float)
    dp = np.zeros_like(p)
    dw = np.zeros_like(p)
    value = 0.0
    for yv, sign_p in ((0, 1.0), (1, -1.0)):
        # Y=1 side measures 1 - p, hence the sign flip on its gap.
        masks = [(a == av) & (y == yv) for av in (0, 1)]
        for av, m in enumerate(masks):
            if not m.any():
                raise UndefinedCellError(f"A={av},Y={yv}")
        weights = [w[m].sum() for m in masks]
        if min(weights) <= 1e-12:
            continue
        means = [(w[m] * p[m]).sum() / W for m, W in zip(masks, weights)]
        gap = sign_p * (means[0] - means[1])
        if squared:
            value += 0.5 * gap**2
            outer = gap
        else:
            value += 0.5 * abs(gap)
            outer = 0.5 * np.sign(gap)
        for k, (m, W, mu) in enumerate(zip(masks, weights, means)):
            coef = outer * sign_p * (1.0 if k == 0 else -1.0) / W
            dp[m] += coef * w[m]
            dw[m] += coef * (p[m] - mu)
    return float(value), dp, dw


@dataclass
class SystemPrediction:
    """Per-example system quantities; ``y_system = (1 - s) y_model + s y_dm``."""

    y_model: np.ndarray
    y_dm: np.ndarray
    gate: np.ndarray
    gate_sample: np.ndarray
    y_system: np.ndarray
    example_ids: np.ndarray | None = None

    def __post_init__(self):
        for name in ("y_model", "y_dm", "gate", "y_system"):
            v = np.asarray(getattr(self, name), dtype=float)
            if np.any((v < 0) | (v > 1)):
                raise ValueError(f"{name} must lie in [0, 1]")
            setattr(self, name, v)
        self.gate_sample = np.asarray(self.gate_sample, dtype=int)

    @classmethod
    def compose(cls, y_model, y_dm, gate, gate_sample, example_ids=None):
        s = np.asarray(gate_sample, dtype=int)
        y_model = np.asarray(y_model, dtype=float)
        y_dm = np.asarray(y_dm, dtype=float)
        return cls(y_model, y_dm, gate, s, np.where(s == 1, y_dm, y_model), example_ids)

    def __len__(self):
        return len(self.y_system)
