"""Ordinal IDK head: one score, two thresholds, three outcomes (P, I, N)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fairdefer.nn_core import sigmoid


@dataclass
class OrdinalOutput:
    P: np.ndarray
    I: np.ndarray  # noqa: E741
    N: np.ndarray
    p: np.ndarray


def ordinal_outputs(x, t0: float, t1: float) -> OrdinalOutput:
    """Gamble weights for score(s) ``x``.

    ``P = σ(x - t1)``, ``I = σ(x - t0) - σ(x - t1)``, ``N = 1 - σ(x - t0)`` and
    the committed prediction ``p = P / (P + N)``.
    """
    if t0 > t1:
        raise ValueError(f"thresholds out of order: t0={t0} > t1={t1}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    P = sigmoid(x - t1)
    hi = sigmoid(x - t0)
    I = hi - P  # noqa: E741
    N = sigmoid(t0 - x)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = P / (P + N)
    # P + N underflows only deep inside a huge band; the score's side decides.
    p = np.where(np.isfinite(p), p, (x > 0.5 * (t0 + t1)).astype(float))
    return OrdinalOutput(P, I, N, p)


def ordinal_decisions(x, t0: float, t1: float):
    """``(pass_mask, hard_prediction)``: pass iff t0 < x < t1, else round p."""
    out = ordinal_outputs(x, t0, t1)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    passed = ((x > t0) & (x < t1)).astype(int)
    return passed, (out.p >= 0.5).astype(int)


def loss_punt(y, out: OrdinalOutput, gamma: float, reduction: str = "sum") -> float:
    """``-sum[Y log P + (1 - Y) log N - gamma log I]`` with clamped logs."""
    from fairdefer.models.losses import _punt_core

    y = np.asarray(y)
    return float(_punt_core(y, np.zeros_like(y), out.P, out.N, out.I, gamma, 0.0, reduction)[0])


def loss_fair_punt(y, a, out: OrdinalOutput, gamma: float, alpha_fair: float,
                   reduction: str = "sum") -> float:
    """Punt loss plus ``alpha_fair * (DI_reg(P) + DI_reg(N))``."""
    from fairdefer.models.losses import _punt_core

    return float(_punt_core(np.asarray(y), np.asarray(a), out.P, out.N, out.I, gamma,
                            alpha_fair, reduction)[0])
