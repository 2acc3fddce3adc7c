"""Binary Concrete (relaxed Bernoulli) gate samples."""
import numpy as np

from fairdefer.models.common import clamp


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def concrete_from_logit(logit_pi, u, temperature: float):
    """Relaxed sample given the gate logit directly (no clamping of pi needed)."""
    u = clamp(u)
    return _sigmoid((np.asarray(logit_pi, dtype=float) + _logit(u)) / temperature)


def concrete_sample(pi, temperature: float, u):
    """``sigmoid((logit(pi) + logit(u)) / temperature)``; pi and u clamped away from {0, 1}."""
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    return concrete_from_logit(_logit(clamp(pi)), u, temperature)


def hard_concrete(pi, u):
    """Zero-temperature limit: 1 iff logit(pi) + logit(u) > 0."""
    return ((_logit(clamp(pi)) + _logit(clamp(u))) > 0).astype(int)
