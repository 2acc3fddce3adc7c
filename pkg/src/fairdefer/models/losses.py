"""Training objectives.

Sign convention: ``gamma`` sits inside the negated log-likelihood bracket for
the reject/defer losses, ``-sum[(1 - s) l_M + s l_D + s * gamma]``.  Log
likelihoods are <= 0, so a deferral *penalty* is a negative gamma.  The punt
loss keeps its own form, ``-sum[Y log P + (1 - Y) log N - gamma log I]``.

Each loss exists twice: a plain function on probabilities (value only, used
by tests and reports) and a ``LossSpec`` that the trainer calls with raw
network outputs and that returns exact gradients w.r.t. those outputs.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

from fairdefer.fairness_metrics import expected_squared_di_with_grad
from fairdefer.models.common import (
    clamped_log,
    clamped_log_grad,
    log_likelihood,
    log_likelihood_grad,
    reduce_scale,
    weighted_di,
)
from fairdefer.models.concrete import concrete_from_logit
from fairdefer.nn_core import HeadKind, LossEval, sigmoid, softplus


class LossKind(str, enum.Enum):
    FAIR_BINARY = "fair_binary"
    REJECT = "reject"
    DEFER = "defer"
    PUNT = "punt"
    FAIR_PUNT = "fair_punt"


class DiForm(str, enum.Enum):
    SOFT_MEAN = "soft_mean"
    SQUARED_EXPECTED = "squared_expected"


class GateEstimator(str, enum.Enum):
    CONCRETE = "concrete"
    EXPECTED = "expected"


HEAD_FOR_KIND = {
    LossKind.FAIR_BINARY: HeadKind.BINARY,
    LossKind.REJECT: HeadKind.GATED,
    LossKind.DEFER: HeadKind.GATED,
    LossKind.PUNT: HeadKind.ORDINAL,
    LossKind.FAIR_PUNT: HeadKind.ORDINAL,
}


# ---------------------------------------------------------------- plain forms


def _fair_binary_core(y, a, p, alpha_fair, reduction):
    k = reduce_scale(reduction, len(y))
    value = -k * log_likelihood(y, p).sum()
    dp = -k * log_likelihood_grad(y, p)
    if alpha_fair != 0:
        di, ddi, _ = weighted_di(y, a, p)
        value += alpha_fair * di
        dp = dp + alpha_fair * ddi
    return value, dp


def loss_fair_binary(y, a, p, alpha_fair: float, reduction: str = "sum") -> float:
    """Negative log-likelihood plus ``alpha_fair`` times the soft DI."""
    return float(_fair_binary_core(np.asarray(y), np.asarray(a), np.asarray(p, float),
                                   alpha_fair, reduction)[0])


def _reject_core(y, a, m, s, gamma, alpha_fair, di_form, reduction):
    """Value and gradients w.r.t. (m, s); ``s`` is pi (closed form) or a relaxed sample."""
    k = reduce_scale(reduction, len(y))
    ll = log_likelihood(y, m)
    value = -k * np.sum((1 - s) * ll + s * gamma)
    dm = -k * (1 - s) * log_likelihood_grad(y, m)
    ds = k * (ll - gamma)
    if alpha_fair != 0:
        # Fairness of the predictions the model actually makes: cells weighted by 1 - s.
        r, dr_dm, dr_dw = weighted_di(y, a, m, 1 - s, squared=di_form is DiForm.SQUARED_EXPECTED)
        value += alpha_fair * r
        dm = dm + alpha_fair * dr_dm
        ds = ds - alpha_fair * dr_dw
    return value, dm, ds


def loss_reject(y, y_model, pi, gamma_reject: float, alpha_fair: float = 0.0, a=None,
                di_form="soft_mean", reduction: str = "sum") -> float:
    """Closed-form expectation over ``s ~ Ber(pi)`` of the rejection loss."""
    if alpha_fair != 0 and a is None:
        raise ValueError("the fairness regularizer needs the sensitive attribute")
    y = np.asarray(y)
    a = np.zeros_like(y) if a is None else np.asarray(a)
    _check_prob("pi", pi)
    return float(_reject_core(y, a, np.asarray(y_model, float), np.asarray(pi, float),
                              gamma_reject, alpha_fair, DiForm(di_form), reduction)[0])


def _defer_core(y, a, m, d, s, gamma, alpha_fair, di_form, reduction, pi_for_sq=None):
    """Value and gradients w.r.t. (m, s, pi_for_sq).

    The squared-expected regularizer is an expectation over the gate, so it
    always uses pi (``pi_for_sq``) even when ``s`` is a relaxed sample.
    """
    k = reduce_scale(reduction, len(y))
    ll_m = log_likelihood(y, m)
    ll_d = log_likelihood(y, d)
    value = -k * np.sum((1 - s) * ll_m + s * ll_d + s * gamma)
    dm = -k * (1 - s) * log_likelihood_grad(y, m)
    ds = k * (ll_m - ll_d - gamma)
    dpi = np.zeros_like(s)
    if alpha_fair != 0:
        if di_form is DiForm.SOFT_MEAN:
            mix = (1 - s) * m + s * d
            r, dr, _ = weighted_di(y, a, mix)
            dm = dm + alpha_fair * dr * (1 - s)
            ds = ds + alpha_fair * dr * (d - m)
        else:
            pi = s if pi_for_sq is None else pi_for_sq
            r, dr_dm, dr_dpi = expected_squared_di_with_grad(y, a, m, d, pi)
            dm = dm + alpha_fair * dr_dm
            if pi_for_sq is None:
                ds = ds + alpha_fair * dr_dpi
            else:
                dpi = alpha_fair * dr_dpi
        value += alpha_fair * r
    return value, dm, ds, dpi


def loss_defer(y, a, y_model, y_dm, pi, gamma_defer: float, alpha_fair: float = 0.0,
               di_form="soft_mean", reduction: str = "sum") -> float:
    """Closed-form expectation over ``s ~ Ber(pi)`` of the learning-to-defer loss."""
    if y_dm is None:
        raise ValueError("loss_defer needs the decision-maker's predictions (y_dm)")
    _check_prob("pi", pi)
    return float(_defer_core(np.asarray(y), np.asarray(a), np.asarray(y_model, float),
                             np.asarray(y_dm, float), np.asarray(pi, float), gamma_defer,
                             alpha_fair, DiForm(di_form), reduction)[0])


def _check_prob(name, v):
    v = np.asarray(v, dtype=float)
    if np.any((v < 0) | (v > 1)):
        raise ValueError(f"{name} must lie in [0, 1]")


# ---------------------------------------------------------------- ordinal / punt


def _punt_core(y, a, P, N, I, gamma, alpha_fair, reduction):
    """Value and gradients w.r.t. (P, N, I) treated as independent inputs."""
    k = reduce_scale(reduction, len(y))
    y = np.asarray(y, dtype=float)
    value = -k * np.sum(y * clamped_log(P) + (1 - y) * clamped_log(N) - gamma * clamped_log(I))
    dP = -k * y * clamped_log_grad(P)
    dN = -k * (1 - y) * clamped_log_grad(N)
    dI = k * gamma * clamped_log_grad(I)
    if alpha_fair != 0:
        rp, drp, _ = weighted_di(y.astype(int), a, P)
        rn, drn, _ = weighted_di(y.astype(int), a, N)
        value += alpha_fair * (rp + rn)
        dP = dP + alpha_fair * drp
        dN = dN + alpha_fair * drn
    return value, dP, dN, dI


# ---------------------------------------------------------------- LossSpec


@dataclass(frozen=True)
class LossSpec:
    """A trainable objective: which loss, its coefficients and estimator options.

    ``gate_estimator`` applies to reject/defer: ``concrete`` trains on one
    relaxed gate sample per example per epoch, ``expected`` on the closed-form
    expectation.  Validation always uses the closed form.
    """

    kind: LossKind = LossKind.FAIR_BINARY
    alpha_fair: float = 0.0
    gamma: float = 0.0
    temperature: float = 0.5
    stop_gradient: bool = False
    di_form: DiForm = DiForm.SOFT_MEAN
    gate_estimator: GateEstimator = GateEstimator.CONCRETE
    reduction: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        object.__setattr__(self, "di_form", DiForm(self.di_form))
        object.__setattr__(self, "gate_estimator", GateEstimator(self.gate_estimator))
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")
        if self.di_form is DiForm.SQUARED_EXPECTED and self.kind not in (LossKind.REJECT, LossKind.DEFER):
            raise ValueError("di_form squared_expected is only valid for reject/defer losses")
        for name in ("alpha_fair", "gamma"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def head_kind(self) -> HeadKind:
        return HEAD_FOR_KIND[self.kind]

    @property
    def is_gated(self) -> bool:
        return self.kind in (LossKind.REJECT, LossKind.DEFER)

    @property
    def needs_noise(self) -> bool:
        return self.is_gated and self.gate_estimator is GateEstimator.CONCRETE

    def detached_outputs(self, head_kind) -> tuple[int, ...]:
        if self.is_gated and self.stop_gradient:
            return (1,)
        return ()

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("kind", "di_form", "gate_estimator"):
            d[k] = d[k].value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        return cls(**d)

    # -- trainer interface

    def evaluate(self, params, outputs, batch, noise=None) -> LossEval:
        outputs = np.asarray(outputs, dtype=float).reshape(len(batch), -1)
        y, a = batch.labels, batch.sensitive
        if self.kind is LossKind.FAIR_BINARY:
            p = sigmoid(outputs[:, 0])
            value, dp = _fair_binary_core(y, a, p, self.alpha_fair, self.reduction)
            return LossEval(value, (dp * p * (1 - p))[:, None])

        if self.is_gated:
            return self._evaluate_gated(outputs, batch, noise)

        t0, t1 = params.thresholds
        x = outputs[:, 0]
        P = sigmoid(x - t1)
        N = sigmoid(t0 - x)
        I = sigmoid(x - t0) - P
        alpha = self.alpha_fair if self.kind is LossKind.FAIR_PUNT else 0.0
        value, dP, dN, dI = _punt_core(y, a, P, N, I, self.gamma, alpha, self.reduction)
        # I = 1 - P - N, so route its gradient through P and N.
        gP = dP - dI
        gN = dN - dI
        jP = P * (1 - P)
        jN = N * (1 - N)
        d_x = gP * jP - gN * jN
        d_t0 = np.sum(gN * jN)
        d_t1 = -np.sum(gP * jP)
        d_raw = np.array([d_t0 + d_t1, d_t1 * sigmoid(params.thresholds_raw[1])])
        return LossEval(value, d_x[:, None], d_raw)

    def _evaluate_gated(self, outputs, batch, noise, force_expected=False) -> LossEval:
        y, a = batch.labels, batch.sensitive
        m = sigmoid(outputs[:, 0])
        z_pi = outputs[:, 1]
        pi = sigmoid(z_pi)
        sampled = self.gate_estimator is GateEstimator.CONCRETE and not force_expected
        if sampled:
            if noise is None:
                raise ValueError("the concrete gate estimator needs uniform noise")
            s = concrete_from_logit(z_pi, noise, self.temperature)
            ds_dz = s * (1 - s) / self.temperature
        else:
            s = pi
            ds_dz = pi * (1 - pi)

        if self.kind is LossKind.REJECT:
            value, dm, ds = _reject_core(y, a, m, s, self.gamma, self.alpha_fair,
                                         self.di_form, self.reduction)
            dpi = 0.0
        else:
            if batch.dm_prob is None:
                raise ValueError("defer loss needs decision-maker predictions in the batch")
            value, dm, ds, dpi = _defer_core(
                y, a, m, batch.dm_prob, s, self.gamma, self.alpha_fair, self.di_form,
                self.reduction, pi_for_sq=pi if sampled else None,
            )
        d_out = np.column_stack([dm * m * (1 - m), ds * ds_dz + dpi * pi * (1 - pi)])
        return LossEval(value, d_out)

    def validation_value(self, params, batch) -> float:
        from fairdefer.nn_core import forward

        out = np.asarray(forward(params, batch.features)).reshape(len(batch), -1)
        if self.is_gated:
            return float(self._evaluate_gated(out, batch, None, force_expected=True).value)
        return float(self.evaluate(params, out, batch).value)


def thresholds_from_raw(raw) -> tuple[float, float]:
    raw = np.asarray(raw, dtype=float)
    return float(raw[0]), float(raw[0] + softplus(raw[1]))
