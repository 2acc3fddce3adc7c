"""Bayes-by-backprop version of the binary network, scored by a
signal-to-noise uncertainty.

Every weight has a Gaussian posterior ``N(mu, softplus(rho)**2)`` and a
``N(0, prior_std**2)`` prior.  Training minimizes the per-example negative
ELBO ``KL / n - mean log p(y | x, w)`` with one reparameterized sample per step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fairdefer._splitting import stratified_split_indices
from fairdefer.models.common import log_likelihood
from fairdefer.models.losses import LossKind, LossSpec
from fairdefer.nn_core import (
    AdamState,
    Batch,
    HeadKind,
    ModelParams,
    TrainConfig,
    TrainingHistory,
    _check_split,
    adam_step,
    forward,
    init_params,
    inverse_softplus,
    sigmoid,
    softplus,
    value_and_gradient,
)


@dataclass
class BnnPosterior:
    weight_means: np.ndarray
    weight_stds_raw: np.ndarray
    input_dim: int
    hidden_units: int
    prior_std: float = 0.1
    sample_count_J: int = 10

    def __post_init__(self):
        self.weight_means = np.asarray(self.weight_means, dtype=float)
        self.weight_stds_raw = np.asarray(self.weight_stds_raw, dtype=float)
        if self.weight_means.shape != self.weight_stds_raw.shape:
            raise ValueError("weight_means and weight_stds_raw differ in shape")
        if self.sample_count_J < 2:
            raise ValueError("sample_count_J must be >= 2")
        if not self.prior_std > 0:
            raise ValueError("prior_std must be > 0")
        if self.weight_means.shape != (self.template().size,):
            raise ValueError("posterior size does not match the architecture")

    @property
    def weight_stds(self) -> np.ndarray:
        return softplus(self.weight_stds_raw)

    def template(self) -> ModelParams:
        return init_params(self.input_dim, self.hidden_units, HeadKind.BINARY, 0)

    def to_dict(self) -> dict:
        return {
            "weight_means": self.weight_means.tolist(),
            "weight_stds_raw": self.weight_stds_raw.tolist(),
            "input_dim": self.input_dim,
            "hidden_units": self.hidden_units,
            "prior_std": self.prior_std,
            "sample_count_J": self.sample_count_J,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BnnPosterior":
        return cls(**d)


def kl_to_prior(means, stds, prior_std: float):
    """KL(N(means, stds^2) || N(0, prior_std^2)) summed over weights, with gradients."""
    kl = np.sum(np.log(prior_std / stds) + (stds**2 + means**2) / (2 * prior_std**2) - 0.5)
    return float(kl), means / prior_std**2, -1.0 / stds + stds / prior_std**2


@dataclass
class BnnConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    prior_std: float = 0.1
    sample_count_J: int = 10
    init_std: float = 1e-3


def _predictive_probs(post: BnnPosterior, features, eps: np.ndarray) -> np.ndarray:
    """(J, n) output probabilities for the given standard-normal draws."""
    tmpl = post.template()
    sd = post.weight_stds
    return np.stack([
        sigmoid(np.asarray(forward(tmpl.with_flat(post.weight_means + sd * e), features)).reshape(-1))
        for e in eps
    ])


def bnn_train(batch: Batch, config: BnnConfig, init_seed: int):
    """Fit the variational posterior; early stopping on validation predictive NLL."""
    tc = config.train
    rng = np.random.default_rng(tc.seed)
    keys = batch.labels * 2 + batch.sensitive
    tr_idx, va_idx = stratified_split_indices(keys, tc.validation_fraction, rng)
    train_b, val_b = batch.subset(tr_idx), batch.subset(va_idx)
    _check_split(train_b, "training")
    _check_split(val_b, "validation")

    tmpl = init_params(train_b.features.shape[1], tc.hidden_units, HeadKind.BINARY, init_seed)
    size = tmpl.size
    mu = tmpl.flatten()
    rho = np.full(size, inverse_softplus(config.init_std))
    nll = LossSpec(LossKind.FAIR_BINARY, reduction="mean")
    n = len(train_b)
    val_eps = rng.standard_normal((config.sample_count_J, size))

    def make(mu_, rho_):
        return BnnPosterior(mu_, rho_, tmpl.input_dim, tmpl.hidden_units,
                            config.prior_std, config.sample_count_J)

    def val_loss(post):
        p = _predictive_probs(post, val_b.features, val_eps).mean(axis=0)
        return float(-log_likelihood(val_b.labels, p).mean())

    state = AdamState.zeros(2 * size, learning_rate=tc.learning_rate)
    # adam_step works on ModelParams; wrap the stacked (mu, rho) vector in a flat holder.
    holder = _FlatParams(np.concatenate([mu, rho]))
    post = make(mu, rho)
    hist = TrainingHistory(train_loss=[float("nan")], val_loss=[val_loss(post)])
    best_val, best_post, since = hist.val_loss[0], post, 0
    for epoch in range(1, tc.max_epochs + 1):
        mu, rho = holder.vec[:size], holder.vec[size:]
        sd = softplus(rho)
        eps = rng.standard_normal(size)
        value, g_w = value_and_gradient(tmpl.with_flat(mu + sd * eps), nll, train_b)
        kl, dkl_mu, dkl_sd = kl_to_prior(mu, sd, config.prior_std)
        dsd_drho = sigmoid(rho)
        grad = np.concatenate([g_w + dkl_mu / n, (g_w * eps + dkl_sd / n) * dsd_drho])
        holder, state = adam_step(state, holder, grad)
        post = make(holder.vec[:size], holder.vec[size:])
        v = val_loss(post)
        hist.train_loss.append(value + kl / n)
        hist.val_loss.append(v)
        if v < best_val:
            best_val, best_post, since = v, post, 0
            hist.best_epoch = epoch
        else:
            since += 1
            if since >= tc.patience_epochs:
                hist.stop_reason = "patience"
                break
    else:
        hist.stop_reason = "max_epochs"
    return best_post, hist


class _FlatParams:
    """Minimal stand-in exposing the ModelParams bits that ``adam_step`` touches."""

    def __init__(self, vec):
        self.vec = np.asarray(vec, dtype=float)

    @property
    def size(self):
        return self.vec.size

    def flatten(self):
        return self.vec

    def with_flat(self, vec):
        return _FlatParams(vec)


def uncertainty_from_stats(mu, sigma):
    """``rho = sigmoid(log(1/S))`` with ``S = |mu - 0.5| / sigma``.

    sigma = 0 gives rho = 0 (all samples agree); mu = 0.5 with sigma > 0 gives rho = 1.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    gap = np.abs(mu - 0.5)
    with np.errstate(divide="ignore", invalid="ignore"):
        # sigmoid(log(1/S)) simplifies to 1 / (1 + S) = sigma / (sigma + gap).
        rho = sigma / (sigma + gap)
    rho = np.where(sigma == 0, 0.0, rho)
    return rho


def bnn_predict(post: BnnPosterior, features, seed: int = 0):
    """Sample mean ``mu`` and uncertainty ``rho`` of J posterior predictive draws."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((post.sample_count_J, post.weight_means.size))
    probs = _predictive_probs(post, features, eps)
    mu = probs.mean(axis=0)
    sigma = probs.std(axis=0, ddof=1)
    return mu, uncertainty_from_stats(mu, sigma)

