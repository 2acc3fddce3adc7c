"""Dense one-hidden-layer network with analytic gradients, ADAM and an
early-stopping training loop.

The architecture is fixed: a sigmoid hidden layer followed by a linear head
whose raw outputs (logits or scores) are handed to a loss.  Losses are duck
typed: anything with ``evaluate(params, outputs, batch, noise)`` returning a
``LossEval`` can be trained here.  Losses that couple examples (the DI
regularizers) are why the gradient is taken w.r.t. the whole output matrix at
once.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from fairdefer._splitting import stratified_split_indices

log = logging.getLogger(__name__)


class HeadKind(str, enum.Enum):
    BINARY = "binary_logit"
    ORDINAL = "ordinal_threshold"
    GATED = "gated_two_output"
    VARIATIONAL = "variational"


HEAD_OUTPUTS = {
    HeadKind.BINARY: 1,
    HeadKind.ORDINAL: 1,
    HeadKind.GATED: 2,
    HeadKind.VARIATIONAL: 1,
}


class DimensionError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


@dataclass
class ModelParams:
    hidden_weights: np.ndarray  # (hidden_units, input_dim)
    hidden_bias: np.ndarray  # (hidden_units,)
    head_weights: np.ndarray  # (outputs, hidden_units)
    head_bias: np.ndarray  # (outputs,)
    head_kind: HeadKind = HeadKind.BINARY
    # Ordinal head only: (t0, inverse_softplus(t1 - t0)), which keeps t0 <= t1.
    thresholds_raw: np.ndarray | None = None

    def __post_init__(self):
        self.head_kind = HeadKind(self.head_kind)
        self.hidden_weights = np.atleast_2d(np.asarray(self.hidden_weights, dtype=float))
        self.hidden_bias = np.asarray(self.hidden_bias, dtype=float).reshape(-1)
        self.head_weights = np.atleast_2d(np.asarray(self.head_weights, dtype=float))
        self.head_bias = np.asarray(self.head_bias, dtype=float).reshape(-1)
        h, _ = self.hidden_weights.shape
        k = HEAD_OUTPUTS[self.head_kind]
        if self.hidden_bias.shape != (h,):
            raise DimensionError(f"hidden_bias has shape {self.hidden_bias.shape}, expected ({h},)")
        if self.head_weights.shape != (k, h):
            raise DimensionError(
                f"head_weights has shape {self.head_weights.shape}, expected ({k}, {h}) "
                f"for head {self.head_kind.value}"
            )
        if self.head_bias.shape != (k,):
            raise DimensionError(f"head_bias has shape {self.head_bias.shape}, expected ({k},)")
        if self.head_kind is HeadKind.ORDINAL:
            if self.thresholds_raw is None:
                raise DimensionError("ordinal head requires thresholds")
            self.thresholds_raw = np.asarray(self.thresholds_raw, dtype=float).reshape(-1)
            if self.thresholds_raw.shape != (2,):
                raise DimensionError("thresholds_raw must have 2 entries")
        elif self.thresholds_raw is not None:
            raise DimensionError("only the ordinal head owns thresholds")
        if not np.all(np.isfinite(self.flatten())):
            raise NonFiniteError("model parameters must be finite")

    @property
    def input_dim(self) -> int:
        return self.hidden_weights.shape[1]

    @property
    def hidden_units(self) -> int:
        return self.hidden_weights.shape[0]

    @property
    def thresholds(self) -> tuple[float, float]:
        if self.thresholds_raw is None:
            raise ValueError(f"{self.head_kind.value} head has no thresholds")
        t0 = float(self.thresholds_raw[0])
        return t0, t0 + float(softplus(self.thresholds_raw[1]))

    def _parts(self):
        parts = [self.hidden_weights, self.hidden_bias, self.head_weights, self.head_bias]
        if self.thresholds_raw is not None:
            parts.append(self.thresholds_raw)
        return parts

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self._parts()])

    @property
    def size(self) -> int:
        return sum(p.size for p in self._parts())

    def with_flat(self, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise DimensionError(f"flat vector has shape {vec.shape}, expected ({self.size},)")
        out, i = [], 0
        for p in self._parts():
            out.append(vec[i : i + p.size].reshape(p.shape))
            i += p.size
        thresholds = out[4] if len(out) == 5 else None
        return ModelParams(out[0], out[1], out[2], out[3], self.head_kind, thresholds)

    def copy(self) -> "ModelParams":
        return self.with_flat(self.flatten().copy())

    def to_dict(self) -> dict:
        d = {
            "head_kind": self.head_kind.value,
            "input_dim": self.input_dim,
            "hidden_units": self.hidden_units,
            "hidden_weights": self.hidden_weights.tolist(),
            "hidden_bias": self.hidden_bias.tolist(),
            "head_weights": self.head_weights.tolist(),
            "head_bias": self.head_bias.tolist(),
        }
        if self.thresholds_raw is not None:
            d["thresholds_raw"] = self.thresholds_raw.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(
            hidden_weights=np.array(d["hidden_weights"], dtype=float).reshape(
                d["hidden_units"], d["input_dim"]
            ),
            hidden_bias=d["hidden_bias"],
            head_weights=d["head_weights"],
            head_bias=d["head_bias"],
            head_kind=HeadKind(d["head_kind"]),
            thresholds_raw=d.get("thresholds_raw"),
        )


def init_params(input_dim: int, hidden_units: int, head_kind, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; ordinal thresholds start at (-0.5, 0.5)."""
    head_kind = HeadKind(head_kind)
    rng = np.random.default_rng(seed)
    k = HEAD_OUTPUTS[head_kind]
    r1 = math.sqrt(6.0 / (input_dim + hidden_units))
    r2 = math.sqrt(6.0 / (hidden_units + k))
    thresholds = None
    if head_kind is HeadKind.ORDINAL:
        thresholds = np.array([-0.5, inverse_softplus(1.0)])
    return ModelParams(
        hidden_weights=rng.uniform(-r1, r1, size=(hidden_units, input_dim)),
        hidden_bias=np.zeros(hidden_units),
        head_weights=rng.uniform(-r2, r2, size=(k, hidden_units)),
        head_bias=np.zeros(k),
        head_kind=head_kind,
        thresholds_raw=thresholds,
    )


def _check_features(params: ModelParams, features) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(
            f"features have {x.shape[-1]} columns, model expects {params.input_dim}"
        )
    return x


def hidden_activations(params: ModelParams, features) -> np.ndarray:
    x = _check_features(params, features)
    return sigmoid(x @ params.hidden_weights.T + params.hidden_bias)


def forward(params: ModelParams, features) -> np.ndarray:
    """Raw head outputs; a 1-d input yields a 1-d output vector, a matrix an (n, k) matrix."""
    single = np.asarray(features).ndim == 1
    h = hidden_activations(params, features)
    out = h @ params.head_weights.T + params.head_bias
    return out[0] if single else out


@dataclass
class Batch:
    """Training view of a dataset: model features plus everything losses consume.

    ``dm_prob`` is the decision-maker's probability (or hard label) per example;
    it is an input, never a function of the model.
    """

    features: np.ndarray
    labels: np.ndarray
    sensitive: np.ndarray
    dm_prob: np.ndarray | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels, dtype=int)
        self.sensitive = np.asarray(self.sensitive, dtype=int)
        if self.dm_prob is not None:
            self.dm_prob = np.asarray(self.dm_prob, dtype=float)
        n = len(self.labels)
        for name in ("features", "sensitive", "dm_prob", "ids"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise DimensionError(f"{name} has {len(v)} rows, labels have {n}")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Batch":
        pick = lambda v: None if v is None else np.asarray(v)[idx]  # noqa: E731
        return Batch(
            self.features[idx], self.labels[idx], self.sensitive[idx],
            pick(self.dm_prob), pick(self.ids),
        )


@dataclass
class LossEval:
    value: float
    d_outputs: np.ndarray  # (n, k)
    d_thresholds_raw: np.ndarray | None = None


def value_and_gradient(params: ModelParams, loss, batch: Batch, noise=None):
    """Loss value and its exact gradient as a flat vector (same layout as ``flatten``).

    Output columns listed by ``loss.detached_outputs(head_kind)`` are stopped at
    the head: they still train their own head row but send nothing into the
    hidden layer.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    x = _check_features(params, batch.features)
    h = sigmoid(x @ params.hidden_weights.T + params.hidden_bias)
    out = h @ params.head_weights.T + params.head_bias
    ev = loss.evaluate(params, out, batch, noise)
    d_out = np.asarray(ev.d_outputs, dtype=float).reshape(out.shape)

    g_head_w = d_out.T @ h
    g_head_b = d_out.sum(axis=0)
    detached = tuple(getattr(loss, "detached_outputs", lambda kind: ())(params.head_kind))
    d_back = d_out.copy()
    if detached:
        d_back[:, list(detached)] = 0.0
    d_pre = (d_back @ params.head_weights) * h * (1.0 - h)
    g_hidden_w = d_pre.T @ x
    g_hidden_b = d_pre.sum(axis=0)
    parts = [g_hidden_w.ravel(), g_hidden_b, g_head_w.ravel(), g_head_b]
    if params.thresholds_raw is not None:
        dt = ev.d_thresholds_raw if ev.d_thresholds_raw is not None else np.zeros(2)
        parts.append(np.asarray(dt, dtype=float))
    return float(ev.value), np.concatenate(parts)


def gradient(params: ModelParams, loss, batch: Batch, noise=None) -> np.ndarray:
    return value_and_gradient(params, loss, batch, noise)[1]


def loss_value(params: ModelParams, loss, batch: Batch, noise=None) -> float:
    out = forward(params, batch.features)
    out = np.atleast_2d(out) if out.ndim == 1 and len(batch) == 1 else out
    return float(loss.evaluate(params, out.reshape(len(batch), -1), batch, noise).value)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, size: int, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), **kw)


def adam_step(state: AdamState, params: ModelParams, grad) -> tuple[ModelParams, AdamState]:
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.first_moment.shape or grad.shape != (params.size,):
        raise DimensionError("gradient, optimizer state and parameters disagree in size")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1 - state.beta2) * grad**2
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = params.flatten() - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params.with_flat(new), replace(state, first_moment=m, second_moment=v, step_count=t)


@dataclass
class TrainConfig:
    patience_epochs: int = 50
    max_epochs: int = 5000
    validation_fraction: float = 0.2
    batch_size: int | None = None  # None = full batch
    seed: int = 0
    learning_rate: float = 1e-2
    hidden_units: int = 5

    def __post_init__(self):
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive or None")
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]

    def to_dict(self) -> dict:
        return {
            "train_loss": list(self.train_loss),
            "val_loss": list(self.val_loss),
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
        }


def _check_split(batch: Batch, name: str):
    counts = np.bincount(batch.labels, minlength=2)
    if counts.min() < 2:
        raise ValueError(
            f"degenerate {name} split: label counts {counts.tolist()} (need >= 2 of each label)"
        )


def train(
    batch: Batch,
    loss,
    config: TrainConfig,
    init_seed: int,
    validation: Batch | None = None,
) -> tuple[ModelParams, TrainingHistory]:
    """Train with ADAM and early stopping on the validation loss.

    Without an explicit ``validation`` batch, ``validation_fraction`` of ``batch``
    is held out (stratified on label x sensitive).  Epoch 0 records the loss
    of the initial parameters; the returned parameters are those with the
    smallest validation loss seen.
    """
    rng = np.random.default_rng(config.seed)
    if validation is None:
        keys = batch.labels * 2 + batch.sensitive
        tr_idx, va_idx = stratified_split_indices(keys, config.validation_fraction, rng)
        train_b, val_b = batch.subset(tr_idx), batch.subset(va_idx)
    else:
        train_b, val_b = batch, validation
    _check_split(train_b, "training")
    _check_split(val_b, "validation")

    params = init_params(train_b.features.shape[1], config.hidden_units, loss.head_kind, init_seed)
    state = AdamState.zeros(params.size, learning_rate=config.learning_rate)
    needs_noise = getattr(loss, "needs_noise", False)
    val_value = getattr(loss, "validation_value", None) or (
        lambda p, b: loss_value(p, loss, b, None)
    )

    hist = TrainingHistory()
    hist.train_loss.append(float("nan"))
    best_val = val_value(params, val_b)
    hist.val_loss.append(best_val)
    best_params, since_best = params, 0
    n = len(train_b)
    bs = n if config.batch_size is None else min(config.batch_size, n)

    for epoch in range(1, config.max_epochs + 1):
        order = np.arange(n) if bs == n else rng.permutation(n)
        noise = rng.uniform(size=n) if needs_noise else None
        epoch_loss = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            sub = train_b if bs == n else train_b.subset(idx)
            sub_noise = None if noise is None else noise[idx]
            value, grad = value_and_gradient(params, loss, sub, sub_noise)
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite training loss at epoch {epoch}")
            params, state = adam_step(state, params, grad)
            epoch_loss += value * len(idx) / n
        v = val_value(params, val_b)
        if not math.isfinite(v):
            raise NonFiniteError(f"non-finite validation loss at epoch {epoch}")
        hist.train_loss.append(epoch_loss)
        hist.val_loss.append(v)
        if v < best_val:
            best_val, best_params, since_best = v, params, 0
            hist.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience_epochs:
                hist.stop_reason = "patience"
                break
    else:
        hist.stop_reason = "max_epochs"
    log.debug("trained %d epochs, best epoch %d", len(hist.val_loss) - 1, hist.best_epoch)
    return best_params, hist
