import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_difference, random_batch, random_params, rel_err
from fairdefer.models.losses import LossKind, LossSpec
from fairdefer.nn_core import (
    AdamState,
    Batch,
    DimensionError,
    HeadKind,
    ModelParams,
    NonFiniteError,
    TrainConfig,
    adam_step,
    forward,
    gradient,
    init_params,
    loss_value,
    sigmoid,
    train,
    value_and_gradient,
)

# Every loss configuration the trainer can be handed.
LOSS_REPERTOIRE = [
    LossSpec(LossKind.FAIR_BINARY),
    LossSpec(LossKind.FAIR_BINARY, alpha_fair=0.7),
    LossSpec(LossKind.REJECT, alpha_fair=0.5, gamma=-0.4, gate_estimator="expected"),
    LossSpec(LossKind.REJECT, alpha_fair=0.5, gamma=-0.4),
    LossSpec(LossKind.REJECT, alpha_fair=0.5, gamma=-0.4, di_form="squared_expected"),
    LossSpec(LossKind.DEFER, alpha_fair=0.5, gamma=0.3, gate_estimator="expected"),
    LossSpec(LossKind.DEFER, alpha_fair=0.5, gamma=0.3),
    LossSpec(LossKind.DEFER, alpha_fair=0.5, gamma=0.3, di_form="squared_expected"),
    LossSpec(LossKind.DEFER, alpha_fair=0.5, gamma=0.3, di_form="squared_expected",
             gate_estimator="expected"),
    LossSpec(LossKind.DEFER, alpha_fair=0.5, gamma=0.3, stop_gradient=True),
    LossSpec(LossKind.REJECT, gamma=-0.4, stop_gradient=True, gate_estimator="expected"),
    LossSpec(LossKind.PUNT, gamma=0.2),
    LossSpec(LossKind.FAIR_PUNT, gamma=0.2, alpha_fair=0.6),
    LossSpec(LossKind.FAIR_PUNT, gamma=0.2, alpha_fair=0.6, reduction="sum"),
]


def _fd_check(loss, seed):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, n=12, d=3)
    params = random_params(rng, 3, loss.head_kind)
    noise = rng.uniform(0.05, 0.95, len(batch)) if loss.needs_noise else None
    analytic = gradient(params, loss, batch, noise)
    if loss.stop_gradient:
        f = _frozen_gate_loss(params, loss, batch, noise)
    else:
        f = lambda th: loss_value(params.with_flat(th), loss, batch, noise)  # noqa: E731
    return rel_err(analytic, central_difference(f, params.flatten()))


def _frozen_gate_loss(p0, loss, batch, noise):
    """Loss as a function of the parameters with the hidden layer feeding the
    gate logit frozen at ``p0``: the reference for stop-gradient."""
    h0 = sigmoid(batch.features @ p0.hidden_weights.T + p0.hidden_bias)

    def f(theta):
        p = p0.with_flat(theta)
        h = sigmoid(batch.features @ p.hidden_weights.T + p.hidden_bias)
        out = np.column_stack([h @ p.head_weights[0] + p.head_bias[0],
                               h0 @ p.head_weights[1] + p.head_bias[1]])
        return loss.evaluate(p, out, batch, noise).value

    return f


@pytest.mark.parametrize("loss", LOSS_REPERTOIRE, ids=lambda l: f"{l.kind.value}-{l.gate_estimator.value}-"
                         f"{l.di_form.value}-sg{int(l.stop_gradient)}")
def test_gradient_matches_finite_differences(loss):
    errs = [_fd_check(loss, seed) for seed in range(20)]
    assert max(errs) < 1e-4, errs


def test_stop_gradient_equals_frozen_gate_reference():
    rng = np.random.default_rng(3)
    batch = random_batch(rng, n=10, d=2)
    params = random_params(rng, 2, HeadKind.GATED)
    on = LossSpec(LossKind.DEFER, gamma=0.2, gate_estimator="expected", stop_gradient=True)
    off = LossSpec(LossKind.DEFER, gamma=0.2, gate_estimator="expected", stop_gradient=False)
    g_on = gradient(params, on, batch)
    g_off = gradient(params, off, batch)
    ref = central_difference(_frozen_gate_loss(params, on, batch, None), params.flatten())
    assert rel_err(g_on, ref) < 1e-6
    # Head rows see identical gradients; only the hidden layer differs.
    n_hidden = params.hidden_weights.size + params.hidden_bias.size
    np.testing.assert_allclose(g_on[n_hidden:], g_off[n_hidden:], rtol=1e-12, atol=1e-14)
    assert not np.allclose(g_on[:n_hidden], g_off[:n_hidden])


def test_stop_gradient_hidden_gradient_is_model_path_only():
    # Decompose: with stop-gradient, the hidden gradient comes only through the y_M row.
    rng = np.random.default_rng(4)
    batch = random_batch(rng, n=10, d=2)
    params = random_params(rng, 2, HeadKind.GATED)
    loss = LossSpec(LossKind.REJECT, gamma=-0.3, gate_estimator="expected", stop_gradient=True)
    g = gradient(params, loss, batch)
    # Perturb the gate's head row: the hidden gradient must be unaffected except
    # through the changed gate values in the likelihood weights.
    zero_gate = params.copy()
    zero_gate.head_weights[1] = 0.0
    zero_gate.head_bias[1] = -50.0  # pi ~ 0: the loss reduces to the model NLL
    binary = ModelParams(params.hidden_weights, params.hidden_bias, params.head_weights[:1],
                         params.head_bias[:1], HeadKind.BINARY)
    g_nll = gradient(binary, LossSpec(LossKind.FAIR_BINARY, reduction="mean"),
                     Batch(batch.features, batch.labels, batch.sensitive))
    g0 = gradient(zero_gate, loss, batch)
    n_hidden = params.hidden_weights.size + params.hidden_bias.size
    np.testing.assert_allclose(g0[:n_hidden], g_nll[:n_hidden], atol=1e-12)
    assert np.all(np.isfinite(g))


def test_forward_zero_network_gives_zero_logits():
    p = ModelParams(np.zeros((3, 2)), np.zeros(3), np.zeros((1, 3)), np.zeros(1), HeadKind.BINARY)
    assert np.all(forward(p, np.array([[1.0, -2.0], [3.0, 4.0]])) == 0)


def test_forward_single_unit_hand_value():
    p = ModelParams(np.array([[1.0]]), np.zeros(1), np.array([[1.0]]), np.zeros(1), HeadKind.BINARY)
    assert forward(p, np.array([0.0])) == pytest.approx([0.5])


def test_forward_rejects_wrong_width():
    p = init_params(3, 2, HeadKind.BINARY, 0)
    with pytest.raises(DimensionError):
        forward(p, np.zeros(4))


def test_params_reject_non_finite_and_bad_shapes():
    with pytest.raises(ValueError):
        ModelParams(np.array([[np.nan]]), np.zeros(1), np.ones((1, 1)), np.zeros(1), HeadKind.BINARY)
    with pytest.raises(ValueError):
        ModelParams(np.ones((2, 3)), np.zeros(2), np.ones((1, 2)), np.zeros(1), HeadKind.GATED)


def test_init_is_glorot_uniform_and_seeded():
    p = init_params(6, 4, HeadKind.GATED, 7)
    r = np.sqrt(6 / (6 + 4))
    assert np.all(np.abs(p.hidden_weights) <= r)
    q = init_params(6, 4, HeadKind.GATED, 7)
    np.testing.assert_array_equal(p.flatten(), q.flatten())
    assert p.head_weights.shape == (2, 4)


def test_params_dict_round_trip():
    p = init_params(3, 2, HeadKind.ORDINAL, 1)
    q = ModelParams.from_dict(p.to_dict())
    np.testing.assert_array_equal(p.flatten(), q.flatten())
    assert q.head_kind is HeadKind.ORDINAL


def test_constant_loss_has_zero_gradient():
    class Const:
        head_kind = HeadKind.BINARY

        def evaluate(self, params, outputs, batch, noise=None):
            from fairdefer.nn_core import LossEval
            return LossEval(3.0, np.zeros_like(outputs))

    rng = np.random.default_rng(0)
    b = random_batch(rng, 8, 2)
    p = init_params(2, 3, HeadKind.BINARY, 0)
    v, g = value_and_gradient(p, Const(), b)
    assert v == 3.0 and np.all(g == 0)


def test_empty_batch_rejected():
    p = init_params(2, 3, HeadKind.BINARY, 0)
    empty = Batch(np.zeros((0, 2)), np.zeros(0, int), np.zeros(0, int))
    with pytest.raises(ValueError, match="empty"):
        gradient(p, LossSpec(), empty)


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = init_params(2, 2, HeadKind.BINARY, 0)
    st_ = AdamState(np.full(p.size, 0.5), np.full(p.size, 0.25), step_count=3)
    q, st2 = adam_step(st_, p, np.zeros(p.size))
    np.testing.assert_allclose(st2.first_moment, 0.45)
    np.testing.assert_allclose(st2.second_moment, 0.25 * 0.999)
    assert st2.step_count == 4
    # Moments were non-zero, so the update is driven by the decayed momentum only.
    st0 = AdamState.zeros(p.size)
    q0, _ = adam_step(st0, p, np.zeros(p.size))
    np.testing.assert_array_equal(q0.flatten(), p.flatten())


@given(st.lists(st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3), min_size=9, max_size=9))
@settings(max_examples=50, deadline=None)
def test_adam_first_step_moves_by_lr_against_gradient_sign(g):
    p = init_params(2, 2, HeadKind.BINARY, 0)  # 2*2 + 2 + 2 + 1 = 9 parameters
    g = np.asarray(g)
    q, st_ = adam_step(AdamState.zeros(p.size, learning_rate=0.01), p, g)
    step = q.flatten() - p.flatten()
    # m_hat = g, v_hat = g^2, so the step is -lr * g / (|g| + eps)
    np.testing.assert_allclose(step, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-9)
    assert st_.step_count == 1 and np.all(st_.second_moment >= 0)


def test_adam_rejects_non_finite_gradient():
    p = init_params(2, 2, HeadKind.BINARY, 0)
    g = np.zeros(p.size)
    g[0] = np.inf
    with pytest.raises(NonFiniteError):
        adam_step(AdamState.zeros(p.size), p, g)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience_epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)
    assert TrainConfig().validation_fraction == 0.2


def _blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = np.tile([0, 1], n // 2)
    a = np.repeat([0, 1], n // 2)
    x = rng.normal(scale=0.5, size=(n, 2)) + np.where(y[:, None] == 1, 2.5, -2.5)
    return Batch(x, y, a)


def test_train_separable_blobs():
    b = _blobs()
    # Oracle: the line x0 + x1 = 0 separates the blobs.
    assert np.all((b.features.sum(axis=1) > 0) == (b.labels == 1))
    params, hist = train(b, LossSpec(), TrainConfig(max_epochs=400, learning_rate=0.05), 0)
    acc = np.mean((sigmoid(forward(params, b.features)[:, 0]) >= 0.5) == b.labels)
    assert acc >= 0.99


def test_train_is_deterministic_and_returns_best():
    b = _blobs(80, 1)
    cfg = TrainConfig(max_epochs=60, patience_epochs=10, seed=4)
    p1, h1 = train(b, LossSpec(alpha_fair=0.2), cfg, 3)
    p2, h2 = train(b, LossSpec(alpha_fair=0.2), cfg, 3)
    np.testing.assert_array_equal(p1.flatten(), p2.flatten())
    assert json.dumps(h1.to_dict()) == json.dumps(h2.to_dict())  # bit-identical, NaN included
    assert h1.best_val_loss == min(h1.val_loss)


def test_train_names_degenerate_split():
    x = np.zeros((10, 2))
    y = np.array([0] * 9 + [1])
    with pytest.raises(ValueError, match="training|validation"):
        train(Batch(x, y, np.tile([0, 1], 5)), LossSpec(), TrainConfig(max_epochs=2), 0)
