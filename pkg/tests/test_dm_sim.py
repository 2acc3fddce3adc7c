"""Simulated decision-makers: corruption, constant-loss/oracle DMs, trained DMs."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_dataset
from fairdefer.data import SplitSpec, SynthSpec, split, synth_generate
from fairdefer.dm_sim import (
    Corruption,
    DmModel,
    DmPredictions,
    Scenario,
    constant_loss_dm,
    constant_loss_probs,
    corrupt_dm,
    dm_predict,
    make_inconsistent,
    oracle_dm,
    train_dm_biased,
    train_dm_high_accuracy,
)
from fairdefer.fairness_metrics import disparate_impact_hard, error_rate, lower_median
from fairdefer.models import loss_defer, loss_reject
from fairdefer.models.common import log_likelihood
from fairdefer.nn_core import TrainConfig

FAST = TrainConfig(max_epochs=400, patience_epochs=30)


# ---------------------------------------------------------------- corruption


@given(st.lists(st.integers(0, 1), min_size=1, max_size=60), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_flip_extremes(hard, seed):
    hard = np.array(hard)
    mask = np.random.default_rng(seed).integers(0, 2, len(hard)).astype(bool)
    if not mask.any():
        mask[0] = True
    np.testing.assert_array_equal(corrupt_dm(hard, mask, 0.0, seed), hard)
    flipped = corrupt_dm(hard, mask, 1.0, seed)
    np.testing.assert_array_equal(flipped[mask], 1 - hard[mask])
    np.testing.assert_array_equal(flipped[~mask], hard[~mask])


def test_flip_rate_is_binomial():
    n = 10_000
    hard = np.zeros(2 * n, dtype=int)
    mask = np.arange(2 * n) % 2 == 0
    out = corrupt_dm(hard, mask, 0.3, 42)
    assert abs(out[mask].mean() - 0.30) <= 3 * math.sqrt(0.3 * 0.7 / n)
    assert out[~mask].sum() == 0


def test_corruption_is_seeded_and_warns_on_empty_subgroup():
    hard = np.arange(50) % 2
    mask = np.ones(50, dtype=bool)
    a = corrupt_dm(hard, mask, 0.3, 7)
    np.testing.assert_array_equal(a, corrupt_dm(hard, mask, 0.3, 7))
    assert not np.array_equal(a, corrupt_dm(hard, mask, 0.3, 8))
    with pytest.warns(UserWarning, match="no examples"):
        out = corrupt_dm(hard, np.zeros(50, dtype=bool), 0.3, 7)
    np.testing.assert_array_equal(out, hard)
    with pytest.raises(ValueError):
        corrupt_dm(hard, mask, 1.2, 0)


# ---------------------------------------------------------------- constant loss / oracle


def test_constant_loss_examples():
    y = np.array([1, 0, 1, 0])
    np.testing.assert_allclose(constant_loss_probs(y, math.log(0.8)), [0.8, 0.2, 0.8, 0.2])
    np.testing.assert_array_equal(constant_loss_probs(y, 0.0), y)
    with pytest.raises(ValueError):
        constant_loss_probs(y, 0.1)
    with pytest.raises(ValueError):
        constant_loss_dm(0.5)


@given(st.floats(-5, 0), st.lists(st.integers(0, 1), min_size=1, max_size=30))
@settings(max_examples=100, deadline=None)
def test_constant_loss_inverts_log_likelihood(alpha, y):
    y = np.array(y)
    ll = log_likelihood(y, constant_loss_probs(y, alpha))
    np.testing.assert_allclose(ll, math.log(min(max(math.exp(alpha), 1e-7), 1 - 1e-7)), atol=1e-12)


def test_constant_loss_dm_reproduces_reject(rng):
    # Same identity as the reject/defer theorem, but going through the DM object.
    ds = tiny_dataset(n=24)
    alpha, g_rej = math.log(0.7), -0.4
    preds = dm_predict(constant_loss_dm(alpha), ds)
    p_m = rng.uniform(0.05, 0.95, len(ds))
    pi = rng.uniform(0, 1, len(ds))
    lr = loss_reject(ds.labels, p_m, pi, g_rej)
    ld = loss_defer(ds.labels, ds.sensitive, p_m, preds.prob, pi, g_rej - alpha)
    assert abs(lr - ld) < 1e-9


def test_oracle_dm_and_invariants():
    ds = tiny_dataset()
    p = dm_predict(oracle_dm(), ds)
    np.testing.assert_array_equal(p.hard, ds.labels)
    with pytest.raises(ValueError, match="iff"):
        DmModel(Scenario.ORACLE, corruption=Corruption())
    with pytest.raises(ValueError):
        DmModel(Scenario.HIGH_ACCURACY)
    with pytest.raises(ValueError):
        Corruption(flip_prob=-0.1)
    with pytest.raises(ValueError):
        Corruption(output="soft")


# ---------------------------------------------------------------- trained DMs


@pytest.fixture(scope="module")
def synth_split():
    ds = synth_generate(SynthSpec(n=3000), 11)
    return split(ds, SplitSpec(seed=11))


def test_dm_needs_z_and_model_never_sees_z(synth_split):
    train, _ = synth_split
    with pytest.raises(ValueError, match="side information"):
        train_dm_high_accuracy(train.model_view(), FAST)
    assert train.model_view().dm_side_info is None
    assert train.model_view().features.shape == train.features.shape


def test_informative_z_beats_blind_bayes_error():
    spec = SynthSpec(n=3000, z_informativeness=1.0)
    train, test = split(synth_generate(spec, 3), SplitSpec(seed=3))
    dm = train_dm_high_accuracy(train, FAST)
    dm_err = error_rate(test.labels, dm_predict(dm, test).prob)
    # Z-blind Bayes rule from the generating distribution (x features only, aux is independent)
    x = test.features[:, :spec.feature_dim]
    a = test.sensitive
    prior = np.asarray(spec.base_rates)[a]
    m0 = spec.class_means[0] + spec.group_shift * a
    m1 = spec.class_means[1] + spec.group_shift * a
    log_lr = (-0.5 * ((x - m1[:, None]) ** 2 - (x - m0[:, None]) ** 2)).sum(axis=1)
    bayes = (log_lr + np.log(prior / (1 - prior)) > 0).astype(int)
    blind_err = np.mean(bayes != test.labels)
    assert dm_err < blind_err


def test_alpha_zero_is_the_high_accuracy_path(synth_split):
    train, test = synth_split
    a = train_dm_high_accuracy(train, FAST, 2)
    b = train_dm_biased(train, FAST, 2, alpha_fair=0.0)
    np.testing.assert_array_equal(a.base.flatten(), b.base.flatten())
    assert b.scenario is Scenario.HIGHLY_BIASED


@pytest.mark.slow
def test_biased_dm_has_higher_di(synth_split):
    train, test = synth_split
    di = {"acc": [], "bias": []}
    err = {"acc": [], "bias": []}
    for seed in range(5):
        cfg = TrainConfig(seed=seed)
        for key, dm in (("acc", train_dm_high_accuracy(train, cfg, seed)),
                        ("bias", train_dm_biased(train, cfg, seed))):
            p = dm_predict(dm, test).prob
            di[key].append(disparate_impact_hard(test.labels, test.sensitive, p)[0])
            err[key].append(error_rate(test.labels, p))
    assert lower_median(di["bias"]) > lower_median(di["acc"])
    assert abs(lower_median(err["bias"]) - lower_median(err["acc"])) <= 0.05


def test_inconsistent_dm_flips_only_the_subgroup(synth_split):
    train, test = synth_split
    base = train_dm_high_accuracy(train, FAST)
    clean = dm_predict(base, test)
    bad = dm_predict(make_inconsistent(base, Corruption(flip_prob=0.3, seed=4)), test)
    g = test.aux_group == 1
    np.testing.assert_array_equal(bad.hard[~g], clean.hard[~g])
    assert 0.2 < np.mean(bad.hard[g] != clean.hard[g]) < 0.4
    np.testing.assert_array_equal(bad.prob, bad.hard)
    soft = dm_predict(make_inconsistent(base, Corruption(flip_prob=0.3, seed=4, output="prob")), test)
    np.testing.assert_array_equal(soft.hard, bad.hard)
    flipped = bad.hard != clean.hard
    np.testing.assert_allclose(soft.prob[flipped], 1 - clean.prob[flipped])
    np.testing.assert_allclose(soft.prob[~flipped], clean.prob[~flipped])


def test_dm_round_trips(tmp_path, synth_split):
    train, test = synth_split
    dm = make_inconsistent(train_dm_high_accuracy(train, FAST), Corruption(seed=1))
    back = DmModel.from_dict(dm.to_dict())
    np.testing.assert_array_equal(dm_predict(back, test).prob, dm_predict(dm, test).prob)
    preds = dm_predict(train_dm_high_accuracy(train, FAST), test)
    preds.to_csv(tmp_path / "p.csv")
    again = DmPredictions.from_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(again.prob, preds.prob)
    assert again.example_ids.tolist() == preds.example_ids.tolist()
    shuffled = again.aligned(preds.example_ids[::-1])
    np.testing.assert_array_equal(shuffled.prob, preds.prob[::-1])
    with pytest.raises(KeyError, match="missing"):
        again.aligned(["nope"])

