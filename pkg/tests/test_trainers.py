import math

import numpy as np
import pytest

from advlab.attacks import AttackSpec, pgd_attack
from advlab.datasets import Dataset, gen_two_gaussians, one_hot
from advlab.errors import ConfigError
from advlab.evaluation import eval_natural, eval_robust
from advlab.interpolation import LambdaPolicy, attackable_mask
from advlab.nn import SgdState, init_model, loss_and_grads, sgd_step
from advlab.rng import stream
from advlab.trainers import (
    EpochOutcome,
    TrainSpec,
    gairat_omega,
    lr_at_epoch,
    normalize_gairat_weights,
    run_epoch,
    run_training,
    selection_attack,
)

ATTACK = AttackSpec(epsilon=0.05, alpha=0.0125, steps=5)
TRADES_ATTACK = AttackSpec(
    epsilon=0.05, alpha=0.0125, steps=5, init="gaussian", loss="kl_vs_natural"
)
FAST_ATTACK = AttackSpec(epsilon=0.05, alpha=0.0625, steps=1, init="uniform")


def small_spec(**kw):
    base = dict(
        algorithm="at",
        epochs=3,
        batch_size=8,
        interp_batch_size=0,
        attack=ATTACK,
        learning_rate=0.1,
        seed=5,
    )
    base.update(kw)
    return TrainSpec(**base)


@pytest.fixture(scope="module")
def toy_data():
    ds = gen_two_gaussians(40, sigma=0.08, seed=31)
    return ds


# ---------------------------------------------------------------- schedule


def test_lr_schedule_matches_60_epoch_protocol():
    # divided by 10 at epochs 30 and 45 of a 60 epoch run
    assert lr_at_epoch(0.1, (0.5, 0.75), 0.1, 60, 29) == pytest.approx(0.1)
    assert lr_at_epoch(0.1, (0.5, 0.75), 0.1, 60, 30) == pytest.approx(0.01)
    assert lr_at_epoch(0.1, (0.5, 0.75), 0.1, 60, 44) == pytest.approx(0.01)
    assert lr_at_epoch(0.1, (0.5, 0.75), 0.1, 60, 45) == pytest.approx(0.001)


def test_lr_schedule_matches_75_epoch_protocol():
    # divided by 10 at epochs 37 and 56 of a 75 epoch run
    assert lr_at_epoch(0.1, (0.5, 0.75), 0.1, 75, 36) == pytest.approx(0.1)
    assert lr_at_epoch(0.1, (0.5, 0.75), 0.1, 75, 37) == pytest.approx(0.01)
    assert lr_at_epoch(0.1, (0.5, 0.75), 0.1, 75, 55) == pytest.approx(0.01)
    assert lr_at_epoch(0.1, (0.5, 0.75), 0.1, 75, 56) == pytest.approx(0.001)


def test_lr_schedule_no_milestones_and_fractions():
    assert lr_at_epoch(0.3, (), 0.1, 100, 99) == 0.3
    assert lr_at_epoch(0.1, (0.5, 0.75), 0.1, 40, 19) == pytest.approx(0.1)
    assert lr_at_epoch(0.1, (0.5, 0.75), 0.1, 40, 20) == pytest.approx(0.01)
    assert lr_at_epoch(0.1, (0.5, 0.75), 0.1, 40, 30) == pytest.approx(0.001)


# ---------------------------------------------------------------- gairat


def test_gairat_omega_closed_form():
    # recomputed by hand from the weight definition
    assert gairat_omega(0, 10) == pytest.approx((1 + math.tanh(4.0)) / 2, abs=1e-12)
    assert gairat_omega(0, 10) == pytest.approx(0.9996646, abs=1e-6)
    assert gairat_omega(5, 10) == pytest.approx((1 + math.tanh(-1.0)) / 2, abs=1e-12)
    assert gairat_omega(5, 10) == pytest.approx(0.1192029, abs=1e-6)
    assert gairat_omega(10, 10) == pytest.approx((1 + math.tanh(-6.0)) / 2, abs=1e-12)
    assert gairat_omega(10, 10) == pytest.approx(6.1445e-6, abs=1e-6)


def test_gairat_weights_normalize():
    kappa = np.array([0, 2, 5, 9, 10])
    omega = gairat_omega(kappa, 10)
    assert np.all((omega > 0.0) & (omega < 1.0))
    w = normalize_gairat_weights(omega)
    assert abs(w.sum() - 1.0) < 1e-12


# ---------------------------------------------------------------- spec


def test_train_spec_validation():
    with pytest.raises(ConfigError):
        small_spec(algorithm="sgd")
    with pytest.raises(ConfigError):
        small_spec(algorithm="at", interp_batch_size=4)
    with pytest.raises(ConfigError):
        small_spec(algorithm="trades")  # wrong attack shape
    with pytest.raises(ConfigError):
        small_spec(algorithm="fastat")
    with pytest.raises(ConfigError):
        small_spec(algorithm="gairat", attack=TRADES_ATTACK)
    spec = small_spec(algorithm="trades", attack=TRADES_ATTACK)
    assert spec.trades_gamma == TRADES_ATTACK.gaussian_scale
    assert small_spec(batches_per_epoch=None).resolved_batches(80) == 10
    assert small_spec(interp_batch_size=0, batch_size=7).resolved_batches(80) == 12


# ---------------------------------------------------------------- equivalence


PAIRS = [
    ("at", "at_gif", ATTACK),
    ("at", "at_mixup", ATTACK),
    ("trades", "trades_gif", TRADES_ATTACK),
    ("gairat", "gairat_gif", ATTACK),
    ("fastat", "fastat_gif", FAST_ATTACK),
]


@pytest.mark.parametrize("base_algo,gif_algo,attack", PAIRS)
def test_interp_batch_zero_matches_base_bitwise(toy_data, base_algo, gif_algo, attack):
    results = []
    for algo in (base_algo, gif_algo):
        spec = small_spec(algorithm=algo, interp_batch_size=0, attack=attack, epochs=2)
        model = init_model([2, 6, 2], seed=9)
        results.append(run_training(model, spec, toy_data))
    a, b = results
    assert [m.csv_row() for m in a.metrics] == [m.csv_row() for m in b.metrics]
    for wa, wb in zip(a.final_model.weights, b.final_model.weights):
        assert np.array_equal(wa, wb)


def test_parallel_workers_do_not_change_bytes(toy_data):
    outs = []
    for workers in (1, 3):
        spec = small_spec(
            algorithm="at_gif", interp_batch_size=8, epochs=2, parallel_workers=workers
        )
        model = init_model([2, 6, 2], seed=2)
        outs.append(run_training(model, spec, toy_data))
    a, b = outs
    assert [m.csv_row() for m in a.metrics] == [m.csv_row() for m in b.metrics]
    for wa, wb in zip(a.final_model.weights, b.final_model.weights):
        assert np.array_equal(wa, wb)


def test_rerun_is_bitwise_deterministic(toy_data):
    rows = []
    for _ in range(2):
        spec = small_spec(algorithm="fastat", attack=FAST_ATTACK, epochs=2)
        model = init_model([2, 6, 2], seed=4)
        result = run_training(model, spec, toy_data)
        rows.append([m.csv_row() for m in result.metrics])
    assert rows[0] == rows[1]


# ---------------------------------------------------------------- epoch math


def test_alpha_zero_reduces_to_natural_training(toy_data):
    spec = small_spec(
        attack=AttackSpec(epsilon=0.05, alpha=0.0, steps=3), batch_size=10, epochs=1
    )
    model = run_once = init_model([2, 5, 2], seed=8)
    sgd = SgdState(learning_rate=spec.learning_rate, momentum=spec.momentum,
                   weight_decay=spec.weight_decay)
    run_epoch(model, sgd, spec, toy_data, None, epoch=1)

    manual = init_model([2, 5, 2], seed=8)
    sgd2 = SgdState(learning_rate=spec.learning_rate, momentum=spec.momentum,
                    weight_decay=spec.weight_decay)
    for batch in range(1, spec.resolved_batches(toy_data.n) + 1):
        idx = np.sort(stream(spec.seed, "sample-original", 1, batch).choice(
            toy_data.n, size=10, replace=False))
        x, y = toy_data.features[idx], toy_data.labels[idx]
        _, grads = loss_and_grads(manual, x, y, "ce")
        sgd_step(manual, grads, sgd2)
    for wa, wb in zip(model.weights, manual.weights):
        assert np.array_equal(wa, wb)


def test_single_sample_update_matches_hand_chain():
    ds = Dataset(features=np.array([[0.4, 0.6]]), labels=one_hot([1], 2))
    spec = small_spec(batch_size=1, epochs=1, batches_per_epoch=1, seed=3)
    model = init_model([2, 2], seed=6)
    reference = model.copy()

    sgd = SgdState(learning_rate=spec.learning_rate, momentum=spec.momentum,
                   weight_decay=spec.weight_decay)
    run_epoch(model, sgd, spec, ds, None, epoch=1)

    x_adv = pgd_attack(reference, ds.features, ds.labels, spec.attack)
    _, grads = loss_and_grads(reference, x_adv, ds.labels, "ce")
    sgd_step(reference, grads, SgdState(learning_rate=spec.learning_rate,
                                        momentum=spec.momentum,
                                        weight_decay=spec.weight_decay))
    for wa, wb in zip(model.weights, reference.weights):
        assert np.array_equal(wa, wb)


def test_epoch_budget_parity(toy_data):
    m, mp, batches = 6, 4, 5
    for interp_set in (None,):
        spec = small_spec(
            algorithm="at_gif", batch_size=m, interp_batch_size=mp,
            batches_per_epoch=batches, epochs=1,
        )
        model = init_model([2, 4, 2], seed=1)
        sgd = SgdState(learning_rate=0.1)
        outcome = run_epoch(model, sgd, spec, toy_data, interp_set, epoch=1)
        assert outcome.samples_consumed == batches * (m + mp)
        assert outcome.original_draws == batches * (m + mp)  # fallback fills with originals

    from advlab.interpolation import build_interpolation_set

    pool = np.arange(toy_data.n)
    interp = build_interpolation_set(toy_data, pool, mp * batches,
                                     LambdaPolicy.fixed(0.5), stream(1, "pool"))
    spec = small_spec(algorithm="at_gif", batch_size=m, interp_batch_size=mp,
                      batches_per_epoch=batches, epochs=1)
    model = init_model([2, 4, 2], seed=1)
    outcome = run_epoch(model, SgdState(learning_rate=0.1), spec, toy_data, interp, epoch=1)
    assert outcome.samples_consumed == batches * (m + mp)
    assert outcome.original_draws == batches * m
    assert outcome.interp_draws == batches * mp


def test_attackable_bookkeeping_matches_post_hoc_recheck(toy_data):
    # one batch per epoch: the judging model is exactly the pre-epoch snapshot
    spec = small_spec(batch_size=12, batches_per_epoch=1, epochs=1)
    model = init_model([2, 5, 2], seed=12)
    snapshot = model.copy()
    outcome = run_epoch(model, SgdState(learning_rate=0.1), spec, toy_data, None,
                        epoch=1, record_trace=True)
    (trace,) = outcome.traces
    recheck = attackable_mask(snapshot, trace.x_adv, toy_data.labels[trace.original_ids])
    assert np.array_equal(recheck, trace.attackable)
    assert set(outcome.attackable_ids.tolist()) == set(
        trace.original_ids[trace.attackable].tolist()
    )
    assert np.all(outcome.attackable_ids < toy_data.n)


# ---------------------------------------------------------------- run_training


def test_run_training_zero_epochs(toy_data):
    spec = small_spec(epochs=0)
    model = init_model([2, 4, 2], seed=3)
    before = [w.copy() for w in model.weights]
    result = run_training(model, spec, toy_data)
    assert result.metrics == []
    for w, old in zip(result.final_model.weights, before):
        assert np.array_equal(w, old)
    for w, old in zip(result.best_model.weights, before):
        assert np.array_equal(w, old)


def test_run_training_burn_in_disables_interpolation(toy_data):
    spec = small_spec(algorithm="at_gif", interp_batch_size=8, epochs=3, burn_in_epochs=3)
    model = init_model([2, 4, 2], seed=3)
    result = run_training(model, spec, toy_data)
    assert all(m.attackable_ratio_interp is None for m in result.metrics)
    spec2 = small_spec(algorithm="at_gif", interp_batch_size=8, epochs=3, burn_in_epochs=1)
    model2 = init_model([2, 4, 2], seed=3)
    result2 = run_training(model2, spec2, toy_data)
    assert result2.metrics[0].attackable_ratio_interp is None
    assert result2.metrics[1].attackable_ratio_interp is not None


def test_run_training_fallback_when_pool_empties(toy_data):
    # pretrain to perfection, then train with epsilon 0: nothing is attackable
    # after epoch 1, so epoch 2 falls back to original data
    model = init_model([2, 8, 2], seed=13)
    state = SgdState(learning_rate=0.5, momentum=0.9)
    for _ in range(150):
        _, grads = loss_and_grads(model, toy_data.features, toy_data.labels, "ce")
        sgd_step(model, grads, state)
    assert eval_natural(model, toy_data) == 1.0
    spec = small_spec(
        algorithm="at_gif",
        interp_batch_size=8,
        epochs=2,
        attack=AttackSpec(epsilon=0.0, alpha=0.0, steps=1),
        learning_rate=1e-6,
    )
    result = run_training(model, spec, toy_data)
    assert result.metrics[0].attackable_ratio_interp is not None  # pool starts full
    assert result.metrics[0].attackable_set_size == 0
    assert result.metrics[1].attackable_ratio_interp is None  # fallback epoch


def test_run_training_metrics_fields(toy_data):
    spec = small_spec(epochs=2)
    model = init_model([2, 4, 2], seed=7)
    result = run_training(model, spec, toy_data)
    for m in result.metrics:
        assert 0.0 <= m.natural_acc <= 1.0
        assert 0.0 <= m.robust_acc_pgd <= 1.0
        assert 0.0 <= m.robust_acc_cw <= 1.0
        assert 0.0 <= m.attackable_ratio_original <= 1.0
        assert m.attackable_set_size == round(
            m.attackable_ratio_original * m.examined_originals
        )
        assert math.isfinite(m.train_loss)
    assert result.metrics[0].epoch == 1 and result.metrics[1].epoch == 2


def test_best_checkpoint_is_argmax_of_selection_metric(toy_data):
    spec = small_spec(epochs=4, learning_rate=0.3)
    model = init_model([2, 6, 2], seed=11)
    result = run_training(model, spec, toy_data)
    sel = selection_attack(spec)
    best_acc = eval_robust(result.best_model, toy_data, sel)
    final_acc = eval_robust(result.final_model, toy_data, sel)
    assert best_acc >= final_acc
    assert 1 <= result.best_epoch <= 4


def test_variant_smoke_all_families(toy_data):
    for algo, attack in [
        ("trades_gif", TRADES_ATTACK),
        ("gairat_gif", ATTACK),
        ("fastat_gif", FAST_ATTACK),
        ("at_mixup", ATTACK),
    ]:
        spec = small_spec(algorithm=algo, interp_batch_size=8, epochs=2, attack=attack)
        model = init_model([2, 6, 2], seed=21)
        result = run_training(model, spec, toy_data)
        assert all(math.isfinite(m.train_loss) for m in result.metrics)


def test_run_training_oversized_batch_rejected(toy_data):
    spec = small_spec(batch_size=200)
    with pytest.raises(ConfigError):
        run_training(init_model([2, 4, 2], seed=1), spec, toy_data)
