import numpy as np
import pytest
from scipy import stats

from advlab.attacks import (
    AttackSpec,
    cw_margin_loss,
    fgsm_random,
    pgd_attack,
    pgd_attack_with_kappa,
    project,
    run_attack,
    trades_attack,
)
from advlab.errors import ConfigError, DimensionError, ValidationError
from advlab.nn import (
    MlpModel,
    SgdState,
    forward,
    init_model,
    log_softmax,
    loss_and_grads,
    sgd_step,
    softmax,
)
from advlab.rng import stream


def zero_model(sizes):
    m = init_model(sizes, seed=0)
    for w, b in zip(m.weights, m.biases):
        w[:] = 0.0
        b[:] = 0.0
    return m


def increasing_loss_model():
    # logits [10x, -10x]; CE toward class 1 grows with x
    return MlpModel((1, 2), [np.array([[10.0], [-10.0]])], [np.zeros(2)])


@pytest.fixture(scope="module")
def trained_toy():
    """A small classifier fitted on two Gaussian blobs, for ascent checks."""
    rng = stream(100, "toy-data")
    n = 150
    x0 = np.clip(0.3 + 0.07 * rng.standard_normal((n, 2)), 0.0, 1.0)
    x1 = np.clip(0.7 + 0.07 * rng.standard_normal((n, 2)), 0.0, 1.0)
    x = np.vstack([x0, x1])
    y = np.zeros((2 * n, 2))
    y[:n, 0] = 1.0
    y[n:, 1] = 1.0
    model = init_model([2, 8, 2], seed=7)
    state = SgdState(learning_rate=0.5, momentum=0.9, weight_decay=0.0)
    for _ in range(120):
        _, grads = loss_and_grads(model, x, y, "ce")
        sgd_step(model, grads, state)
    return model, x, y


# ---------------------------------------------------------------- project


def test_project_identity_inside_ball():
    rng = stream(1, "proj")
    origin = rng.random((5, 3))
    adv = np.clip(origin + rng.uniform(-0.05, 0.05, origin.shape), 0.0, 1.0)
    out = project(adv, origin, 0.1)
    assert np.array_equal(out, adv)


def test_project_clips_to_ball_and_box():
    assert project(np.array([[0.7]]), np.array([[0.5]]), 0.1)[0, 0] == pytest.approx(0.6)
    assert project(np.array([[1.04]]), np.array([[0.95]]), 0.1)[0, 0] == 1.0
    unclamped = project(np.array([[1.04]]), np.array([[0.95]]), 0.1, clamp=False)
    assert unclamped[0, 0] == pytest.approx(1.04)


def test_project_idempotent_bitwise():
    rng = stream(2, "proj2")
    origin = rng.random((20, 4))
    adv = origin + rng.uniform(-0.3, 0.3, origin.shape)
    once = project(adv, origin, 0.07)
    twice = project(once, origin, 0.07)
    assert np.array_equal(once, twice)


def test_project_shape_mismatch():
    with pytest.raises(DimensionError):
        project(np.zeros((2, 3)), np.zeros((2, 2)), 0.1)


# ---------------------------------------------------------------- cw margin


def test_cw_margin_values():
    assert cw_margin_loss(np.array([[3.0, 1.0]]), [0])[0] == -2.0
    assert cw_margin_loss(np.array([[1.0, 1.0]]), [0])[0] == 0.0
    assert cw_margin_loss(np.array([[1.0, 1.0]]), [1])[0] == 0.0
    assert cw_margin_loss(np.array([[0.0, 2.0, 5.0]]), [1])[0] == 3.0


def test_cw_margin_rejects_bad_labels():
    with pytest.raises(ValidationError):
        cw_margin_loss(np.array([[1.0, 2.0]]), [5])
    with pytest.raises(ValidationError):
        cw_margin_loss(np.array([[1.0]]), [0])


# ---------------------------------------------------------------- pgd


def test_pgd_zero_gradient_model_returns_start():
    m = zero_model([2, 2])
    x = stream(3, "x").random((6, 2))
    y = np.tile([1.0, 0.0], (6, 1))
    spec = AttackSpec(epsilon=0.1, alpha=0.02, steps=5)
    out = pgd_attack(m, x, y, spec)
    assert np.array_equal(out, x)


def test_pgd_hand_derived_1d_trajectory():
    m = increasing_loss_model()
    y = np.array([[0.0, 1.0]])
    x = np.array([[0.5]])
    expected = 0.5
    for steps in (1, 2, 3):
        expected = min(expected + 0.04, 0.5 + 0.1)
        out = pgd_attack(m, x, y, AttackSpec(epsilon=0.1, alpha=0.04, steps=steps))
        assert out[0, 0] == pytest.approx(expected, abs=1e-12)
    assert pgd_attack(m, x, y, AttackSpec(epsilon=0.1, alpha=0.04, steps=3))[0, 0] == pytest.approx(0.6, abs=1e-12)


def test_pgd_ball_and_box_invariants_randomized():
    rng = stream(4, "inv")
    for trial in range(60):
        sizes = [3, int(rng.integers(2, 6)), int(rng.integers(2, 4))]
        model = init_model(sizes, seed=trial)
        x = rng.random((4, 3))
        y = np.zeros((4, sizes[-1]))
        y[np.arange(4), rng.integers(sizes[-1], size=4)] = 1.0
        eps = float(rng.uniform(0.01, 0.3))
        spec = AttackSpec(
            epsilon=eps,
            alpha=float(rng.uniform(0.005, 0.2)),
            steps=int(rng.integers(1, 8)),
            loss="cw_margin" if trial % 3 == 0 else "ce",
        )
        out = pgd_attack(model, x, y, spec, rng=stream(4, "inner", trial))
        assert np.all(np.abs(out - x) <= eps + 1e-12)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_pgd_loss_monotone_on_trained_model(trained_toy):
    model, x, y = trained_toy
    spec = AttackSpec(epsilon=0.08, alpha=0.02, steps=10)
    adv = pgd_attack(model, x, y, spec)
    before = -(y * log_softmax(forward(model, x))).sum(axis=1)
    after = -(y * log_softmax(forward(model, adv))).sum(axis=1)
    assert np.mean(after >= before - 1e-12) >= 0.95


def test_pgd_soft_labels_accepted(trained_toy):
    model, x, _ = trained_toy
    soft = np.tile([0.5, 0.5], (x.shape[0], 1))
    out = pgd_attack(model, x, soft, AttackSpec(epsilon=0.05, alpha=0.01, steps=3))
    assert np.all(np.abs(out - x) <= 0.05 + 1e-12)


def test_pgd_rejects_kl_loss():
    m = zero_model([2, 2])
    with pytest.raises(ConfigError):
        pgd_attack(m, np.zeros((1, 2)), np.array([[1.0, 0.0]]),
                   AttackSpec(epsilon=0.1, alpha=0.1, loss="kl_vs_natural"))


def test_pgd_chunked_equals_serial(trained_toy):
    model, x, y = trained_toy
    spec = AttackSpec(epsilon=0.06, alpha=0.015, steps=6)
    serial = pgd_attack(model, x, y, spec, workers=1)
    chunked = pgd_attack(model, x, y, spec, workers=4)
    assert np.array_equal(serial, chunked)


def test_pgd_cw_increases_margin(trained_toy):
    model, x, y = trained_toy
    labels = np.argmax(y, axis=1)
    spec = AttackSpec(epsilon=0.08, alpha=0.02, steps=10, loss="cw_margin")
    adv = pgd_attack(model, x, y, spec)
    before = cw_margin_loss(forward(model, x), labels)
    after = cw_margin_loss(forward(model, adv), labels)
    assert np.mean(after >= before - 1e-12) >= 0.95


# ---------------------------------------------------------------- kappa


def test_kappa_counts_with_constant_predictor():
    # bias makes the model always predict class 0, regardless of steps
    m = zero_model([2, 2])
    m.biases[-1][:] = [1.0, 0.0]
    x = np.array([[0.5, 0.5], [0.4, 0.6]])
    y = np.array([[1.0, 0.0], [0.0, 1.0]])  # first row "correct" every step
    spec = AttackSpec(epsilon=0.1, alpha=0.02, steps=10)
    _, kappa = pgd_attack_with_kappa(m, x, y, spec)
    assert kappa.tolist() == [10, 0]


def test_kappa_chunked_equals_serial(trained_toy):
    model, x, y = trained_toy
    spec = AttackSpec(epsilon=0.08, alpha=0.02, steps=7)
    adv1, k1 = pgd_attack_with_kappa(model, x, y, spec, workers=1)
    adv3, k3 = pgd_attack_with_kappa(model, x, y, spec, workers=3)
    assert np.array_equal(adv1, adv3)
    assert np.array_equal(k1, k3)


# ---------------------------------------------------------------- fgsm


def test_fgsm_alpha_zero_returns_projected_start():
    m = init_model([2, 5, 2], seed=3)
    x = np.full((10, 2), 0.5)
    y = np.tile([1.0, 0.0], (10, 1))
    spec = AttackSpec(epsilon=0.1, alpha=0.0, steps=1, init="uniform")
    out = fgsm_random(m, x, y, spec, rng=stream(9, "fgsm"))
    start = project(x + stream(9, "fgsm").uniform(-0.1, 0.1, x.shape), x, 0.1)
    assert np.array_equal(out, start)


def test_fgsm_zero_gradient_model_returns_start():
    m = zero_model([2, 2])
    x = np.full((4, 2), 0.5)
    y = np.tile([1.0, 0.0], (4, 1))
    spec = AttackSpec(epsilon=0.05, alpha=0.02, steps=1, init="uniform")
    out = fgsm_random(m, x, y, spec, rng=stream(10, "f2"))
    start = project(x + stream(10, "f2").uniform(-0.05, 0.05, x.shape), x, 0.05)
    assert np.array_equal(out, start)


def test_fgsm_start_offsets_are_uniform():
    m = zero_model([4, 2])
    eps = 0.1
    x = np.full((2500, 4), 0.5)
    y = np.tile([1.0, 0.0], (2500, 1))
    spec = AttackSpec(epsilon=eps, alpha=0.0, steps=1, init="uniform")
    out = fgsm_random(m, x, y, spec, rng=stream(11, "ks"))
    offsets = (out - x).ravel()
    assert offsets.shape[0] == 10_000
    result = stats.kstest(offsets, "uniform", args=(-eps, 2 * eps))
    assert result.pvalue > 0.01


def test_fgsm_requires_uniform_single_step():
    m = zero_model([2, 2])
    x = np.zeros((1, 2))
    y = np.array([[1.0, 0.0]])
    with pytest.raises(ConfigError):
        fgsm_random(m, x, y, AttackSpec(epsilon=0.1, alpha=0.1, steps=1), rng=stream(1))
    with pytest.raises(ConfigError):
        fgsm_random(
            m, x, y, AttackSpec(epsilon=0.1, alpha=0.1, steps=2, init="uniform"), rng=stream(1)
        )


# ---------------------------------------------------------------- trades


def test_trades_zero_gradient_model_returns_projected_gaussian_start():
    m = zero_model([2, 2])
    x = np.full((5, 2), 0.5)
    spec = AttackSpec(epsilon=0.1, alpha=0.02, steps=4, init="gaussian",
                      loss="kl_vs_natural", gaussian_scale=0.01)
    out = trades_attack(m, x, spec, rng=stream(12, "t"))
    start = project(x + 0.01 * stream(12, "t").standard_normal(x.shape), x, 0.1)
    assert np.array_equal(out, start)


def test_trades_increases_kl_on_trained_model(trained_toy):
    model, x, _ = trained_toy
    spec = AttackSpec(epsilon=0.08, alpha=0.02, steps=10, init="gaussian",
                      loss="kl_vs_natural", gaussian_scale=0.001)
    rng_tag = stream(13, "ta")
    adv = trades_attack(model, x, spec, rng=rng_tag)
    start = project(x + 0.001 * stream(13, "ta").standard_normal(x.shape), x, 0.08)

    logp = log_softmax(forward(model, x))
    p = np.exp(logp)

    def kl_rows(z):
        logq = log_softmax(z)
        return np.where(p > 0, p * (logp - logq), 0.0).sum(axis=1)

    kl_start = kl_rows(forward(model, start))
    kl_final = kl_rows(forward(model, adv))
    assert np.mean(kl_final >= kl_start - 1e-12) >= 0.90


def test_trades_requires_gaussian_kl():
    m = zero_model([2, 2])
    with pytest.raises(ConfigError):
        trades_attack(m, np.zeros((1, 2)), AttackSpec(epsilon=0.1, alpha=0.1), rng=stream(1))


def test_trades_default_gamma_matches_protocol():
    spec = AttackSpec(epsilon=0.1, alpha=0.02, steps=10, init="gaussian", loss="kl_vs_natural")
    assert spec.gaussian_scale == 0.001


# ---------------------------------------------------------------- misc


def test_attack_determinism_bitwise(trained_toy):
    model, x, y = trained_toy
    spec = AttackSpec(epsilon=0.07, alpha=0.02, steps=5, init="uniform")
    a = pgd_attack(model, x, y, spec, rng=stream(21, "d"))
    b = pgd_attack(model, x, y, spec, rng=stream(21, "d"))
    assert np.array_equal(a, b)


def test_run_attack_dispatch(trained_toy):
    model, x, y = trained_toy
    ce = run_attack(model, x, y, AttackSpec(epsilon=0.05, alpha=0.01, steps=2))
    assert np.all(np.abs(ce - x) <= 0.05 + 1e-12)
    kl = run_attack(
        model, x, y,
        AttackSpec(epsilon=0.05, alpha=0.01, steps=2, init="gaussian", loss="kl_vs_natural"),
        rng=stream(22, "ra"),
    )
    assert np.all(np.abs(kl - x) <= 0.05 + 1e-12)


def test_attack_spec_validation():
    with pytest.raises(ConfigError):
        AttackSpec(epsilon=-0.1, alpha=0.1)
    with pytest.raises(ConfigError):
        AttackSpec(epsilon=0.1, alpha=0.1, steps=0)
    with pytest.raises(ConfigError):
        AttackSpec(epsilon=0.1, alpha=0.1, init="banana")
    with pytest.raises(ConfigError):
        AttackSpec(epsilon=0.1, alpha=0.1, init="gaussian", gaussian_scale=0.0)
    # epsilon 0 is legal so evaluation can fall back to the natural accuracy
    AttackSpec(epsilon=0.0, alpha=0.0, steps=1)


def test_epsilon_zero_attack_returns_input_bitwise(trained_toy):
    model, x, y = trained_toy
    out = pgd_attack(model, x, y, AttackSpec(epsilon=0.0, alpha=0.05, steps=3))
    assert np.array_equal(out, x)
