import math

import numpy as np
import pytest

from causerec.cause import (
    CauseTrainer,
    CauseVariant,
    batch_gradients,
    batch_loss,
    lr_at,
    momentum_step,
    predict,
    predict_proba,
    sample_gradients,
    sample_loss,
    train_cause,
)
from causerec.datamodel import EmbeddingSet, Hyperparams, Interaction, Interactions, Mode, Origin
from causerec.errors import ConfigError, DataError, DimensionError, DivergenceError, DomainError
from causerec.ingest import gen_synthetic

from gradcheck import MODES, current, fd_instance, random_model, rebuild
from oracles import central_difference, decoupled_sgd, logistic, rel_norm_err

# ---------------------------------------------------------------- optimizer pieces


def test_momentum_one_and_two_steps():
    p, v = momentum_step(1.0, 0.5, 0.0, 0.1, 0.9)
    assert (float(p), float(v)) == pytest.approx((0.95, -0.05), abs=1e-15)
    p, v = momentum_step(p, 0.5, v, 0.1, 0.9)
    assert (float(p), float(v)) == pytest.approx((0.855, -0.095), abs=1e-15)


def test_momentum_zero_is_sgd():
    p = np.array([1.0, -2.0])
    g = np.array([0.3, 0.1])
    new, _ = momentum_step(p, g, np.array([5.0, 5.0]), 0.1, 0.0)
    assert np.array_equal(new, p - 0.1 * g)


def test_momentum_shape_mismatch():
    with pytest.raises(DimensionError):
        momentum_step(np.zeros(3), np.zeros(2), np.zeros(3), 0.1, 0.9)


def test_lr_schedule():
    assert lr_at(0, 10, 0.1, 0.001) == 0.1
    assert lr_at(10, 10, 0.1, 0.001) == 0.001
    assert lr_at(5, 10, 0.1, 0.001) == pytest.approx((0.1 + 0.001) / 2, rel=1e-15)
    with pytest.raises(DomainError):
        lr_at(11, 10, 0.1, 0.001)
    with pytest.raises(DomainError):
        lr_at(0, 0, 0.1, 0.001)


# ---------------------------------------------------------------- sample loss

def scalar_model(gamma, theta_c, theta_t, mode=Mode.PROD_ONLY, scale=1.0, bias=0.0, variant="prod-c"):
    g = np.atleast_2d(np.asarray(gamma, dtype=float))
    return EmbeddingSet(g, g, np.atleast_2d(np.asarray(theta_t, dtype=float)),
                        np.atleast_2d(np.asarray(theta_c, dtype=float)), scale, bias, mode, variant)


def test_zero_embeddings_loss_is_ln2():
    m = scalar_model(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)))
    h = Hyperparams(dim=3, lambda_t=0, lambda_c=0, lambda_dist=0)
    for origin in Origin:
        assert sample_loss(m, (0, 0, 1, origin), h) == pytest.approx(math.log(2), abs=1e-15)


def test_equal_copies_zero_discrepancy():
    rng = np.random.default_rng(0)
    th = rng.normal(size=(1, 4))
    m = scalar_model(rng.normal(size=(1, 4)), th, th.copy())
    big = Hyperparams(dim=4, lambda_t=0, lambda_c=0, lambda_dist=1e6)
    none = big.replace(lambda_dist=0.0)
    for origin in Origin:
        assert sample_loss(m, (0, 0, 1, origin), big) == sample_loss(m, (0, 0, 1, origin), none)


def test_dim1_control_sample_terms():
    # -ln sigmoid(0.5) + 0.1 * 0.25 + 0.2 * 0.25, each term evaluated separately
    expected = -math.log(logistic(0.5)) + 0.1 * 0.5 ** 2 + 0.2 * (1.0 - 0.5) ** 2
    assert expected == pytest.approx(0.549077, abs=1e-6)
    m = scalar_model([[1.0]], [[0.5]], [[1.0]])
    h = Hyperparams(dim=1, lambda_c=0.1, lambda_t=0.0, lambda_dist=0.2)
    assert sample_loss(m, (0, 0, 1, Origin.CONTROL), h) == pytest.approx(expected, rel=1e-14)


def test_sample_loss_index_error():
    m = scalar_model([[1.0]], [[0.5]], [[1.0]])
    with pytest.raises(IndexError):
        sample_loss(m, (0, 3, 1, Origin.CONTROL), Hyperparams(dim=1))


# ---------------------------------------------------------------- gradients

def test_gradients_vanish_at_zero_residual():
    rng = np.random.default_rng(1)
    g, t = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    # bias 40 saturates the sigmoid to exactly 1.0 in double precision
    m = scalar_model(g, t, t + 0.3, bias=40.0)
    assert logistic(40.0 + float(g[0] @ t[0])) == 1.0
    h = Hyperparams(dim=4, lambda_t=0, lambda_c=0, lambda_dist=0)
    for origin in Origin:
        sg = sample_gradients(m, (0, 0, 1, origin), h)
        assert sg.calib_scale == 0 and sg.calib_bias == 0
        assert all(not np.any(v) for rows in sg.rows.values() for v in rows.values())


def test_discrepancy_gradient_zero_when_copies_equal():
    rng = np.random.default_rng(2)
    t = rng.normal(size=(1, 4))
    m = scalar_model(rng.normal(size=(1, 4)), t, t.copy())
    with_d = Hyperparams(dim=4, lambda_t=0.3, lambda_c=0.2, lambda_dist=7.0)
    for origin in Origin:
        a = sample_gradients(m, (0, 0, 0, origin), with_d)
        b = sample_gradients(m, (0, 0, 0, origin), with_d.replace(lambda_dist=0.0))
        assert a.rows.keys() == b.rows.keys()
        for key in a.rows:
            assert np.array_equal(a.rows[key][0], b.rows[key][0])


@pytest.mark.parametrize("mode,variant", MODES)
@pytest.mark.parametrize("loss", ["bce", "squared"])
def test_sample_gradients_match_finite_differences(mode, variant, loss):
    rng = np.random.default_rng(hash((mode.value, variant, loss)) % 2 ** 32)
    errs = {Origin.CONTROL: [], Origin.TREATMENT: []}
    for _ in range(100):
        err, origin = fd_instance(rng, mode, variant, loss)
        errs[origin].append(err)
    assert errs[Origin.CONTROL] and errs[Origin.TREATMENT]
    assert max(max(v) for v in errs.values()) < 1e-5


def batch_fd(rng, mode, variant):
    dim = int(rng.integers(1, 9))
    model = random_model(rng, mode, variant, nu=5, ni=6, dim=dim)
    n = int(rng.integers(1, 33))
    batch = Interactions(rng.integers(0, 5, n), rng.integers(0, 6, n), rng.integers(0, 2, n), rng.integers(0, 2, n))
    h = Hyperparams(dim=dim, lambda_t=0.1, lambda_c=0.2, lambda_dist=0.3)
    grads = batch_gradients(model, batch, h, lambda_user=0.05)
    analytic, numeric = [], []
    tables = (["gamma_c", "gamma_t"] if mode.splits_users else ["gamma"]) + \
        (["theta_c", "theta_t"] if mode.splits_items else ["theta"])
    for table in tables:
        rows = 1 if (table == "theta_t" and variant == "avg") else (5 if table.startswith("gamma") else 6)
        for r in range(rows):
            f = lambda x: batch_loss(rebuild(model, table, r, x), batch, h, lambda_user=0.05)  # noqa: E731
            numeric.append(central_difference(f, current(model, table, r)))
            analytic.append(grads[table][r])
    f = lambda x: batch_loss(rebuild(model, "calib", 0, x), batch, h, lambda_user=0.05)  # noqa: E731
    numeric.append(central_difference(f, [model.calib_scale, model.calib_bias]))
    analytic.append(np.array([float(grads["scale"]), float(grads["bias"])]))
    return rel_norm_err(analytic, numeric)


@pytest.mark.parametrize("mode,variant", MODES)
def test_batch_gradient_matches_finite_differences(mode, variant):
    rng = np.random.default_rng(11)
    assert max(batch_fd(rng, mode, variant) for _ in range(10)) < 1e-5


def test_no_discrepancy_loss_decomposes():
    rng = np.random.default_rng(5)
    for mode, variant in MODES:
        model = random_model(rng, mode, variant, nu=5, ni=6, dim=4)
        batch = Interactions(rng.integers(0, 5, 40), rng.integers(0, 6, 40), rng.integers(0, 2, 40),
                             rng.integers(0, 2, 40))
        h = Hyperparams(dim=4, lambda_t=0.1, lambda_c=0.2, lambda_dist=0.0)
        total = batch_loss(model, batch, h, norm=1.0)
        control = batch[batch.origins == 0]
        treat = batch[batch.origins == 1]
        parts = batch_loss(model, control, h, norm=1.0) + batch_loss(model, treat, h, norm=1.0)
        by_sample = sum(sample_loss(model, e, h) for e in batch)
        assert total == pytest.approx(parts, abs=1e-12)
        assert total == pytest.approx(by_sample, abs=1e-12)


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def small_split():
    split, _ = gen_synthetic(40, 25, 4, 1.0, 30, seed=3, s_t_injection=0.3)
    return split


def test_decoupled_when_no_discrepancy(small_split):
    sp = small_split
    h = Hyperparams(dim=4, lambda_c=0.01, lambda_t=0.02, lambda_dist=0.0, epochs=3, batch_size=32, seed=7)
    m = train_cause(sp.s_c, sp.s_t, h, Mode.BOTH, num_users=40, num_items=25, learn_calibration=False)
    c, t = decoupled_sgd(sp.s_c, sp.s_t, 40, 25, 4, 0.01, 0.02, h.lr_start, h.lr_end, h.momentum, 3, 32, 7,
                         h.init_scale)
    for got, want in ((m.gamma_c, c["g"]), (m.theta_c, c["t"]), (m.gamma_t, t["g"]), (m.theta_t, t["t"])):
        assert np.max(np.abs(got - want)) < 1e-10


def test_strong_discrepancy_couples_copies(small_split):
    sp = small_split
    m = train_cause(sp.s_c, sp.s_t, Hyperparams(dim=4, lambda_dist=1e6, epochs=5, batch_size=64),
                    num_users=40, num_items=25)
    assert np.linalg.norm(m.theta_t - m.theta_c) / np.linalg.norm(m.theta_c) < 0.01
    users, items = np.meshgrid(np.arange(40), np.arange(25), indexing="ij")
    diff = predict_proba(m, users.ravel(), items.ravel(), "prod-c") - \
        predict_proba(m, users.ravel(), items.ravel(), "prod-t")
    assert np.max(np.abs(diff)) < 1e-3


def test_same_seed_bit_identical(small_split):
    sp = small_split
    h = Hyperparams(dim=4, epochs=2, batch_size=64, seed=11)
    for mode, variant in MODES:
        a = train_cause(sp.s_c, sp.s_t, h, mode, CauseVariant(variant), 40, 25)
        b = train_cause(sp.s_c, sp.s_t, h, mode, CauseVariant(variant), 40, 25)
        assert a.identical_to(b)
    c = train_cause(sp.s_c, sp.s_t, h.replace(seed=12), num_users=40, num_items=25)
    assert not c.identical_to(a)


def test_avg_variant_rows_identical(small_split):
    sp = small_split
    m = train_cause(sp.s_c, sp.s_t, Hyperparams(dim=4, epochs=3, batch_size=64), Mode.PROD_ONLY,
                    CauseVariant.AVG, 40, 25)
    assert np.all(m.theta_t == m.theta_t[0])
    assert not np.all(m.theta_c == m.theta_c[0])


def test_prod_mode_users_stay_shared(small_split):
    sp = small_split
    trainer = CauseTrainer(Hyperparams(dim=4, epochs=2, batch_size=64))
    m = trainer.fit(sp.s_c, sp.s_t, 40, 25)
    assert "gamma_t" not in trainer.state_.params and "gamma_c" not in trainer.state_.params
    assert np.array_equal(m.gamma_t, m.gamma_c)


def test_loss_decreases_over_training():
    for seed in range(10):
        split, _ = gen_synthetic(200, 100, 8, 1.0, 100, seed=seed)
        trainer = CauseTrainer(Hyperparams(seed=seed))
        trainer.fit(split.s_c, split.s_t, 200, 100)
        assert trainer.epoch_losses_[-1] <= trainer.epoch_losses_[0]


def test_empty_treatment_sample_allowed(small_split):
    m = train_cause(small_split.s_c, Interactions.empty(), Hyperparams(dim=4, epochs=1), num_users=40,
                    num_items=25)
    assert np.all(np.isfinite(m.theta_c))


def test_empty_control_rejected(small_split):
    with pytest.raises(DataError):
        train_cause(Interactions.empty(), small_split.s_t, Hyperparams(dim=4))


def test_divergence_names_step(small_split):
    h = Hyperparams(dim=4, lr_start=1e4, lr_end=1e4, lambda_dist=0.0, epochs=3)
    with pytest.raises(DivergenceError) as info:
        train_cause(small_split.s_c, small_split.s_t, h, num_users=40, num_items=25)
    assert info.value.step is not None and f"step {info.value.step}" in str(info.value)


def test_invalid_mode_variant_combinations():
    with pytest.raises(ConfigError):
        CauseTrainer(Hyperparams(), Mode.SHARED)
    with pytest.raises(ConfigError):
        CauseTrainer(Hyperparams(), Mode.USER_ONLY, CauseVariant.AVG)


def test_predict_zero_model_and_range():
    m = scalar_model(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)))
    assert predict(m, "prod-c", 1, 1) == 0.5 and predict(m, "prod-t", 0, 1) == 0.5
    rng = np.random.default_rng(4)
    m = scalar_model(rng.normal(size=(3, 2)) * 5, rng.normal(size=(4, 2)) * 5, rng.normal(size=(4, 2)) * 5)
    for i in range(3):
        for j in range(4):
            assert 0.0 < predict(m, "prod-t", i, j) < 1.0
    with pytest.raises(IndexError):
        predict(m, "prod-c", 3, 0)


def test_predict_uses_requested_item_matrix():
    m = scalar_model([[1.0]], [[0.0]], [[math.log(3)]])
    assert predict(m, "prod-c", 0, 0) == 0.5
    assert predict(m, "prod-t", 0, 0) == pytest.approx(0.75, abs=1e-15)
    assert predict(m, "avg", 0, 0) == 0.5


def test_interaction_tuple_accepted():
    m = scalar_model([[1.0]], [[0.5]], [[1.0]])
    h = Hyperparams(dim=1)
    assert sample_loss(m, Interaction(0, 0, 1, Origin.TREATMENT), h) == sample_loss(m, (0, 0, 1, 1), h)
