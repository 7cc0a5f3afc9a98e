import numpy as np
import pytest

from adaptkf import autodiff as ad
from adaptkf.autodiff import Tensor
from adaptkf.errors import ConfigurationError, NumericalAbort, SingularMatrixError
from adaptkf.kalman import GaussianBelief, Measurement
from adaptkf.model import (POST_UPDATE, PRE_UPDATE, MetaModel, ModelDims, TrainConfig, meta_train,
                           sample_latent, stack_transitions, train_loop)
from adaptkf.tasks import PUCK, REGRESSION, TaskSource, Transition, sample_task, sample_transitions

from .fd import max_rel_error

SMALL = dict(hidden=(12, 12))


def small_model(d_s=2, d_a=2, seed=0, d=4):
    return MetaModel(ModelDims(d_s, d_a, d, d), seed=seed, **SMALL)


def zero_model(**kw):
    m = small_model(**kw)
    for name, t in m.params().items():
        if not name.startswith("filter"):
            t.set_data(np.zeros(t.shape))
    return m


def puck_transitions(n, seed=0):
    rng = np.random.default_rng(seed)
    return sample_transitions(sample_task(PUCK, rng), n, rng)


def test_network_widths():
    m = MetaModel(ModelDims(2, 2))
    assert m.measurement_cfg.layer_sizes == (6, 128, 128, 128, 32)
    assert m.prediction_cfg.layer_sizes == (20, 128, 128, 128, 2)
    r = MetaModel(ModelDims(1, 0))
    assert r.measurement_cfg.d_in == 2 and r.prediction_cfg.d_in == 17


def test_zero_network_measurement_and_prediction():
    m = zero_model()
    meas = m.measure([0.1, 0.2], [0.3, 1.0], [0.5, 0.5])
    np.testing.assert_array_equal(meas.mean.data, 0.0)
    np.testing.assert_allclose(meas.var_diag.data, np.log(2) + 1e-6, rtol=1e-12)
    np.testing.assert_array_equal(m.predict_next([0.1, 0.2], [0.3, 1.0], m.initial_belief()).data, 0.0)


def test_measurement_variance_positive():
    m = small_model()
    rng = np.random.default_rng(0)
    x = rng.normal(scale=5, size=(10_000, 6))
    with ad.no_grad():
        _, var = m._measure_rows(x[:, :2], x[:, 2:4], x[:, 4:])
    assert np.all(var.data > 0)


def test_measurement_gradient():
    m = small_model(seed=3)
    x = np.random.default_rng(1).uniform(-2, 2, size=(1, 6))
    f = lambda: ad.sum(m._measure_rows(x[:, :2], x[:, 2:4], x[:, 4:])[0])  # noqa: E731
    p = m.measurement_params
    assert max_rel_error(f, [p["layer0.weight"], p["layer2.bias"]]) <= 1e-4


def test_prediction_ignores_covariance_and_has_mean_gradient():
    m = small_model(seed=4)
    mean = Tensor(np.random.default_rng(0).normal(size=(1, 4)), requires_grad=True)
    a = m.predict_next([0.0, 0.1], [0.2, 1.5], GaussianBelief(mean, Tensor(np.eye(4)))).data
    b = m.predict_next([0.0, 0.1], [0.2, 1.5], GaussianBelief(mean, Tensor(9 * np.eye(4)))).data
    assert a.tobytes() == b.tobytes()
    cov = Tensor(np.eye(4))
    f = lambda: ad.sum(m.predict_next([0.0, 0.1], [0.2, 1.5], GaussianBelief(mean, cov)))  # noqa: E731
    assert max_rel_error(f, [mean]) <= 1e-4


def test_prediction_input_validation():
    m = small_model()
    with pytest.raises(ConfigurationError):
        m.predict_next([0.0], [0.1, 1.0], m.initial_belief())
    with pytest.raises(ConfigurationError):
        m.measure([0.0, 0.0, 0.0], [0.1, 1.0], [0.0, 0.0])


def test_uncertainty_degenerate_belief():
    m = small_model(seed=5)
    b = GaussianBelief(Tensor(np.full((1, 4), 0.3)), Tensor(np.zeros((4, 4))))
    draws = m.predict_with_uncertainty([[0.0, 0.0]], [[0.1, 2.0]], b, 50, seed=0)
    ref = m.predict_next([0.0, 0.0], [0.1, 2.0], b).data
    assert draws.shape == (50, 1, 2)
    assert np.abs(draws - ref[None]).max() <= 1e-3


def test_latent_sampling_statistics():
    rng = np.random.default_rng(1)
    l = rng.normal(size=(4, 4))
    cov = l @ l.T + 0.5 * np.eye(4)
    mean = rng.normal(size=(1, 4))
    b = GaussianBelief(Tensor(mean), Tensor(cov))
    n = 100_000
    phi = sample_latent(b, n, seed=2)
    sd = np.sqrt(np.diag(cov))
    assert np.all(np.abs(phi.mean(axis=0) - mean[0]) <= 4 * sd / np.sqrt(n))
    emp = np.cov(phi.T)
    # relative to the scale of each entry's row/column variances
    scale = np.sqrt(np.outer(np.diag(cov), np.diag(cov)))
    assert np.abs(emp - cov).max() / scale.max() <= 0.05
    assert np.all(np.abs(emp - cov) <= 0.05 * np.maximum(np.abs(cov), 0.2 * scale))


def test_latent_sampling_rejects_indefinite():
    b = GaussianBelief(Tensor(np.zeros((1, 2))), Tensor(np.diag([1.0, -1.0])))
    with pytest.raises(SingularMatrixError):
        sample_latent(b, 5, 0)


def test_run_sequence_zero_net_zero_target():
    m = zero_model()
    t = Transition(np.zeros(2), np.array([0.1, 1.0]), np.zeros(2), np.zeros(2))
    for ordering in (POST_UPDATE, PRE_UPDATE):
        _, loss, beliefs = m.run_sequence([t], ordering)
        assert loss.item() == 0.0 and len(beliefs) == 1
    with pytest.raises(ValueError):
        m.run_sequence([])


def test_run_sequence_loss_matches_hand_computation():
    m = small_model(seed=6)
    ts = puck_transitions(3, seed=1)
    _, _, s_next, _ = stack_transitions(ts)
    for ordering in (POST_UPDATE, PRE_UPDATE):
        pred, loss, beliefs = m.run_sequence(ts, ordering)
        assert loss.item() == pytest.approx(np.mean(np.sum((pred.data - s_next) ** 2, axis=1)),
                                            rel=1e-14)
        # post: the belief after that step's update; pre: the one before it
        used = beliefs if ordering == POST_UPDATE else [m.initial_belief()] + beliefs[:-1]
        for i, t in enumerate(ts):
            np.testing.assert_allclose(pred.data[i], m.predict_next(t.s, t.a, used[i]).data[0],
                                       atol=1e-14)


def test_run_sequence_matches_session():
    m = small_model(seed=7)
    ts = puck_transitions(6, seed=2)
    _, _, beliefs = m.run_sequence(ts)
    sess = m.session()
    for t, b in zip(ts, beliefs):
        sess.observe(t.s, t.a, t.s_noisy)
        np.testing.assert_allclose(sess.belief.mean.data, b.mean.data, atol=1e-13)
        np.testing.assert_allclose(sess.belief.cov.data, b.cov.data, atol=1e-13)


def test_loss_gradient_linear_in_residual():
    m = small_model(seed=8)
    ts = puck_transitions(4, seed=3)
    pred, _, _ = m.run_sequence(ts)
    bias = m.prediction_params["layer2.bias"]
    grads = []
    for k in (1.0, 2.0):
        shifted = [Transition(t.s, t.a, p - k * (p - t.s_next), t.s_noisy)
                   for t, p in zip(ts, pred.data)]
        m.params().zero_grad()
        ad.backward(m.run_sequence(shifted)[1])
        grads.append(bias.grad.copy())
    np.testing.assert_allclose(grads[1], 2 * grads[0], rtol=1e-10)


def test_loss_invariant_to_unused_operations():
    m = small_model(seed=9)
    ts = puck_transitions(3, seed=4)
    _, loss, _ = m.run_sequence(ts)
    m.params().zero_grad()
    ad.backward(loss)
    ref = {k: v.grad.copy() for k, v in m.params().items()}
    _, loss2, beliefs = m.run_sequence(ts)
    _ = ad.sum(ad.exp(beliefs[-1].cov))  # dangling branch
    m.params().zero_grad()
    ad.backward(loss2)
    assert loss.item() == loss2.item()
    for k, v in m.params().items():
        np.testing.assert_array_equal(v.grad, ref[k])


def test_full_chain_gradient():
    m = small_model(seed=10)
    ts = puck_transitions(5, seed=5)
    f = lambda: m.run_sequence(ts)[1]  # noqa: E731
    p = m.params()
    leaves = [p["measurement.layer0.weight"], p["filter.c_z"], p["filter.init_log_var"],
              p["filter.init_mean"], p["prediction.layer1.weight"]]
    assert max_rel_error(f, leaves) <= 1e-3


# ---------------------------------------------------------------- sessions


def test_session_counter_reset_and_purity():
    m = small_model(seed=11)
    ts = puck_transitions(5, seed=6)
    sess = m.session()
    before = m.params().checksum()
    prior = sess.belief
    for k, t in enumerate(ts, 1):
        sess.observe(t.s, t.a, t.s_noisy)
        assert sess.observations_seen == k
    assert np.linalg.norm(sess.hidden_state() - prior.mean.data[0]) > 0
    assert m.params().checksum() == before
    sess.reset()
    first = sess.belief
    sess.reset()
    fresh = m.session()
    for b in (sess.belief, fresh.belief):
        assert b.mean.data.tobytes() == first.mean.data.tobytes()
        assert b.cov.data.tobytes() == first.cov.data.tobytes()
    q = ([[0.01, 0.0]], [[0.2, 1.1]])
    assert sess.predict(*q).tobytes() == small_model(seed=11).session().predict(*q).tobytes()
    assert sess.observations_seen == 0


def test_uninformative_observation_keeps_belief():
    m = small_model(seed=12)
    sess = m.session()
    mean0 = sess.belief.mean.data.copy()
    sess.observe_measurement(Measurement(Tensor(np.full((1, 4), 3.0)), Tensor(np.full((1, 4), 1e12))))
    assert np.abs(sess.belief.mean.data - mean0).max() <= 1e-6


# ---------------------------------------------------------------- training


def test_zero_steps_leaves_model_unchanged():
    m = small_model(seed=13)
    before = m.params().checksum()
    log = meta_train(m, TaskSource(PUCK), TrainConfig(outer_steps=0, sequence_length=5))
    assert len(log) == 0 and m.params().checksum() == before


def test_training_is_deterministic():
    sums = []
    for _ in range(2):
        m = small_model(seed=14)
        meta_train(m, TaskSource(PUCK), TrainConfig(outer_steps=5, sequence_length=8, seed=3))
        sums.append(m.params().checksum())
    assert sums[0] == sums[1]


def test_regression_training_makes_progress():
    m = MetaModel(ModelDims(1, 0, 4, 4), hidden=(16, 16), seed=0)
    log = meta_train(m, TaskSource(REGRESSION),
                     TrainConfig(outer_steps=300, sequence_length=20, seed=0, learning_rate=3e-3))
    losses = np.array(log.losses)
    k = len(losses) // 10
    assert losses[-k:].mean() < losses[:k].mean()
    assert log.task_ids[0] == "regression-0" and len(log.wall_times) == 300


def test_non_finite_loss_aborts_with_diagnostics():
    m = small_model()

    def bad_loss(task, transitions):
        return ad.scale(m.run_sequence(transitions)[1], float("nan"))

    with pytest.raises(NumericalAbort) as info:
        train_loop(m.params(), bad_loss, TaskSource(PUCK), TrainConfig(outer_steps=3, sequence_length=2), 2)
    assert info.value.diagnostics["step"] == 0 and "task" in info.value.diagnostics


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(sequence_length=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(outer_steps=-1)
    with pytest.raises(ConfigurationError):
        TrainConfig(loss_ordering="sideways")
    assert TrainConfig().loss_ordering == PRE_UPDATE
