import numpy as np
import pytest

from adaptkf import autodiff as ad
from adaptkf.baselines import LstmAdapter, MamlModel, maml_adapt, maml_meta_train, lstm_meta_train
from adaptkf.errors import CapabilityError, ConfigurationError, InsufficientDataError
from adaptkf.model import POST_UPDATE, PRE_UPDATE, MetaModel, ModelDims, TrainConfig
from adaptkf.registry import build_model, load_model, save_model
from adaptkf.tasks import PUCK, REGRESSION, TaskSource, Transition, sample_task, sample_transitions

from .fd import max_rel_error


def transitions(family, n, seed=0, noise=None):
    rng = np.random.default_rng(seed)
    task = sample_task(family, rng)
    if noise is not None:
        task.noise_var = np.full(task.d_s, noise)
    return sample_transitions(task, n, rng)


def test_parameter_parity_on_default_configs():
    kalman = MetaModel(ModelDims(2, 2)).params().num_parameters()
    lstm = LstmAdapter(2, 2).params().num_parameters()
    maml = MamlModel(2, 2).params().num_parameters()
    assert 0.5 <= lstm / kalman <= 2 and 0.5 <= maml / kalman <= 2


# ---------------------------------------------------------------- LSTM


def test_lstm_zero_params_zero_phi():
    m = LstmAdapter(2, 2, d_hidden=8, hidden=(8,))
    for t in m.params().values():
        t.set_data(np.zeros(t.shape))
    sess = m.session()
    for t in transitions(PUCK, 5):
        sess.observe(t.s, t.a, t.s_noisy)
        np.testing.assert_array_equal(sess.hidden_state(), 0.0)


def test_lstm_reset_between_tasks():
    m = LstmAdapter(2, 2, d_hidden=8, hidden=(8,), seed=1)
    sess = m.session()
    first = []
    for seed in range(2):
        sess.reset()
        ts = transitions(PUCK, 3, seed=seed)
        sess.observe(ts[0].s, ts[0].a, ts[0].s_noisy)
        first.append(sess.hidden_state())
        sess.reset()
        first.append(sess.hidden_state())
    np.testing.assert_array_equal(first[1], first[3])
    assert sess.observations_seen == 0


def test_lstm_session_matches_run_sequence():
    m = LstmAdapter(2, 2, d_hidden=8, hidden=(8,), seed=2)
    ts = transitions(PUCK, 5, seed=3)
    post, _, _ = m.run_sequence(ts, POST_UPDATE)
    pre, _, _ = m.run_sequence(ts, PRE_UPDATE)
    sess = m.session()
    for i, t in enumerate(ts):
        np.testing.assert_allclose(sess.predict(t.s, t.a)[0], pre.data[i], atol=1e-13)
        sess.observe(t.s, t.a, t.s_noisy)
        np.testing.assert_allclose(sess.predict(t.s, t.a)[0], post.data[i], atol=1e-13)


def test_lstm_sequence_gradient():
    m = LstmAdapter(2, 2, d_hidden=6, hidden=(8,), seed=4)
    ts = transitions(PUCK, 4, seed=5)
    p = m.params()
    leaves = [p["lstm.w_x"], p["lstm.w_h"], p["readout.layer0.weight"]]
    assert max_rel_error(lambda: m.run_sequence(ts)[1], leaves) <= 1e-3


def test_lstm_regression_adaptation_after_training():
    m = LstmAdapter(1, 0, d_hidden=16, d_phi=8, hidden=(32, 32), seed=0)
    lstm_meta_train(m, TaskSource(REGRESSION),
                    TrainConfig(outer_steps=4000, sequence_length=20, seed=0, learning_rate=3e-3))
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        task = sample_task(REGRESSION, rng)
        task.noise_var = np.zeros(1)
        ts = sample_transitions(task, 10, rng)
        xs = np.random.default_rng(seed).uniform(-2, 2, size=(20, 1))
        truth = task.params.slope * xs + task.params.intercept
        sess = m.session()
        e0 = np.mean((sess.predict(xs, np.zeros((20, 0))) - truth) ** 2)
        for t in ts:
            sess.observe(t.s, t.a, t.s_noisy)
        wins += np.mean((sess.predict(xs, np.zeros((20, 0))) - truth) ** 2) < e0
    assert wins >= 90


# ---------------------------------------------------------------- MAML


def test_maml_validation():
    with pytest.raises(ConfigurationError):
        MamlModel(2, 2, inner_steps=4)
    with pytest.raises(ConfigurationError):
        build_model("maml-3", 2, 2)
    m = MamlModel(2, 2, batch_size=8, hidden=(8,))
    with pytest.raises(InsufficientDataError):
        maml_adapt(m, transitions(PUCK, 7))
    with pytest.raises(CapabilityError):
        m.session().hidden_state()


def test_maml_tiny_alpha_keeps_base_params():
    m = MamlModel(2, 2, hidden=(8,))
    m.alpha_raw.set_data(np.array([[-1000.0]]))
    adapted = maml_adapt(m, transitions(PUCK, 3))
    for name, p in m.net_params.items():
        np.testing.assert_array_equal(adapted[name].data, p.data)


def test_maml_inner_step_hand_computed():
    m = MamlModel(1, 0, hidden=(), init_alpha=0.05)
    m.net_params["layer0.weight"].set_data(np.array([[0.7]]))
    m.net_params["layer0.bias"].set_data(np.array([[-0.2]]))
    batch = [Transition(np.array([x]), np.zeros(0), np.array([0.0]), np.array([y]))
             for x, y in ((1.0, 2.0), (-0.5, 0.3), (2.0, 1.0))]
    x = np.array([t.s[0] for t in batch])
    y = np.array([t.s_noisy[0] for t in batch])
    r = 0.7 * x - 0.2 - y
    gw, gb = 2 * np.mean(r * x), 2 * np.mean(r)
    alpha = m.alpha
    assert alpha == pytest.approx(0.05)
    m1 = MamlModel(1, 0, batch_size=3, hidden=(), init_alpha=0.05)
    m1.load_arrays(m.params().to_arrays())
    adapted = maml_adapt(m1, batch, steps=1)
    assert adapted["layer0.weight"].item() == pytest.approx(0.7 - alpha * gw, rel=1e-12)
    assert adapted["layer0.bias"].item() == pytest.approx(-0.2 - alpha * gb, rel=1e-12)


def test_maml_inner_step_descends():
    m = MamlModel(2, 2, batch_size=4, hidden=(16, 16), init_alpha=1e-3, seed=3)
    ts = transitions(PUCK, 4, seed=6)
    s, a, _, y = (np.stack(v) for v in zip(*[(t.s, t.a, t.s_next, t.s_noisy) for t in ts]))
    with ad.no_grad():
        before = m.batch_mse(m.net_params, s, a, y).item()
        after = m.batch_mse(maml_adapt(m, ts, steps=1), s, a, y).item()
    assert after <= before


def test_maml_session_steps_every_k():
    m = MamlModel(2, 2, batch_size=4, hidden=(8,), seed=1)
    sess = m.session()
    assert sess.report_stride == 4
    ts = transitions(PUCK, 9, seed=7)
    q = (np.zeros((1, 2)), np.array([[0.1, 1.0]]))
    base = sess.predict(*q)
    for i, t in enumerate(ts, 1):
        sess.observe(t.s, t.a, t.s_noisy)
        assert sess.steps_taken == i // 4
        if i < 4:
            np.testing.assert_array_equal(sess.predict(*q), base)
    adapted = maml_adapt(m, ts[:8], steps=2)
    with ad.no_grad():
        ref = m.forward(adapted, *q).data
    np.testing.assert_allclose(sess.predict(*q), ref, atol=1e-14)


def test_maml_adaptation_leaves_base_untouched():
    m = MamlModel(2, 2, hidden=(8,), seed=2)
    before = m.params().checksum()
    sess = m.session()
    for t in transitions(PUCK, 5):
        sess.observe(t.s, t.a, t.s_noisy)
    assert m.params().checksum() == before


def test_maml_training_zero_steps_and_progress():
    m = MamlModel(1, 0, batch_size=4, inner_steps=2, hidden=(32, 32), seed=0)
    before = m.params().checksum()
    maml_meta_train(m, TaskSource(REGRESSION), TrainConfig(outer_steps=0))
    assert m.params().checksum() == before

    def query_error(model):
        errs = []
        for seed in range(30):
            ts = transitions(REGRESSION, 8 + 32, seed=500 + seed, noise=0.1)
            adapted = maml_adapt(model, ts[:8], steps=2)
            s = np.stack([t.s for t in ts[8:]])
            y = np.stack([t.s_next for t in ts[8:]])
            with ad.no_grad():
                errs.append(model.batch_mse(adapted, s, np.zeros((32, 0)), y).item())
        return np.mean(errs)

    pre = query_error(m)
    maml_meta_train(m, TaskSource(REGRESSION), TrainConfig(outer_steps=400, seed=0, learning_rate=3e-3))
    assert query_error(m) < pre
    assert np.isfinite(m.alpha) and m.alpha > 0


# ---------------------------------------------------------------- registry round trips


@pytest.mark.parametrize("method", ["kalman", "lstm", "maml-1", "maml-4", "maml-8"])
def test_checkpoint_round_trip(tmp_path, method):
    m = build_model(method, 2, 2, seed=5)
    path = tmp_path / f"{method}.ckpt"
    save_model(path, m, {"seed": 5})
    back, header = load_model(path)
    assert header["seed"] == 5 and header["model"]["method"] == method
    assert back.params().checksum() == m.params().checksum()
    q = (np.zeros((2, 2)), np.array([[0.1, 1.0], [-0.3, 2.0]]))
    assert back.session().predict(*q).tobytes() == m.session().predict(*q).tobytes()
