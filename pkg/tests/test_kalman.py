import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptkf import autodiff as ad
from adaptkf.autodiff import Tensor
from adaptkf.errors import DimensionError
from adaptkf.kalman import (FilterParams, GaussianBelief, Measurement, filter_sequence, predict_step,
                            update_step)

from .fd import max_rel_error


def make_fp(c, eps_q=1e-4, mean=None, log_var=None):
    d_phi = c.shape[1]
    mean = np.zeros((1, d_phi)) if mean is None else mean
    log_var = np.zeros((1, d_phi)) if log_var is None else log_var
    return FilterParams(Tensor(c, requires_grad=True), Tensor(mean, requires_grad=True),
                        Tensor(log_var, requires_grad=True), eps_q)


def belief(mean, cov):
    return GaussianBelief(Tensor(np.atleast_2d(mean)), Tensor(cov))


def meas(mean, var):
    return Measurement(Tensor(np.atleast_2d(mean)), Tensor(np.atleast_2d(var)))


def random_spd(rng, n, lo=0.2, hi=2.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return q @ np.diag(rng.uniform(lo, hi, n)) @ q.T


def conditioning_oracle(m, p, c, z, r):
    """Posterior of x ~ N(m, p) given z = c x + v, v ~ N(0, diag(r)), by joint-Gaussian conditioning."""
    s_xz = p @ c.T
    s_zz = c @ p @ c.T + np.diag(r)
    mean = m + np.linalg.solve(s_zz, z - c @ m) @ s_xz.T
    cov = p - s_xz @ np.linalg.solve(s_zz, s_xz.T)
    return mean, cov


def information_oracle(m, p, c, z, r):
    """Same posterior in information form; numerically independent of the gain formula."""
    p_inv = np.linalg.inv(p)
    r_inv = np.diag(1 / r)
    cov = np.linalg.inv(p_inv + c.T @ r_inv @ c)
    mean = cov @ (p_inv @ m + c.T @ r_inv @ z)
    return mean, cov


def test_predict_examples():
    fp = make_fp(np.eye(2))
    out = predict_step(belief([1.0, 2.0], np.eye(2)), fp)
    np.testing.assert_array_equal(out.mean.data, [[1.0, 2.0]])
    np.testing.assert_allclose(out.cov.data, 1.0001 * np.eye(2), rtol=0, atol=1e-15)
    out = predict_step(belief([0.0, 0.0], np.zeros((2, 2))), fp)
    np.testing.assert_allclose(out.cov.data, 1e-4 * np.eye(2))


def test_predict_raises_min_eigenvalue():
    rng = np.random.default_rng(0)
    fp = make_fp(np.eye(5))
    for _ in range(50):
        p = random_spd(rng, 5, 0.0, 3.0)
        out = predict_step(belief(np.zeros(5), p), fp)
        assert np.linalg.eigvalsh(out.cov.data).min() >= np.linalg.eigvalsh(p).min() + 1e-4 - 1e-9


def test_scalar_conjugate_update():
    fp = make_fp(np.eye(1))
    post = update_step(belief([0.0], np.eye(1)), meas([2.0], [1.0]), fp)
    assert post.mean.item() == pytest.approx(1.0)
    assert post.cov.item() == pytest.approx(0.5)


def test_uninformative_measurement_leaves_belief():
    rng = np.random.default_rng(1)
    c = rng.normal(size=(3, 4))
    prior = belief(rng.normal(size=4), random_spd(rng, 4))
    post = update_step(prior, meas(rng.normal(size=3) * 10, np.full(3, 1e12)), make_fp(c))
    assert np.abs(post.mean.data - prior.mean.data).max() <= 1e-6
    np.testing.assert_allclose(post.cov.data, prior.cov.data, atol=1e-6)


def test_update_matches_oracle_fixed_case():
    rng = np.random.default_rng(2)
    c = rng.normal(size=(3, 4))
    m, p = rng.normal(size=4), random_spd(rng, 4)
    z, r = rng.normal(size=3), rng.uniform(0.1, 2.0, size=3)
    post = update_step(belief(m, p), meas(z, r), make_fp(c))
    ref_m, ref_p = conditioning_oracle(m, p, c, z, r)
    np.testing.assert_allclose(post.mean.data[0], ref_m, atol=1e-8, rtol=0)
    np.testing.assert_allclose(post.cov.data, ref_p, atol=1e-8, rtol=0)


def test_update_matches_oracles_random_cases():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        d_phi, d_z = rng.integers(1, 9, size=2)
        c = rng.normal(size=(d_z, d_phi)) / np.sqrt(d_phi)
        m, p = rng.normal(size=d_phi), random_spd(rng, d_phi)
        z, r = rng.normal(size=d_z), rng.uniform(0.1, 2.0, size=d_z)
        post = update_step(belief(m, p), meas(z, r), make_fp(c))
        for oracle in (conditioning_oracle, information_oracle):
            ref_m, ref_p = oracle(m, p, c, z, r)
            worst = max(worst, np.abs(post.mean.data[0] - ref_m).max(), np.abs(post.cov.data - ref_p).max())
    assert worst <= 1e-8


def test_order_independence_without_process_noise():
    rng = np.random.default_rng(4)
    for _ in range(50):
        d_phi, d_z = rng.integers(1, 9, size=2)
        fp = make_fp(rng.normal(size=(d_z, d_phi)), eps_q=0.0,
                     mean=rng.normal(size=(1, d_phi)), log_var=rng.normal(size=(1, d_phi)))
        ms = [meas(rng.normal(size=d_z), rng.uniform(0.1, 2.0, size=d_z)) for _ in range(6)]
        ref = filter_sequence(fp, ms)[-1]
        for _ in range(3):
            perm = [ms[i] for i in rng.permutation(len(ms))]
            out = filter_sequence(fp, perm)[-1]
            np.testing.assert_allclose(out.mean.data, ref.mean.data, atol=1e-8, rtol=0)
            np.testing.assert_allclose(out.cov.data, ref.cov.data, atol=1e-8, rtol=0)


def test_filter_sequence_examples():
    fp = make_fp(np.eye(1))
    assert filter_sequence(fp, []) == []
    np.testing.assert_array_equal(fp.initial_belief().cov.data, np.eye(1))
    (post,) = filter_sequence(fp, [meas([2.0], [1.0])])
    prior_var = 1 + 1e-4
    assert post.cov.item() == pytest.approx(prior_var / (prior_var + 1))
    assert post.mean.item() == pytest.approx(2 * prior_var / (prior_var + 1))


def test_variance_nonincreasing_up_to_q():
    rng = np.random.default_rng(5)
    fp = make_fp(np.eye(4))
    r = rng.uniform(0.1, 1.0, size=4)
    bs = filter_sequence(fp, [meas(rng.normal(size=4), r) for _ in range(30)])
    var = np.stack([b.marginal_variances() for b in bs])
    assert np.all(var[1:] <= var[:-1] + 1e-4 + 1e-12)


def test_posterior_below_prior_plus_q_in_loewner_order():
    rng = np.random.default_rng(6)
    for _ in range(200):
        d_phi, d_z = rng.integers(1, 9, size=2)
        fp = make_fp(rng.normal(size=(d_z, d_phi)))
        prior = belief(rng.normal(size=d_phi), random_spd(rng, d_phi))
        post = update_step(predict_step(prior, fp), meas(rng.normal(size=d_z),
                                                          rng.uniform(0.01, 2, size=d_z)), fp)
        gap = prior.cov.data + 1e-4 * np.eye(d_phi) - post.cov.data
        assert np.linalg.eigvalsh(gap).min() >= -1e-8


def test_variance_floor_after_many_updates():
    fp = make_fp(np.eye(2))
    m = meas([0.5, -0.5], [1e-6, 1e-6])
    b = fp.initial_belief()
    with ad.no_grad():
        for _ in range(10_000):
            b = update_step(predict_step(b, fp), m, fp)
    assert b.marginal_variances().min() >= 1e-9
    assert np.linalg.norm(b.cov.data - b.cov.data.T, np.inf) <= 1e-9


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_belief_invariants_hold(d_phi, d_z, seed):
    rng = np.random.default_rng(seed)
    fp = make_fp(rng.normal(size=(d_z, d_phi)))
    ms = [meas(rng.normal(size=d_z) * 3, rng.uniform(1e-6, 5, size=d_z)) for _ in range(8)]
    for b in filter_sequence(fp, ms):
        cov = b.cov.data
        assert np.all(np.isfinite(cov)) and np.all(np.isfinite(b.mean.data))
        assert np.abs(cov - cov.T).max() <= 1e-9
        np.linalg.cholesky(cov + 1e-9 * np.eye(d_phi))


def test_measurement_validation():
    with pytest.raises(ValueError):
        meas([0.0], [1e-7])
    with pytest.raises(DimensionError):
        meas([0.0, 1.0], [1.0])
    fp = make_fp(np.eye(2))
    with pytest.raises(DimensionError):
        update_step(fp.initial_belief(), meas([0.0, 1.0, 2.0], [1.0, 1.0, 1.0]), fp)


def test_filter_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    fp = make_fp(rng.normal(size=(3, 4)), mean=rng.normal(size=(1, 4)),
                 log_var=rng.normal(size=(1, 4)) * 0.3)
    z = [Tensor(rng.normal(size=(1, 3)), requires_grad=True) for _ in range(5)]
    r = [Tensor(rng.uniform(0.2, 1.0, size=(1, 3)), requires_grad=True) for _ in range(5)]
    w = Tensor(rng.normal(size=(4, 1)))

    def loss():
        b = filter_sequence(fp, [Measurement(a, v) for a, v in zip(z, r)])[-1]
        return ad.add(ad.matmul(b.mean, w), ad.sum(b.cov))

    leaves = [fp.c_z, fp.init_mean, fp.init_log_var, z[0], r[0]]
    assert max_rel_error(loss, leaves) <= 1e-3
    ad.backward(loss())
    assert np.abs(fp.c_z.grad).max() > 0 and np.abs(fp.init_log_var.grad).max() > 0


def test_filter_params_create():
    fp = FilterParams.create(16, 16)
    np.testing.assert_array_equal(fp.c_z.data, np.eye(16))
    assert fp.params().keys() == ["c_z", "init_log_var", "init_mean"]
    assert not fp.q.requires_grad
    assert FilterParams.create(3, 5, seed=1).c_z.shape == (3, 5)
