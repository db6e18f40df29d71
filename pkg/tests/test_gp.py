import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multisafe.gp import BetaSchedule, GPosterior, KernelSpec, PinnedQuery, beta, gp_query, gp_update


def dense_posterior(kernel, X, y, Q, noise=None):
    """Direct solve of the GP posterior, independent of the Cholesky path."""
    X, Q = np.atleast_2d(X), np.atleast_2d(Q)
    n = len(X)
    noise = np.full(n, kernel.noise_var) if noise is None else noise
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    K = kernel.signal_var * np.exp(-0.5 * d2 / kernel.rbf_length_scale ** 2)
    K += np.diag(noise + 1e-8 * kernel.signal_var)
    dq = ((X[:, None, :] - Q[None, :, :]) ** 2).sum(-1)
    Kq = kernel.signal_var * np.exp(-0.5 * dq / kernel.rbf_length_scale ** 2)
    mean = Kq.T @ np.linalg.solve(K, y)
    var = kernel.signal_var - np.einsum("ij,ij->j", Kq, np.linalg.solve(K, Kq))
    return mean, np.sqrt(np.maximum(var, 0))


def fill(gp, rng, n, box=5.0):
    X = rng.uniform(0, box, size=(n, gp.dim))
    y = rng.normal(size=n)
    for x, v in zip(X, y):
        gp.update(x, v)
    return X, y


def test_interpolates_observation_with_tiny_noise():
    gp = GPosterior(KernelSpec(1.0, 1.0, 1e-9), 2)
    gp_update(gp, [1.0, 2.0], 3.0)
    mu, *_ = gp_query(gp, [[1.0, 2.0]])
    assert mu[0] == pytest.approx(3.0, abs=1e-6)


def test_variance_drops_at_observed_point():
    k = KernelSpec()
    gp = GPosterior(k, 2)
    gp.update([0.0, 0.0], 1.0)
    assert gp.predict([[0.0, 0.0]])[1][0] < k.signal_std


def test_five_points_match_dense_oracle():
    k = KernelSpec(1.5, 2.0, 0.3)
    gp = GPosterior(k, 2)
    rng = np.random.default_rng(0)
    X, y = fill(gp, rng, 5)
    Q = rng.uniform(0, 5, size=(30, 2))
    m, s = gp.predict(Q)
    m0, s0 = dense_posterior(k, X, y, Q)
    assert np.allclose(m, m0, atol=1e-8) and np.allclose(s, s0, atol=1e-8)


def test_empty_posterior_prior():
    gp = GPosterior(KernelSpec(), 3, BetaSchedule("constant", 2.0))
    mu, sd, up, lo = gp.query([[0.3, 0.1, 0.2]])
    assert (mu[0], sd[0], up[0], lo[0]) == (0.0, 10.0, 20.0, -20.0)


def test_beta_zero_collapses_bounds():
    gp = GPosterior(KernelSpec(1.0, 1.0, 0.1), 2, BetaSchedule("constant", 0.0))
    fill(gp, np.random.default_rng(1), 10)
    mu, _, up, lo = gp.query(np.random.default_rng(2).uniform(0, 5, size=(10, 2)))
    assert np.array_equal(mu, up) and np.array_equal(mu, lo)


def test_far_query_returns_prior_std():
    k = KernelSpec(1.0, 3.0, 0.1)
    gp = GPosterior(k, 2)
    fill(gp, np.random.default_rng(1), 10)
    _, sd = gp.predict([[30.0, 30.0]])
    assert abs(sd[0] - 3.0) < 1e-6


def test_kernel_diagonal_exact():
    k = KernelSpec(0.7, 3.3, 0.1)
    p = np.random.default_rng(0).normal(size=(6, 2))
    K = k(p, p)
    assert np.all(np.diag(K) == k.signal_var)
    assert np.array_equal(K, K.T)


def test_bound_width_is_two_beta_sigma():
    gp = GPosterior(KernelSpec(1.0, 1.0, 0.1), 2, BetaSchedule("constant", 2.5))
    fill(gp, np.random.default_rng(4), 20)
    _, sd, up, lo = gp.query(np.random.default_rng(5).uniform(0, 5, size=(50, 2)))
    assert np.allclose(up - lo, 2 * 2.5 * sd, rtol=0, atol=1e-12)
    assert np.all(lo <= up)


def test_query_keeps_leading_shape():
    gp = GPosterior(KernelSpec(1.0, 1.0, 0.1), 2)
    fill(gp, np.random.default_rng(4), 5)
    out = gp.query(np.zeros((3, 4, 2)))
    assert all(o.shape == (3, 4) for o in out)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 15))
def test_variance_never_increases(seed, n):
    rng = np.random.default_rng(seed)
    gp = GPosterior(KernelSpec(1.0, 1.0, 0.2), 2)
    Q = rng.uniform(0, 5, size=(20, 2))
    prev = gp.predict(Q)[1]
    for _ in range(n):
        gp.update(rng.uniform(0, 5, size=2), rng.normal())
        cur = gp.predict(Q)[1]
        assert np.all(cur <= prev + 1e-12)
        prev = cur


@pytest.mark.parametrize("kwargs,t,expected", [
    (dict(mode="theoretical", B=1.0, alpha=0.0), 5, 2.0),
    (dict(mode="theoretical", B=0.0, alpha=1.0, delta=1.0), math.e, 300.0),
    (dict(mode="constant", value=2.0), 17, 2.0),
])
def test_beta_schedule_examples(kwargs, t, expected):
    assert beta(t, BetaSchedule(**kwargs)) == pytest.approx(expected, rel=1e-12)


def test_beta_alpha_sequence_and_callable():
    seq = BetaSchedule("theoretical", B=0.0, alpha=[0.0, 1.0], delta=0.5)
    assert seq(1) == 0.0
    assert seq(2) == pytest.approx(300 * math.log(4) ** 3)
    fn = BetaSchedule("theoretical", B=0.5, alpha=lambda t: 0.0)
    assert fn(3) == 1.0


def test_beta_theoretical_rejects_small_ratio():
    with pytest.raises(ValueError):
        BetaSchedule("theoretical", delta=2.0)(1)
    with pytest.raises(ValueError):
        BetaSchedule()(0)


def test_kernel_rejects_nonpositive():
    with pytest.raises(ValueError):
        KernelSpec(0.0, 1.0, 1.0)


def test_merge_keeps_points_bounded_and_matches_oracle():
    k = KernelSpec(1.0, 1.0, 0.3)
    gp = GPosterior(k, 2, max_points=10, merge_radius=0.5)
    rng = np.random.default_rng(9)
    for _ in range(60):
        gp.update(rng.uniform(0, 2, size=2), rng.normal())
    assert gp.t == 60 and gp.n < 60
    Q = rng.uniform(0, 2, size=(10, 2))
    m0, s0 = dense_posterior(k, gp.X, gp.y, Q, noise=gp.noise)
    m, s = gp.predict(Q)
    assert np.allclose(m, m0, atol=1e-8) and np.allclose(s, s0, atol=1e-8)


def test_inverse_variance_merge():
    k = KernelSpec(1.0, 1.0, 0.5)
    gp = GPosterior(k, 1, max_points=1)
    gp.update([0.0], 1.0)
    gp.update([0.0], 3.0)
    assert gp.n == 1
    assert gp.y[0] == pytest.approx(2.0)
    assert gp.noise[0] == pytest.approx(0.125)


def test_pinned_query_tracks_posterior():
    k = KernelSpec(1.0, 1.0, 0.3)
    gp = GPosterior(k, 2, max_points=15)
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 3, size=(25, 2))
    pq = PinnedQuery(pts)
    for _ in range(40):
        for _ in range(rng.integers(1, 4)):
            gp.update(rng.uniform(0, 3, size=2), rng.normal())
        m, s = pq.predict(gp)
        m0, s0 = gp.predict(pts)
        assert np.allclose(m, m0, atol=1e-9) and np.allclose(s, s0, atol=1e-9)


def test_copy_is_independent():
    gp = GPosterior(KernelSpec(1.0, 1.0, 0.3), 2)
    fill(gp, np.random.default_rng(0), 5)
    c = gp.copy()
    c.update([1.0, 1.0], 5.0)
    assert gp.n == 5 and c.n == 6
    Q = np.array([[2.0, 2.0]])
    assert np.allclose(gp.copy().predict(Q)[0], gp.predict(Q)[0])
