import itertools
import warnings

import numpy as np
import pytest
from scipy.special import gammaln

from sdediscover.sde import DimensionMismatchError
from sdediscover.spike_slab import (
    PosteriorSummary,
    SblConvergenceWarning,
    SsHyperparams,
    compute_elbo,
    initial_state,
    predict,
    run_vb,
    sbl_initialize,
    vb_iteration,
)


def exact_pip(L, y, h: SsHyperparams):
    """Marginal inclusion probabilities by enumerating every support.

    theta_S ~ N(0, v_s sigma^2 I), sigma^2 ~ IG(a, b), z_k ~ Bern(p0); theta and
    sigma^2 integrate out in closed form for each support.
    """
    N, K = L.shape
    G, Ly, yy = L.T @ L, L.T @ y, y @ y
    a_n = h.a_sigma + 0.5 * N
    logp, sets = [], []
    for S in itertools.product((0, 1), repeat=K):
        idx = np.flatnonzero(S)
        s = len(idx)
        if s:
            M = G[np.ix_(idx, idx)] + np.eye(s) / h.v_s
            c = np.linalg.cholesky(M)
            q = yy - Ly[idx] @ np.linalg.solve(M, Ly[idx])
            logdet = s * np.log(h.v_s) + 2 * np.log(np.diag(c)).sum()
        else:
            q, logdet = yy, 0.0
        lp = -0.5 * logdet - a_n * np.log(h.b_sigma + 0.5 * q) + s * np.log(h.p0) + (K - s) * np.log1p(-h.p0)
        logp.append(lp)
        sets.append(S)
    logp = np.array(logp)
    post = np.exp(logp - logp.max())
    post /= post.sum()
    return np.array(sets).T @ post


def standardized_instance(rng, N=200, K=8, snr=10.0):
    L = rng.normal(size=(N, K))
    L = (L - L.mean(0)) / L.std(0)
    theta = np.zeros(K)
    support = rng.choice(K, size=rng.integers(1, 5), replace=False)
    theta[support] = rng.choice([-1, 1], size=len(support)) * rng.uniform(0.5, 2.0, size=len(support))
    signal = L @ theta
    y = signal + rng.normal(size=N) * signal.std() / np.sqrt(snr)
    return L, y - y.mean(), theta


INSTANCES = [standardized_instance(np.random.default_rng(100 + i)) for i in range(20)]


def test_hyperparam_validation():
    with pytest.raises(ValueError):
        SsHyperparams(v_s=0)
    with pytest.raises(ValueError):
        SsHyperparams(p0=1.0)
    with pytest.raises(ValueError):
        SsHyperparams(pip_threshold=0)


def test_a_q_value():
    st = initial_state(21, 1000, np.full(21, 0.1), SsHyperparams())
    assert st.a_q == pytest.approx(510.5001, abs=1e-10)


def test_logit_p0():
    assert SsHyperparams().logit_p0 == pytest.approx(-2.19722, abs=1e-5)


def test_bernoulli_term_vanishes_at_prior():
    h = SsHyperparams()
    st = initial_state(3, 10, np.full(3, h.p0), h)
    st2 = initial_state(3, 10, np.full(3, 0.7), h)
    # only the Bernoulli term depends on w, and KL(p0||p0)=0 while KL(0.7||p0)>0
    w = 0.7
    kl = 3 * (w * np.log(w / h.p0) + (1 - w) * np.log((1 - w) / (1 - h.p0)))
    assert compute_elbo(st, h, 10, 3) - compute_elbo(st2, h, 10, 3) == pytest.approx(kl, rel=1e-12)


def test_scalar_hand_iteration():
    rng = np.random.default_rng(0)
    x = rng.normal(size=500)
    x = (x - x.mean()) / x.std()
    L = x[:, None]
    h = SsHyperparams()
    st = initial_state(1, 500, sbl_initialize(L, x), h)
    for _ in range(2):
        st = vb_iteration(st, L, x, h)
    assert st.w_q[0] > 0.99
    assert st.mu_q[0] == pytest.approx(1.0, rel=0.02)


def test_a_q_invariant_and_tau_consistent():
    L, y, _ = INSTANCES[0]
    h = SsHyperparams()
    st = initial_state(8, 200, np.full(8, 0.5), h)
    for _ in range(5):
        st = vb_iteration(st, L, y, h)
        assert st.a_q == pytest.approx(h.a_sigma + 100 + 4)
        assert st.tau == pytest.approx(st.a_q / st.b_q, rel=1e-14)
        assert np.all((st.w_q > 0) & (st.w_q < 1))
        np.linalg.cholesky(st.Sigma_q)


def test_elbo_monotone_on_random_instances():
    for L, y, _ in INSTANCES:
        post = run_vb(L, y)
        tr = np.array(post.elbo_trace)
        assert np.all(np.diff(tr) >= -1e-8), np.diff(tr).min()
        assert post.converged
        assert abs(tr[-1] - tr[-2]) < SsHyperparams().rho


def test_exact_oracle_agreement():
    h = SsHyperparams()
    agree = 0
    for L, y, _ in INSTANCES:
        vb = set(run_vb(L, y, h).selected)
        ex = set(np.flatnonzero(exact_pip(L, y, h) > 0.5))
        agree += vb == ex
    assert agree >= 18


def test_exact_oracle_sanity():
    # the oracle itself recovers the generating support on an easy instance
    L, y, theta = INSTANCES[3]
    assert set(np.flatnonzero(exact_pip(L, y, SsHyperparams()) > 0.5)) == set(np.flatnonzero(theta))


def null_instance(seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(300, 10))
    L = (L - L.mean(0)) / L.std(0)
    y = rng.normal(size=300)
    return L, y - y.mean()


NULLS = [null_instance(1000 + s) for s in range(20)]


def test_pure_noise_exact_oracle_is_empty():
    for L, y in NULLS:
        assert exact_pip(L, y, SsHyperparams()).max() < 0.5


def test_pure_noise_false_selections_are_isolated():
    # a spurious pick is at most one column, and it is the exact posterior's favourite
    for L, y in NULLS:
        sel = run_vb(L, y).selected
        assert len(sel) <= 1
        if sel:
            assert sel[0] == np.argmax(exact_pip(L, y, SsHyperparams()))


@pytest.mark.xfail(
    strict=False,
    reason="the fully factorised q(theta)q(Z) has no slab Occam factor, so VB keeps a "
    "chance-correlated column on a few null draws where the exact posterior does not",
)
def test_pure_noise_selects_nothing():
    for L, y in NULLS:
        assert run_vb(L, y).selected == ()


@pytest.mark.parametrize(
    "c",
    [
        pytest.param(
            1e-3,
            marks=pytest.mark.xfail(
                strict=False,
                reason="noise precision far above tau_init: the first w sweep pairs the refreshed tau "
                "with a Sigma built from tau_init and weak columns collapse",
            ),
        ),
        1e-2,
        7.5,
        1e4,
    ],
)
def test_scale_self_consistency(c):
    L, y, _ = INSTANCES[5]
    a = run_vb(L, y)
    b = run_vb(L, c * y)
    assert a.selected == b.selected
    sel = list(a.selected)
    assert b.mu_theta_hat[sel] == pytest.approx(c * a.mu_theta_hat[sel], rel=0.01)


def test_off_support_zeroed():
    L, y, _ = INSTANCES[1]
    post = run_vb(L, y)
    off = [k for k in range(8) if k not in post.selected]
    assert np.all(post.mu_theta_hat[off] == 0)
    assert np.all(post.Sigma_theta_hat[off] == 0) and np.all(post.Sigma_theta_hat[:, off] == 0)
    np.linalg.cholesky(post.Sigma_theta_hat[np.ix_(post.selected, post.selected)])


def test_centering_checked():
    L, y, _ = INSTANCES[0]
    with pytest.raises(ValueError):
        run_vb(L + 1.0, y)
    with pytest.raises(ValueError):
        run_vb(L, y + 1.0)


def test_sbl_single_informative_column():
    rng = np.random.default_rng(4)
    L = rng.normal(size=(400, 6))
    L = (L - L.mean(0)) / L.std(0)
    g = sbl_initialize(L, L[:, 3].copy())
    assert g[3] > 0.9
    assert np.median(np.delete(g, 3)) < 0.2
    assert np.all((g >= 0.01) & (g <= 0.99))


def test_sbl_pure_noise():
    rng = np.random.default_rng(5)
    q, _ = np.linalg.qr(rng.normal(size=(400, 6)))
    L = q * np.sqrt(400)
    y = rng.normal(size=400)
    assert np.all(sbl_initialize(L, y) < 0.5)


def test_sbl_single_column():
    rng = np.random.default_rng(6)
    x = rng.normal(size=50)
    x -= x.mean()
    assert sbl_initialize(x[:, None], 2 * x)[0] > 0.9


def test_sbl_fallback_warns():
    L, y, _ = INSTANCES[0]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        g = sbl_initialize(L, y, max_iters=1, p0=0.1)
    assert any(issubclass(c.category, SblConvergenceWarning) for c in caught)
    assert np.all(g == 0.1)


def test_predict_examples():
    post = PosteriorSummary(np.ones(2), (0, 1), np.array([2.0, -1.0]), np.zeros((2, 2)), 1e12, 1.0)
    Ls = np.array([[1.0, 1.0], [3.0, 0.5]])
    mean, cov = predict(Ls, post)
    assert np.array_equal(mean, Ls @ [2.0, -1.0])
    post = PosteriorSummary(np.ones(2), (0, 1), np.array([2.0, -1.0]), np.eye(2), 4.0, 2.0)
    mean, cov = predict(np.zeros((1, 2)), post)
    assert mean[0] == 0 and cov[0, 0] == pytest.approx(0.5)
    with pytest.raises(DimensionMismatchError):
        predict(np.zeros((1, 3)), post)


def noise_free_problem():
    rng = np.random.default_rng(9)
    L = rng.normal(size=(200, 5))
    L = (L - L.mean(0)) / L.std(0)
    return L, L @ np.array([1.5, 0, -2.0, 0, 0])


def test_predict_matches_ridge_oracle():
    # on the selected support the posterior mean is the ridge solution with penalty 1/v_s
    L, y = noise_free_problem()
    h = SsHyperparams()
    post = run_vb(L, y, h)
    sel = list(post.selected)
    assert sel == [0, 2]
    Ls = L[:, sel]
    ridge = np.linalg.solve(Ls.T @ Ls + np.eye(2) / h.v_s, Ls.T @ y)
    mean, cov = predict(L, post)
    assert np.abs(mean - Ls @ ridge).max() < 1e-8
    assert np.all(np.linalg.eigvalsh(cov) > -1e-12)
    assert np.all(np.diag(cov) >= post.b_star / post.a_star)


def test_predict_training_noise_free():
    # a wide slab removes the ridge bias, leaving the least-squares fit
    L, y = noise_free_problem()
    post = run_vb(L, y, SsHyperparams(v_s=1e8))
    mean, _ = predict(L, post)
    assert np.abs(mean - y).max() < 1e-6


def test_elbo_csv(tmp_path):
    L, y, _ = INSTANCES[0]
    post = run_vb(L, y)
    post.write_elbo_csv(tmp_path / "e.csv", header="# x")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[:2] == ["# x", "iter,elbo"]
    assert len(lines) == 2 + len(post.elbo_trace)


def test_gammaln_constant_term():
    # the prior normaliser enters the ELBO as a_sigma ln b_sigma - ln Gamma(a_sigma)
    h = SsHyperparams()
    h2 = SsHyperparams(b_sigma=2e-4)
    st = initial_state(2, 5, np.full(2, 0.3), h)
    diff = compute_elbo(st, h2, 5, 2) - compute_elbo(st, h, 5, 2)
    assert diff == pytest.approx(h.a_sigma * np.log(2.0), rel=1e-9)
    assert gammaln(h.a_sigma) > 9
