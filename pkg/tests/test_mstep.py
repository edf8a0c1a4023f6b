import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_suffstats, random_params
from vmfa.errors import SingularEc
from vmfa.estep import full_e_step, variational_e_step
from vmfa.model import MfaParams, precompute, truncated_free_energy
from vmfa.mstep import (
    SuffStats,
    accumulate_suffstats,
    accumulate_suffstats_dense,
    latent_moments,
    m_step,
    update_params,
    variational_free_energy,
)
from vmfa.seeding import init_varstate


def _instance(seed, N=60, C=4, D=5, H=2, Cp=2):
    rng = np.random.default_rng(seed)
    p = random_params(rng, C, D, H)
    X = p.mu[rng.integers(C, size=N)] + rng.normal(size=(N, D))
    K = np.array([rng.choice(C, Cp, replace=False) for _ in range(N)])
    q = rng.dirichlet(np.ones(Cp), size=N)
    return p, X, K, q, rng


def _dense_q(K, q, C):
    Q = np.zeros((K.shape[0], C))
    np.put_along_axis(Q, K, q, axis=1)
    return Q


class TestSuffStats:
    def test_zero_loadings(self):
        rng = np.random.default_rng(0)
        p = random_params(rng, 2, 3, 2)
        p.Lambda[:] = 0.0
        X = rng.normal(size=(10, 3))
        K = np.tile([0, 1], (10, 1))
        q = rng.dirichlet([1, 1], size=10)
        s = accumulate_suffstats(p, None, X, q, K)
        for c in range(2):
            Nc = q[:, c].sum()
            np.testing.assert_allclose(s.E[c], Nc * np.eye(3), atol=1e-12)
            np.testing.assert_allclose(s.Y[c, :, :2], 0.0, atol=1e-12)
            np.testing.assert_allclose(s.Y[c, :, 2], q[:, c] @ X, atol=1e-12)

    def test_single_point(self):
        p = random_params(np.random.default_rng(1), 1, 3, 1, pi=np.ones(1))
        x = np.array([[1.0, -2.0, 3.0]])
        s = accumulate_suffstats(p, None, x, np.ones((1, 1)), np.zeros((1, 1), dtype=int))
        assert s.Nc[0] == 1.0
        np.testing.assert_allclose(s.sq_sum[0], x[0] * x[0])

    def test_matches_naive_loop(self):
        p, X, K, q, _ = _instance(2)
        s = accumulate_suffstats(p, None, X, q, K)
        Nc, Y, E, sq = naive_suffstats(p, X, _dense_q(K, q, p.C))
        np.testing.assert_allclose(s.Nc, Nc, atol=1e-10)
        np.testing.assert_allclose(s.Y, Y, atol=1e-10)
        np.testing.assert_allclose(s.E, E, atol=1e-10)
        np.testing.assert_allclose(s.sq_sum, sq, atol=1e-10)
        assert s.Nc.sum() == pytest.approx(X.shape[0], abs=1e-8)
        for c in range(p.C):
            np.testing.assert_allclose(s.E[c], s.E[c].T, atol=1e-12)
            assert np.linalg.eigvalsh(s.E[c]).min() >= -1e-10

    def test_dense_path_matches_sparse(self):
        p, X, _, _, rng = _instance(3)
        _, Q, _, _ = full_e_step(p, X, counter=None)
        K = np.tile(np.arange(p.C), (X.shape[0], 1))
        a = accumulate_suffstats(p, None, X, Q, K)
        b = accumulate_suffstats_dense(p, None, X, Q)
        for f in ("Nc", "Y", "E", "sq_sum"):
            np.testing.assert_allclose(getattr(b, f), getattr(a, f), rtol=1e-10, atol=1e-10)


class TestUpdateParams:
    def test_equal_hard_cells(self):
        rng = np.random.default_rng(4)
        p = random_params(rng, 2, 3, 1)
        X = np.concatenate([rng.normal(-5, 1, (10, 3)), rng.normal(5, 1, (10, 3))])
        K = np.repeat([[0], [1]], 10, axis=0)
        new, empty = m_step(p, None, X, np.ones((20, 1)), K)
        np.testing.assert_allclose(new.pi, [0.5, 0.5])
        assert not empty.any()

    def test_single_component_zero_loadings(self):
        rng = np.random.default_rng(5)
        X = rng.normal(2.0, 3.0, size=(40, 4))
        p = MfaParams(np.ones(1), np.zeros((1, 4)), np.zeros((1, 4, 2)), np.ones((1, 4)))
        new, _ = m_step(p, None, X, np.ones((40, 1)), np.zeros((40, 1), dtype=int))
        np.testing.assert_allclose(new.mu[0], X.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(new.Dnoise[0], X.var(axis=0), rtol=1e-10)
        np.testing.assert_allclose(new.Lambda, 0.0, atol=1e-12)

    def test_free_energy_does_not_decrease(self):
        for seed in range(10):
            p, X, K, _, rng = _instance(10 + seed)
            caches = precompute(p)
            state = init_varstate(X.shape[0], p.C, 2, 3, rng.choice(X.shape[0], p.C, replace=False), rng)
            res = variational_e_step(p, caches, X, state, rng, counter=None)
            new, _ = m_step(p, caches, X, res.q, res.state.K)
            new.validate()
            assert truncated_free_energy(new, X, res.state.K, counter=None) >= res.F - 1e-9 * abs(res.F)

    def test_empty_component_is_frozen(self):
        p, X, _, _, _ = _instance(6)
        K = np.zeros((X.shape[0], 1), dtype=int)
        K[::2] = 1
        new, empty = m_step(p, None, X, np.ones((X.shape[0], 1)), K)
        assert list(empty) == [False, False, True, True]
        for c in (2, 3):
            np.testing.assert_array_equal(new.Lambda[c], p.Lambda[c])
            np.testing.assert_array_equal(new.mu[c], p.mu[c])
            assert new.pi[c] == 0.0
        assert new.pi.sum() == pytest.approx(1.0, abs=1e-12)

    def test_variance_floor_applied(self):
        X = np.column_stack([np.ones(10), np.arange(10.0)])
        p = MfaParams(np.ones(1), np.zeros((1, 2)), np.zeros((1, 2, 1)), np.ones((1, 2)))
        new, _ = m_step(p, None, X, np.ones((10, 1)), np.zeros((10, 1), dtype=int), floor=np.array([1e-8, 1e-5]))
        assert new.Dnoise[0, 0] == 1e-8

    def test_singular_E_raises(self):
        s = SuffStats(np.ones(1), np.ones((1, 2, 2)), np.array([[[-1.0, 0.0], [0.0, 1.0]]]), np.ones((1, 2)))
        p = MfaParams(np.ones(1), np.zeros((1, 2)), np.zeros((1, 2, 1)), np.ones((1, 2)))
        with pytest.raises(SingularEc):
            update_params(s, 1, p)

    def test_marginally_singular_E_recovers_with_jitter(self):
        s = SuffStats(np.ones(1), np.ones((1, 2, 2)), np.array([[[0.0, 0.0], [0.0, 1.0]]]), np.full((1, 2), 5.0))
        p = MfaParams(np.ones(1), np.zeros((1, 2)), np.zeros((1, 2, 1)), np.ones((1, 2)))
        new, _ = update_params(s, 1, p)
        assert np.all(np.isfinite(new.Lambda))


class TestVariationalFreeEnergy:
    def test_equals_truncated_free_energy_at_tilde(self):
        p, X, K, _, _ = _instance(7)
        caches = precompute(p)
        from vmfa.model import truncated_log_joints
        JK = truncated_log_joints(p, X, K, caches, counter=None)
        q = np.exp(JK - np.logaddexp.reduce(JK, axis=1, keepdims=True))
        mom = latent_moments(p, X, K, caches)
        assert variational_free_energy(p, X, K, q, mom) == pytest.approx(
            truncated_free_energy(p, X, K, caches, counter=None), rel=1e-10
        )


def stationarity_and_gradient(seed):
    """Max normal-equation residual and max scaled finite-difference gradient."""
    rng = np.random.default_rng(seed)
    D = int(rng.integers(2, 9))
    H = int(rng.integers(1, min(3, D) + 1))
    C = int(rng.integers(2, 5))
    p = random_params(rng, C, D, H)
    X = p.mu[rng.integers(C, size=80)] + rng.normal(size=(80, D)) * 1.5
    Cp = int(rng.integers(1, C + 1))
    K = np.array([rng.choice(C, Cp, replace=False) for _ in range(80)])
    caches = precompute(p)
    from vmfa.model import truncated_log_joints
    JK = truncated_log_joints(p, X, K, caches, counter=None)
    q = np.exp(JK - np.logaddexp.reduce(JK, axis=1, keepdims=True))
    stats = accumulate_suffstats(p, caches, X, q, K)
    new, empty = update_params(stats, 80, p)
    resid = 0.0
    for c in np.flatnonzero(~empty):
        A = np.concatenate([new.Lambda[c], new.mu[c][:, None]], axis=1)
        resid = max(resid, np.linalg.norm(stats.Y[c] - A @ stats.E[c]) / np.linalg.norm(stats.Y[c]))
    mom = latent_moments(p, X, K, caches)
    F0 = variational_free_energy(new, X, K, q, mom)
    worst = 0.0
    for c in np.flatnonzero(~empty):
        for d in range(D):
            for h in range(H + 1):
                theta = new.Lambda[c, d, h] if h < H else new.mu[c, d]
                step = 1e-5 * max(1.0, abs(theta))
                vals = []
                for sgn in (1, -1):
                    t = new.copy()
                    if h < H:
                        t.Lambda[c, d, h] += sgn * step
                    else:
                        t.mu[c, d] += sgn * step
                    vals.append(variational_free_energy(t, X, K, q, mom))
                grad = (vals[0] - vals[1]) / (2 * step)
                worst = max(worst, abs(grad) * max(1.0, abs(theta)) / abs(F0))
            prec = 1.0 / new.Dnoise[c, d]
            step = 1e-5 * prec
            vals = []
            for sgn in (1, -1):
                t = new.copy()
                t.Dnoise[c, d] = 1.0 / (prec + sgn * step)
                vals.append(variational_free_energy(t, X, K, q, mom))
            grad = (vals[0] - vals[1]) / (2 * step)
            worst = max(worst, abs(grad) * prec / abs(F0))
    return resid, worst


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_stationarity_and_vanishing_gradient(seed):
    resid, grad = stationarity_and_gradient(seed)
    assert resid <= 1e-8
    assert grad <= 1e-4


def test_gradient_is_not_zero_away_from_optimum():
    p, X, K, _, _ = _instance(8)
    caches = precompute(p)
    from vmfa.model import truncated_log_joints
    JK = truncated_log_joints(p, X, K, caches, counter=None)
    q = np.exp(JK - np.logaddexp.reduce(JK, axis=1, keepdims=True))
    mom = latent_moments(p, X, K, caches)
    t = p.copy()
    t.mu[0, 0] += 1e-4
    assert abs(variational_free_energy(t, X, K, q, mom) - variational_free_energy(p, X, K, q, mom)) > 1e-8
