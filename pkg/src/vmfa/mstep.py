"""Closed-form M-step for mixtures of factor analyzers under truncated posteriors.

With A_c = [Lambda_c | mu_c] and z^ = [z; 1], the free energy is maximised by

    pi_c      = N_c / N
    A_c       = Y_c E_c^-1
    sigma2_cd = (sum_n q_nc x_nd^2 - sum_h (Y_c * A_c)_dh) / N_c

where E_c = sum_n q_nc E[z^ z^T] and Y_c = sum_n q_nc x_n E[z^]^T, the latent
moments being taken under the variational parameters (the pre-update Theta).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import SingularEc
from .model import LOG_2PI, MfaParams, group_order, precompute


@dataclass
class SuffStats:
    Nc: np.ndarray  # (C,)
    Y: np.ndarray  # (C, D, H+1)
    E: np.ndarray  # (C, H+1, H+1)
    sq_sum: np.ndarray  # (C, D)

    @property
    def C(self):
        return self.Nc.shape[0]


def _pairs(K, q):
    K = np.asarray(K)
    q = np.asarray(q, dtype=np.float64)
    rows = np.broadcast_to(np.arange(K.shape[0])[:, None], K.shape)
    keep = (q > 0) & (K >= 0)
    return rows[keep], K[keep], q[keep]


def _groups(comps):
    order = group_order(comps, int(comps.max()) + 1 if comps.size else 1)
    sc = comps[order]
    cuts = np.flatnonzero(np.diff(sc)) + 1
    for s, e in zip(np.r_[0, cuts], np.r_[cuts, sc.size]):
        yield int(sc[s]), order[s:e]


def accumulate_suffstats(params: MfaParams, caches, X, q, K) -> SuffStats:
    """Sufficient statistics summed only over the (n, c) pairs with c in K_n."""
    X = np.asarray(X, dtype=np.float64)
    C, D, H = params.C, params.D, params.H
    caches = precompute(params) if caches is None else caches
    Nc = np.zeros(C)
    Y = np.zeros((C, D, H + 1))
    E = np.zeros((C, H + 1, H + 1))
    sq = np.zeros((C, D))
    rows, comps, w = _pairs(K, q)
    if rows.size == 0:
        return SuffStats(Nc, Y, E, sq)
    for c, idx in _groups(comps):
        Xc = X[rows[idx]]
        wc = w[idx]
        mz = (Xc - params.mu[c]) @ caches[c].V.T  # posterior latent means
        Sz = caches[c].latent_covariance()
        n = wc.sum()
        wmz = mz * wc[:, None]
        Nc[c] = n
        E[c, :H, :H] = n * Sz + mz.T @ wmz
        E[c, :H, H] = E[c, H, :H] = wmz.sum(axis=0)
        E[c, H, H] = n
        Y[c, :, :H] = Xc.T @ wmz
        Y[c, :, H] = wc @ Xc
        sq[c] = wc @ (Xc * Xc)
    return SuffStats(Nc, Y, E, sq)


def accumulate_suffstats_dense(params: MfaParams, caches, X, R) -> SuffStats:
    """Sufficient statistics for full (N, C) responsibilities ``R``."""
    X = np.asarray(X, dtype=np.float64)
    C, D, H = params.C, params.D, params.H
    caches = precompute(params) if caches is None else caches
    R = np.asarray(R, dtype=np.float64)
    Nc = R.sum(axis=0)
    Y = np.zeros((C, D, H + 1))
    E = np.zeros((C, H + 1, H + 1))
    sq = R.T @ (X * X)
    Y[:, :, H] = R.T @ X
    E[:, H, H] = Nc
    N = X.shape[0]
    step = max(1, 4_000_000 // (N * H))
    for s in range(0, C, step):
        e = min(C, s + step)
        V = np.concatenate([caches[c].V for c in range(s, e)])  # ((e-s) H, D)
        off = np.concatenate([caches[c].V @ params.mu[c] for c in range(s, e)])
        mz = (X @ V.T - off).reshape(N, e - s, H)
        wmz = mz * R[:, s:e, None]
        Sz = np.stack([caches[c].latent_covariance() for c in range(s, e)])
        E[s:e, :H, :H] = Nc[s:e, None, None] * Sz + np.matmul(mz.transpose(1, 2, 0), wmz.transpose(1, 0, 2))
        E[s:e, :H, H] = wmz.sum(axis=0)
        E[s:e, H, :H] = E[s:e, :H, H]
        Y[s:e, :, :H] = (X.T @ wmz.reshape(N, -1)).reshape(X.shape[1], e - s, H).transpose(1, 0, 2)
    return SuffStats(Nc, Y, E, sq)


def solve_loadings(Y, E):
    """A = Y E^-1 for symmetric positive (semi)definite E."""
    E = 0.5 * (E + E.T)
    try:
        fac = sla.cho_factor(E, lower=True)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(E) / E.shape[0]
        try:
            fac = sla.cho_factor(E + jitter * np.eye(E.shape[0]), lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularEc("E_c is singular; component is unidentifiable") from exc
    return sla.cho_solve(fac, Y.T).T


def update_params(stats: SuffStats, N, old: MfaParams, floor=0.0):
    """New parameters from sufficient statistics.

    Components with N_c == 0 keep their old parameters and get pi_c = 0.
    Returns ``(params, empty)`` where ``empty`` flags those components.
    """
    D = old.D
    H = old.H
    floor = np.broadcast_to(np.asarray(floor, dtype=np.float64), (D,))
    new = old.copy()
    empty = stats.Nc <= 0
    for c in np.flatnonzero(~empty):
        A = solve_loadings(stats.Y[c], stats.E[c])
        new.Lambda[c] = A[:, :H]
        new.mu[c] = A[:, H]
        var = (stats.sq_sum[c] - np.sum(stats.Y[c] * A, axis=1)) / stats.Nc[c]
        new.Dnoise[c] = np.maximum(var, floor)
    pi = np.where(empty, 0.0, stats.Nc / N)
    new.pi = pi / pi.sum()
    return new, empty


def m_step(params: MfaParams, caches, X, q, K, floor=0.0):
    stats = accumulate_suffstats(params, caches, X, q, K)
    return update_params(stats, np.asarray(X).shape[0], params, floor)


# ---------------------------------------------------------------------------
# full variational free energy F(K, Theta~, Theta); used for gradient checks


@dataclass
class LatentMoments:
    """Posterior latent moments under Theta~, one row per (n, k) slot of K."""

    mz: np.ndarray  # (N, C', H)
    Sz: np.ndarray  # (C, H, H)
    logdet_Sz: np.ndarray  # (C,)


def latent_moments(params_tilde: MfaParams, X, K, caches=None) -> LatentMoments:
    X = np.asarray(X, dtype=np.float64)
    K = np.asarray(K)
    caches = precompute(params_tilde) if caches is None else caches
    H = params_tilde.H
    mz = np.zeros(K.shape + (H,))
    for c in np.unique(K[K >= 0]):
        sel = K == c
        n = np.nonzero(sel)[0]
        mz[sel] = (X[n] - params_tilde.mu[c]) @ caches[c].V.T
    Sz = np.stack([ch.latent_covariance() for ch in caches])
    logdet = np.array([-2.0 * np.sum(np.log(np.diag(ch.Lchol))) for ch in caches])
    return LatentMoments(mz, Sz, logdet)


def variational_free_energy(params: MfaParams, X, K, q, moments: LatentMoments) -> float:
    """Free energy with q(c, z) fixed (from Theta~), as a function of Theta.

    Expected complete-data log-likelihood plus the entropy of q(c, z).  At
    Theta == Theta~ it equals sum_n log sum_{c in K_n} p(c, x_n | Theta).
    """
    X = np.asarray(X, dtype=np.float64)
    K = np.asarray(K)
    q = np.asarray(q, dtype=np.float64)
    D, H = params.D, params.H
    total = 0.0
    rows, comps, w = _pairs(K, q)
    slot = np.broadcast_to(np.arange(K.shape[1]), K.shape)[(q > 0) & (K >= 0)]
    for c, idx in _groups(comps):
        n = rows[idx]
        wc = w[idx]
        mz = moments.mz[n, slot[idx]]
        lam, mu = params.Lambda[c], params.mu[c]
        prec = 1.0 / params.Dnoise[c]
        resid = X[n] - mz @ lam.T - mu
        quad = (resid * resid) @ prec + np.trace(lam.T @ (lam * prec[:, None]) @ moments.Sz[c])
        with np.errstate(divide="ignore"):
            log_pi = np.log(params.pi[c])
        prior = -0.5 * (H * LOG_2PI + np.sum(mz * mz, axis=1) + np.trace(moments.Sz[c]))
        expected = log_pi - 0.5 * D * LOG_2PI + 0.5 * np.sum(np.log(prec)) - 0.5 * quad + prior
        latent_entropy = 0.5 * (H * (1.0 + LOG_2PI) + moments.logdet_Sz[c])
        total += float(np.sum(wc * (expected + latent_entropy - np.log(wc))))
    return total
