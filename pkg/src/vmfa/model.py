"""MFA parameters, per-component Woodbury caches and log-domain density evaluation.

A component's covariance is ``Sigma_c = Lambda_c Lambda_c^T + D_c`` with ``D_c``
diagonal.  Nothing here ever forms a D x D matrix: the inverse goes through
``D^-1 - U V`` and the log-determinant through ``log|L| + sum(log sigma^2)``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.special import logsumexp

from .errors import CholeskyFailure, EmptyKSet

LOG_2PI = float(np.log(2.0 * np.pi))
CHOLESKY_JITTER = 1e-10


class JointCounter:
    """Tally of log-joint evaluations ``log p(c, x_n | Theta)``."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def add(self, k):
        with self._lock:
            self.count += int(k)

    def reset(self):
        with self._lock:
            self.count = 0


joint_counter = JointCounter()


@dataclass
class MfaParams:
    pi: np.ndarray  # (C,)
    mu: np.ndarray  # (C, D)
    Lambda: np.ndarray  # (C, D, H)
    Dnoise: np.ndarray  # (C, D) diagonal noise variances

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.Lambda = np.asarray(self.Lambda, dtype=np.float64)
        self.Dnoise = np.asarray(self.Dnoise, dtype=np.float64)
        C, D, H = self.Lambda.shape
        if self.pi.shape != (C,) or self.mu.shape != (C, D) or self.Dnoise.shape != (C, D):
            raise ValueError(
                f"inconsistent shapes: pi {self.pi.shape}, mu {self.mu.shape}, "
                f"Lambda {self.Lambda.shape}, Dnoise {self.Dnoise.shape}"
            )
        if H < 1 or H > D:
            raise ValueError(f"latent dimension H={H} must satisfy 1 <= H <= D={D}")

    @property
    def C(self) -> int:
        return self.Lambda.shape[0]

    @property
    def D(self) -> int:
        return self.Lambda.shape[1]

    @property
    def H(self) -> int:
        return self.Lambda.shape[2]

    def copy(self) -> "MfaParams":
        return MfaParams(self.pi.copy(), self.mu.copy(), self.Lambda.copy(), self.Dnoise.copy())

    def validate(self, floor=0.0, atol=1e-12):
        """Raise ValueError if any invariant of a parameter set is violated."""
        for name in ("pi", "mu", "Lambda", "Dnoise"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1.0) > atol:
            raise ValueError(f"mixing proportions must be >= 0 and sum to 1 (sum={self.pi.sum()!r})")
        if np.any(self.Dnoise <= 0) or np.any(self.Dnoise < floor):
            raise ValueError("noise variances must be positive and above the variance floor")
        return self

    def covariance(self, c) -> np.ndarray:
        """Dense Sigma_c.  Only meant for small D (tests, diagnostics)."""
        lam = self.Lambda[c]
        return lam @ lam.T + np.diag(self.Dnoise[c])

    def equal(self, other) -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("pi", "mu", "Lambda", "Dnoise")
        )


@dataclass(frozen=True)
class ComponentCache:
    U: np.ndarray  # (D, H)  D^-1 Lambda
    Lmat: np.ndarray  # (H, H)  I + Lambda^T D^-1 Lambda
    V: np.ndarray  # (H, D)  L^-1 U^T
    logdet_sigma: float
    inv_dnoise: np.ndarray  # (D,)
    log_pi: float
    Lchol: np.ndarray = field(repr=False)  # lower Cholesky factor of Lmat
    Wt: np.ndarray = field(repr=False, default=None)  # (H, D) Lchol^-1 U^T, so U V = Wt^T Wt

    def sigma_inverse(self) -> np.ndarray:
        return np.diag(self.inv_dnoise) - self.U @ self.V

    def latent_covariance(self) -> np.ndarray:
        """Posterior covariance of z given (c, x), i.e. L^-1."""
        return sla.cho_solve((self.Lchol, True), np.eye(self.Lmat.shape[0]))


def _cholesky(L):
    try:
        return np.linalg.cholesky(L)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(L + CHOLESKY_JITTER * np.eye(L.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure("L_c is not positive definite") from exc


def precompute_component(params: MfaParams, c: int) -> ComponentCache:
    lam = params.Lambda[c]
    dn = params.Dnoise[c]
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(dn)) and np.all(dn > 0)):
        raise CholeskyFailure(f"component {c} has non-finite loadings or non-positive variances")
    inv_d = 1.0 / dn
    U = lam * inv_d[:, None]
    L = np.eye(params.H) + U.T @ lam
    L = 0.5 * (L + L.T)
    chol = _cholesky(L)
    V = sla.cho_solve((chol, True), U.T)
    Wt = sla.solve_triangular(chol, U.T, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol)))) + float(np.sum(np.log(dn)))
    with np.errstate(divide="ignore"):
        log_pi = float(np.log(params.pi[c]))
    return ComponentCache(U=U, Lmat=L, V=V, logdet_sigma=logdet, inv_dnoise=inv_d, log_pi=log_pi, Lchol=chol, Wt=Wt)


def precompute(params: MfaParams) -> list:
    return [precompute_component(params, c) for c in range(params.C)]


def log_joint(cache: ComponentCache, mu_c, x, counter: Optional[JointCounter] = joint_counter) -> float:
    """log p(c, x | Theta) for one data row, O(DH)."""
    v = np.asarray(x, dtype=np.float64) - mu_c
    maha = float(v @ (cache.inv_dnoise * v)) - float((v @ cache.U) @ (cache.V @ v))
    if counter is not None:
        counter.add(1)
    return cache.log_pi - 0.5 * (v.shape[0] * LOG_2PI + cache.logdet_sigma + maha)


def component_log_joints(cache: ComponentCache, mu_c, X, counter: Optional[JointCounter] = joint_counter):
    """Vectorised ``log_joint`` of one component against every row of ``X``."""
    V = X - mu_c
    P = V @ cache.Wt.T
    maha = (V * V) @ cache.inv_dnoise - np.einsum("ij,ij->i", P, P)
    if counter is not None:
        counter.add(X.shape[0])
    return cache.log_pi - 0.5 * (X.shape[1] * LOG_2PI + cache.logdet_sigma + maha)


def _component_chunks(C, per, budget=4_000_000):
    step = max(1, budget // max(per, 1))
    return [(s, min(C, s + step)) for s in range(0, C, step)]


def all_log_joints(params: MfaParams, X, caches=None, counter: Optional[JointCounter] = joint_counter):
    """(N, C) matrix of log-joints; adds exactly N*C to ``counter``.

    Evaluated for all components at once: rows are centred on the data mean
    (the Mahalanobis term is translation invariant) so the expanded diagonal
    quadratic form does not lose precision.
    """
    caches = precompute(params) if caches is None else caches
    X = np.asarray(X, dtype=np.float64)
    N, D, H = X.shape[0], params.D, params.H
    shift = X.mean(axis=0)
    Xc = X - shift
    mu = params.mu - shift
    inv_d = np.stack([ch.inv_dnoise for ch in caches])
    const = np.array([ch.log_pi - 0.5 * (D * LOG_2PI + ch.logdet_sigma) for ch in caches])
    out = np.empty((N, params.C))
    for s, e in _component_chunks(params.C, N * (H + 1)):
        a = inv_d[s:e]
        maha = (Xc * Xc) @ a.T - 2.0 * Xc @ (a * mu[s:e]).T + np.sum(a * mu[s:e] ** 2, axis=1)
        Wt = np.concatenate([caches[c].Wt for c in range(s, e)])  # ((e-s) H, D)
        P = Xc @ Wt.T - np.concatenate([caches[c].Wt @ mu[c] for c in range(s, e)])
        maha -= (P * P).reshape(N, e - s, H).sum(axis=2)
        out[:, s:e] = const[s:e] - 0.5 * maha
    if counter is not None:
        counter.add(out.size)
    return out


def group_order(comps, C):
    """Stable permutation sorting ``comps``; narrow keys let numpy use radix sort."""
    if C <= np.iinfo(np.uint16).max:
        comps = comps.astype(np.uint16)
    return np.argsort(comps, kind="stable")


def pair_log_joints(params: MfaParams, caches, X, rows, comps, counter: Optional[JointCounter] = joint_counter):
    """log p(comps[i], X[rows[i]]) for arbitrary (row, component) pairs.

    Pairs are grouped by component so each group is one dense O(P D H) kernel.
    """
    rows = np.asarray(rows, dtype=np.int64)
    comps = np.asarray(comps, dtype=np.int64)
    out = np.empty(rows.shape[0])
    if rows.size == 0:
        return out
    order = group_order(comps, params.C)
    sc = comps[order]
    cuts = np.flatnonzero(np.diff(sc)) + 1
    starts = np.concatenate(([0], cuts))
    ends = np.concatenate((cuts, [sc.size]))
    for s, e in zip(starts, ends):
        c = sc[s]
        idx = order[s:e]
        out[idx] = component_log_joints(caches[c], params.mu[c], X[rows[idx]], counter=None)
    if counter is not None:
        counter.add(rows.size)
    return out


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    split: Optional[str] = None

    def __post_init__(self):
        X = np.asarray(self.X)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"dataset must be a non-empty N x D matrix, got shape {X.shape}")
        if X.dtype not in (np.float32, np.float64):
            X = X.astype(np.float64)
        if not np.all(np.isfinite(X)):
            raise ValueError("dataset contains non-finite values")
        X = np.ascontiguousarray(X)
        X.flags.writeable = False
        object.__setattr__(self, "X", X)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def as_float64(self) -> np.ndarray:
        if self.X.dtype == np.float64:
            return self.X
        return self.X.astype(np.float64)

    def subset(self, rows, split=None) -> "Dataset":
        return Dataset(self.X[np.asarray(rows)], split if split is not None else self.split)


def _data(dataset) -> np.ndarray:
    if isinstance(dataset, Dataset):
        return dataset.as_float64()
    return np.asarray(dataset, dtype=np.float64)


def variance_floor(X) -> np.ndarray:
    """Per-dimension lower bound on noise variances: max(1e-8, 1e-6 * var_d)."""
    X = _data(X)
    return np.maximum(1e-8, 1e-6 * X.var(axis=0))


def exact_log_likelihood(params: MfaParams, dataset, caches=None, counter: Optional[JointCounter] = joint_counter) -> float:
    X = _data(dataset)
    if X.shape[1] != params.D:
        raise ValueError(f"data dimension {X.shape[1]} does not match model dimension {params.D}")
    J = all_log_joints(params, X, caches=caches, counter=counter)
    return float(np.sum(logsumexp(J, axis=1)))


def _as_kmatrix(K_sets, N):
    if isinstance(K_sets, np.ndarray) and K_sets.ndim == 2:
        K = K_sets.astype(np.int64, copy=False)
        if K.shape[0] != N:
            raise ValueError("one K-set per data point is required")
        if K.shape[1] == 0 or np.any(np.all(K < 0, axis=1)):
            raise EmptyKSet("every K-set must contain at least one component")
        return K
    sets = [list(k) for k in K_sets]
    if len(sets) != N:
        raise ValueError("one K-set per data point is required")
    width = max((len(k) for k in sets), default=0)
    if width == 0 or any(len(k) == 0 for k in sets):
        raise EmptyKSet("every K-set must contain at least one component")
    K = np.full((N, width), -1, dtype=np.int64)
    for n, k in enumerate(sets):
        K[n, : len(k)] = k
    return K


def truncated_log_joints(params: MfaParams, X, K, caches=None, counter: Optional[JointCounter] = joint_counter):
    """Log-joints for the members of each K-set; padding (-1) maps to -inf."""
    caches = precompute(params) if caches is None else caches
    valid = K >= 0
    rows = np.broadcast_to(np.arange(K.shape[0])[:, None], K.shape)[valid]
    vals = pair_log_joints(params, caches, X, rows, K[valid], counter=counter)
    J = np.full(K.shape, -np.inf)
    J[valid] = vals
    return J


def truncated_free_energy(params: MfaParams, dataset, K_sets, caches=None, counter: Optional[JointCounter] = joint_counter) -> float:
    """sum_n log sum_{c in K_n} p(c, x_n | Theta)."""
    X = _data(dataset)
    K = _as_kmatrix(K_sets, X.shape[0])
    J = truncated_log_joints(params, X, K, caches=caches, counter=counter)
    return float(np.sum(logsumexp(J, axis=1)))


def free_energy_from_joints(J) -> float:
    return float(np.sum(logsumexp(J, axis=1)))

