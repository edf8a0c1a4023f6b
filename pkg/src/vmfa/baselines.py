"""k-means followed by an independent factor analyzer per Voronoi cell."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .convergence import check_convergence
from .errors import TinyClusterWarning
from .model import JointCounter, MfaParams, _data, variance_floor
from .seeding import distance_counter
from .trainer import em_iterations


@dataclass
class KmeansState:
    centers: np.ndarray  # (C, D)
    assignments: np.ndarray  # (N,)
    inertia: float
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)


def _assign(X, centers, counter, chunk=8192):
    """Nearest center per row (ties to the smaller index) and its squared distance."""
    N = X.shape[0]
    labels = np.empty(N, dtype=np.int64)
    d2min = np.empty(N)
    cn = np.einsum("ij,ij->i", centers, centers)
    for s in range(0, N, chunk):
        xb = X[s : s + chunk]
        d2 = np.einsum("ij,ij->i", xb, xb)[:, None] - 2.0 * xb @ centers.T + cn[None, :]
        np.maximum(d2, 0.0, out=d2)
        labels[s : s + chunk] = np.argmin(d2, axis=1)
        d2min[s : s + chunk] = d2[np.arange(xb.shape[0]), labels[s : s + chunk]]
    if counter is not None:
        counter.add(N * centers.shape[0])
    return labels, d2min


def kmeans_lloyd(dataset, C, init_centers, max_iters=300, tol=None, counter: Optional[JointCounter] = distance_counter):
    """Lloyd iterations until no center moves more than ``tol`` (Euclidean).

    ``tol`` defaults to 1e-4 times the RMS per-dimension data spread.  A
    cluster that loses all its points is moved onto the point farthest from
    its current center.
    """
    X = _data(dataset)
    centers = np.array(init_centers, dtype=np.float64)
    if centers.shape != (C, X.shape[1]):
        raise ValueError(f"init_centers must have shape {(C, X.shape[1])}")
    if C > X.shape[0]:
        raise ValueError(f"C={C} exceeds N={X.shape[0]}")
    if tol is None:
        tol = 1e-4 * float(np.sqrt(X.var(axis=0).mean()))
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        labels, d2 = _assign(X, centers, counter)
        history.append(float(d2.sum()))
        counts = np.bincount(labels, minlength=C)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        new = centers.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        if not np.all(nz):
            far = np.argsort(-d2, kind="stable")
            for c, n in zip(np.flatnonzero(~nz), far):
                new[c] = X[n]
        shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
        centers = new
        if shift <= tol:
            break
    labels, d2 = _assign(X, centers, counter)
    return KmeansState(centers, labels, float(d2.sum()), it, history)


def fit_single_fa(X, H, rng=None, epsilon=1e-4, max_iters=200, floor=None, lambda_scale=1.0):
    """One factor analyzer fitted by EM from the sample mean and variances."""
    X = _data(X)
    rng = np.random.default_rng(rng)
    D = X.shape[1]
    floor = variance_floor(X) if floor is None else floor
    params = MfaParams(
        pi=np.ones(1),
        mu=X.mean(axis=0, keepdims=True),
        Lambda=lambda_scale * rng.random((1, D, H)),
        Dnoise=np.maximum(X.var(axis=0), floor)[None, :],
    )
    lls = []
    for t, params, ll_before, ll, _ in em_iterations(params, X, floor, max_iters, counter=None):
        lls.append(ll)
        if check_convergence(ll_before, ll, epsilon):
            break
    return params, lls


def fit_fa_per_cluster(dataset, state: KmeansState, H, rng=None, epsilon=1e-4, max_iters=200, floor=None, lambda_scale=1.0):
    """Assemble an MFA from one factor analyzer per k-means cell, pi_c = |P_c| / N."""
    X = _data(dataset)
    rng = np.random.default_rng(rng)
    C, D = state.centers.shape
    N = X.shape[0]
    floor = variance_floor(X) if floor is None else np.broadcast_to(floor, (D,))
    pi = np.zeros(C)
    mu = np.zeros((C, D))
    lam = np.zeros((C, D, H))
    dn = np.zeros((C, D))
    for c in range(C):
        cell = X[state.assignments == c]
        pi[c] = cell.shape[0] / N
        if cell.shape[0] < 2:
            warnings.warn(f"cell {c} has {cell.shape[0]} point(s); using mean and floored variances", TinyClusterWarning)
            mu[c] = cell.mean(axis=0) if cell.shape[0] else state.centers[c]
            dn[c] = floor
            continue
        p, _ = fit_single_fa(cell, H, rng, epsilon, max_iters, floor, lambda_scale)
        mu[c], lam[c], dn[c] = p.mu[0], p.Lambda[0], p.Dnoise[0]
    return MfaParams(pi / pi.sum(), mu, lam, dn)


def train_kmeans_fa(dataset, C, H, seeds, rng=None, max_iters=300, fa_epsilon=1e-4, fa_max_iters=200):
    """k-means from the given seed rows, then per-cell factor analyzers."""
    X = _data(dataset)
    km = kmeans_lloyd(X, C, X[np.asarray(seeds)], max_iters=max_iters)
    return fit_fa_per_cluster(X, km, H, rng, fa_epsilon, fa_max_iters), km
