"""Initialisation: AFK-MC2 mean seeding, starting parameters, starting K/g sets, warm-up."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .convergence import check_convergence
from .errors import DegenerateData, MaxIterExceeded
from .estep import VarState, variational_e_step
from .model import JointCounter, MfaParams, _data, joint_counter, precompute, truncated_free_energy, variance_floor

INIT_METHODS = ("afkmc2", "random-points")

distance_counter = JointCounter()


@dataclass
class InitConfig:
    method: str = "afkmc2"
    chain_length: int = 10
    seed: int = 0
    warmup_epsilon: float = 1e-4
    lambda_scale: float = 1.0

    def __post_init__(self):
        if self.method == "random":
            self.method = "random-points"
        if self.method not in INIT_METHODS:
            raise ValueError(f"unknown init method {self.method!r}")
        if self.chain_length < 1:
            raise ValueError("chain_length must be >= 1")
        if not self.warmup_epsilon > 0:
            raise ValueError("warmup_epsilon must be > 0")


def _check_distinct(X, C):
    if C > X.shape[0]:
        raise DegenerateData(f"cannot seed C={C} components from N={X.shape[0]} points")
    if np.unique(X, axis=0).shape[0] < C:
        raise DegenerateData(f"fewer than C={C} distinct data rows")


def _sq_dist(X, centers):
    """(len(X), len(centers)) squared Euclidean distances, exact (no expansion)."""
    diff = X[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def afkmc2_seed(dataset, C, chain_length=10, rng=None, counter: Optional[JointCounter] = distance_counter):
    """C distinct row indices chosen by AFK-MC2.

    The first index is uniform.  Each further center is the final state of an
    independent Metropolis chain of ``chain_length`` proposals drawn from
    q(x) = d^2(x, c_1) / (2 sum d^2) + 1 / (2N), where acceptance uses d^2 to
    the nearest center chosen so far.  A chain that ends on a point already at
    distance zero is rerun.
    """
    X = _data(dataset)
    rng = np.random.default_rng(rng)
    N = X.shape[0]
    if chain_length < 1:
        raise ValueError("chain_length must be >= 1")
    _check_distinct(X, C)
    first = int(rng.integers(N))
    d2 = _sq_dist(X, X[first : first + 1])[:, 0]
    if counter is not None:
        counter.add(N)
    seeds = [first]
    if C == 1:
        return np.array(seeds, dtype=np.int64)
    q = 0.5 * d2 / d2.sum() + 0.5 / N
    cdf = np.cumsum(q)
    cdf /= cdf[-1]
    while len(seeds) < C:
        centers = X[seeds]
        while True:
            props = np.minimum(np.searchsorted(cdf, rng.random(chain_length), side="right"), N - 1)
            u = rng.random(chain_length)
            dp = _sq_dist(X[props], centers).min(axis=1)
            if counter is not None:
                counter.add(chain_length * len(seeds))
            x, dx = props[0], dp[0]
            for j in range(1, chain_length):
                y, dy = props[j], dp[j]
                if dy * q[x] > u[j] * dx * q[y]:
                    x, dx = y, dy
            if dx > 0:
                break
        seeds.append(int(x))
    return np.array(seeds, dtype=np.int64)


def random_points_seed(dataset, C, rng=None):
    """C row indices drawn uniformly without replacement."""
    X = _data(dataset)
    rng = np.random.default_rng(rng)
    if C > X.shape[0]:
        raise DegenerateData(f"cannot seed C={C} components from N={X.shape[0]} points")
    return np.sort(rng.choice(X.shape[0], size=C, replace=False)).astype(np.int64)


def init_params(dataset, C, H, seeds, rng=None, lambda_scale=1.0, floor=None):
    """Means at the seed rows, shared per-dimension data variance, uniform [0, 1) loadings."""
    X = _data(dataset)
    rng = np.random.default_rng(rng)
    seeds = np.asarray(seeds, dtype=np.int64)
    if seeds.shape != (C,):
        raise ValueError(f"need {C} seed indices, got {seeds.shape}")
    D = X.shape[1]
    floor = variance_floor(X) if floor is None else floor
    var = np.maximum(X.var(axis=0), floor)
    return MfaParams(
        pi=np.full(C, 1.0 / C),
        mu=X[seeds].copy(),
        Lambda=lambda_scale * rng.random((C, D, H)),
        Dnoise=np.tile(var, (C, 1)),
    )


def _distinct_draws(rng, rows, k, C):
    """``rows`` independent uniform draws of k distinct values from range(C)."""
    if k == 0:
        return np.empty((rows, 0), dtype=np.int64)
    if rows * C <= 5_000_000:
        return np.argpartition(rng.random((rows, C)), k - 1, axis=1)[:, :k].astype(np.int64)
    out = rng.integers(0, C, size=(rows, k))
    while True:
        s = np.sort(out, axis=1)
        bad = np.flatnonzero(np.any(s[:, 1:] == s[:, :-1], axis=1))
        if bad.size == 0:
            return out
        out[bad] = rng.integers(0, C, size=(bad.size, k))


def init_varstate(N, C, Cprime, G, seeds, rng=None):
    """Random K-sets of exactly C' distinct members; c is placed in the K-set of its seed point."""
    rng = np.random.default_rng(rng)
    if not (1 <= Cprime <= C) or not (1 <= G <= C):
        raise ValueError(f"need 1 <= C'={Cprime} <= C={C} and 1 <= G={G} <= C")
    K = _distinct_draws(rng, N, Cprime, C)
    for c, n in enumerate(np.asarray(seeds, dtype=np.int64)):
        if c not in K[n]:
            K[n, 0] = c
    others = _distinct_draws(rng, C, G - 1, C - 1)
    others += others >= np.arange(C)[:, None]  # skip c itself
    g = np.concatenate([np.arange(C)[:, None], others], axis=1)
    return VarState(K, g)


@dataclass
class WarmupResult:
    state: VarState
    iterations: int
    F: list = field(default_factory=list)  # F before the first step, then after each step
    joints: list = field(default_factory=list)  # joints evaluated per step


def warmup(
    params: MfaParams,
    dataset,
    state: VarState,
    rng,
    warmup_epsilon=1e-4,
    max_iters=1000,
    mode="kl",
    caches=None,
    active=None,
    literal=False,
    counter: Optional[JointCounter] = joint_counter,
    strict=True,
) -> WarmupResult:
    """Repeat variational E-steps at fixed parameters until F stops changing.

    ``rng`` is a Generator or a callable mapping the step number (from 1) to one.
    """
    X = _data(dataset)
    caches = precompute(params) if caches is None else caches
    draw = rng if callable(rng) else (lambda t: rng)
    F_prev = truncated_free_energy(params, X, state.K, caches=caches, counter=None)
    out = WarmupResult(state, 0, [F_prev], [])
    for t in range(1, max_iters + 1):
        res = variational_e_step(params, caches, X, out.state, rng=draw(t), mode=mode, active=active, counter=counter)
        out.state, out.iterations = res.state, t
        out.F.append(res.F)
        out.joints.append(res.n_joints)
        if check_convergence(F_prev, res.F, warmup_epsilon, literal=literal):
            return out
        F_prev = res.F
    if strict:
        raise MaxIterExceeded(f"warm-up did not converge within {max_iters} iterations", out)
    return out
