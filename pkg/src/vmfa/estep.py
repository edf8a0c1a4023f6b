"""Truncated variational E-step.

Each data point n keeps an index set K_n of C' components; each component c
keeps a neighbourhood g_c of at most G components (always containing c).  One
E-step evaluates joints only over the search space S_n = union of g_c for c in
K_n, plus one uniformly drawn component, and reuses exactly those joints to
re-rank the neighbourhoods.

The per-point functions (``build_search_space``, ``update_K``, ...) are the
readable reference form.  ``variational_e_step`` is the array version used in
training; the test-suite checks the two against each other.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import InsufficientCandidates
from .model import JointCounter, MfaParams, all_log_joints, joint_counter, pair_log_joints

MODES = ("kl", "euclid")


@dataclass
class VarState:
    K: np.ndarray  # (N, C') component indices
    g: np.ndarray  # (C, G) neighbourhoods, padded with -1; g[c, 0] == c
    labels: Optional[np.ndarray] = None  # (N,) hard assignment c_n from the last E-step

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.int64)
        self.g = np.asarray(self.g, dtype=np.int64)

    @property
    def N(self):
        return self.K.shape[0]

    @property
    def C(self):
        return self.g.shape[0]

    @property
    def Cprime(self):
        return self.K.shape[1]

    @property
    def G(self):
        return self.g.shape[1]

    def g_set(self, c):
        row = self.g[c]
        return [int(i) for i in row[row >= 0]]

    @property
    def g_sets(self):
        return [self.g_set(c) for c in range(self.C)]

    @property
    def partition(self):
        """I_c for every component, as sorted arrays of point indices."""
        if self.labels is None:
            return None
        order = np.argsort(self.labels, kind="stable")
        counts = np.bincount(self.labels, minlength=self.C)
        return np.split(order, np.cumsum(counts)[:-1])

    def search_space(self, n):
        out = []
        for c in self.K[n]:
            for ct in self.g_set(c):
                if ct not in out:
                    out.append(ct)
        return out

    def copy(self):
        return VarState(self.K.copy(), self.g.copy(), None if self.labels is None else self.labels.copy())

    def validate(self):
        C, Cp, G = self.C, self.Cprime, self.G
        if not (1 <= Cp <= C) or not (1 <= G <= C):
            raise ValueError(f"need 1 <= C'={Cp} <= C={C} and 1 <= G={G} <= C")
        if np.any(self.K < 0) or np.any(self.K >= C):
            raise ValueError("K-set index out of range")
        Ks = np.sort(self.K, axis=1)
        if np.any(Ks[:, 1:] == Ks[:, :-1]):
            raise ValueError("K-set indices must be distinct")
        if np.any(self.g[:, 0] != np.arange(C)):
            raise ValueError("g_c must contain c")
        for c in range(C):
            s = self.g_set(c)
            if len(set(s)) != len(s) or any(i >= C for i in s):
                raise ValueError(f"g_{c} has duplicate or out-of-range entries")
        if self.labels is not None:
            if self.labels.shape != (self.N,) or np.any(self.labels < 0) or np.any(self.labels >= C):
                raise ValueError("partition labels out of range")
        return self


# ---------------------------------------------------------------------------
# reference (per-point) operations


def build_search_space(state: VarState, n, rng=None, extra=None):
    """Ordered union of g_c over c in K_n, plus one uniformly drawn component."""
    out = state.search_space(n)
    if extra is None:
        extra = int(rng.integers(state.C))
    if extra not in out:
        out.append(int(extra))
    return out


def _top_order(indices, values):
    # descending value, ties to the smaller index
    return sorted(range(len(indices)), key=lambda i: (-values[i], indices[i]))


def update_K(joints, Cprime):
    """The C' indices with the largest log-joints among the candidates in ``joints``."""
    if len(joints) < Cprime:
        raise InsufficientCandidates(f"{len(joints)} candidates for C'={Cprime}")
    idx = list(joints)
    vals = [joints[i] for i in idx]
    return [idx[i] for i in _top_order(idx, vals)[:Cprime]]


def hard_partition(K, JK, C=None):
    """Argmax component within each K-set (ties to the smaller index) and the cells I_c."""
    K = np.asarray(K, dtype=np.int64)
    JK = np.asarray(JK, dtype=np.float64)
    order = np.lexsort((K, -JK), axis=1)
    labels = K[np.arange(K.shape[0]), order[:, 0]]
    C = int(K.max()) + 1 if C is None else C
    cells = [np.flatnonzero(labels == c) for c in range(C)]
    return labels, cells


class DistanceAccumulator:
    """Per-component sparse sums of log-density differences and their sample counts."""

    def __init__(self, C):
        self.C = C
        self.sums = [defaultdict(float) for _ in range(C)]
        self.counts = [defaultdict(int) for _ in range(C)]

    def add(self, c, ct, value):
        if ct == c:
            return
        self.sums[c][ct] += value
        self.counts[c][ct] += 1

    def estimate(self, c):
        return {ct: self.sums[c][ct] / self.counts[c][ct] for ct in self.sums[c]}

    def items(self):
        for c in range(self.C):
            for ct, d in self.estimate(c).items():
                yield c, ct, d, self.counts[c][ct]


def accumulate_distances(acc: DistanceAccumulator, labels, search_spaces, joints, log_pi, mode="kl"):
    """Fold one E-step's retained joints into ``acc``; no new joints are evaluated.

    ``search_spaces[n]`` lists the components of S_n and ``joints[n]`` the matching
    log-joints.  In kl mode the summand is log p(x|c) - log p(x|c~) with c = c_n;
    in euclid mode it is -log p(c~, x).
    """
    if mode not in MODES:
        raise ValueError(f"unknown distance mode {mode!r}")
    for n, c in enumerate(labels):
        c = int(c)
        js = dict(zip(search_spaces[n], joints[n]))
        own = js[c] - log_pi[c]
        for ct, j in js.items():
            if ct == c or not np.isfinite(j):
                continue
            if mode == "kl":
                acc.add(c, ct, own - (j - log_pi[ct]))
            else:
                acc.add(c, ct, -j)
    return acc


def update_g(acc: DistanceAccumulator, c, G):
    """{c} plus the G-1 components with the smallest estimated divergence from c."""
    est = acc.estimate(c)
    ranked = sorted(est, key=lambda ct: (est[ct], ct))
    return [c] + ranked[: G - 1]


def responsibilities(JK):
    """Truncated posteriors over each K-set from its log-joints."""
    JK = np.asarray(JK, dtype=np.float64)
    return np.exp(JK - logsumexp(JK, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# vectorised E-step


@dataclass
class DistanceEstimates:
    """Sparse (c, c~) table produced by block 3 of an E-step."""

    c: np.ndarray
    ct: np.ndarray
    total: np.ndarray
    count: np.ndarray

    @property
    def value(self):
        return self.total / self.count

    def to_accumulator(self, C):
        acc = DistanceAccumulator(C)
        for c, ct, s, k in zip(self.c, self.ct, self.total, self.count):
            acc.sums[int(c)][int(ct)] = float(s)
            acc.counts[int(c)][int(ct)] = int(k)
        return acc


@dataclass
class EStepResult:
    state: VarState
    q: np.ndarray  # (N, C') responsibilities, aligned with state.K
    JK: np.ndarray  # (N, C') log-joints, aligned with state.K
    n_joints: int
    F: float  # truncated free energy after the K update
    S: Optional[np.ndarray] = field(default=None, repr=False)  # (N, M) search spaces, padded with C
    JS: Optional[np.ndarray] = field(default=None, repr=False)  # (N, M) log-joints over S
    distances: Optional[DistanceEstimates] = None


def _search_spaces(state: VarState, extra):
    """Per-row sorted distinct candidates, padded at the end with C."""
    N, C = state.N, state.C
    cand = state.g[state.K].reshape(N, -1)
    cand = np.concatenate([cand, np.asarray(extra, dtype=np.int64)[:, None]], axis=1)
    cand[cand < 0] = C
    S = np.sort(cand, axis=1)
    S[:, 1:][S[:, 1:] == S[:, :-1]] = C
    S.sort(axis=1)
    width = int(np.max(np.count_nonzero(S < C, axis=1)))
    return S[:, :width]


def _pair_table(flat, vals, C):
    if C * C <= 4_000_000:
        total = np.bincount(flat, weights=vals, minlength=C * C)
        count = np.bincount(flat, minlength=C * C)
        keys = np.flatnonzero(count)
        total, count = total[keys], count[keys]
    else:
        keys, inv = np.unique(flat, return_inverse=True)
        total = np.bincount(inv, weights=vals, minlength=keys.size)
        count = np.bincount(inv, minlength=keys.size)
    return DistanceEstimates(c=keys // C, ct=keys % C, total=total, count=count)


def _neighbourhoods(C, G, est: DistanceEstimates):
    g = np.full((C, G), -1, dtype=np.int64)
    g[:, 0] = np.arange(C)
    if G == 1 or est.c.size == 0:
        return g
    val = est.value
    order = np.lexsort((est.ct, val, est.c))
    cs = est.c[order]
    starts = np.flatnonzero(np.r_[True, cs[1:] != cs[:-1]])
    first = np.repeat(starts, np.diff(np.r_[starts, cs.size]))
    rank = np.arange(cs.size) - first
    keep = rank < G - 1
    g[cs[keep], 1 + rank[keep]] = est.ct[order][keep]
    return g


def variational_e_step(
    params: MfaParams,
    caches,
    X,
    state: VarState,
    rng=None,
    mode="kl",
    active=None,
    extra=None,
    counter: Optional[JointCounter] = joint_counter,
    keep_search=False,
) -> EStepResult:
    """One partial E-step over all points (blocks 1-4).

    ``extra`` optionally fixes the uniformly drawn component for each point;
    otherwise it is drawn from ``rng``.  Components with ``active[c] == False``
    are never evaluated and behave as log-joint -inf.
    """
    if mode not in MODES:
        raise ValueError(f"unknown distance mode {mode!r}")
    X = np.asarray(X, dtype=np.float64)
    N, C, Cp, G = state.N, state.C, state.Cprime, state.G
    if extra is None:
        extra = rng.integers(0, C, size=N)

    # block 1: search spaces, joints, K update
    S = _search_spaces(state, extra)
    valid = S < C
    evaluate = valid if active is None else valid & np.append(active, False)[S]
    rows = np.broadcast_to(np.arange(N)[:, None], S.shape)
    JS = np.full(S.shape, -np.inf)
    JS[evaluate] = pair_log_joints(params, caches, X, rows[evaluate], S[evaluate], counter=None)
    n_joints = int(np.count_nonzero(evaluate))
    if counter is not None:
        counter.add(n_joints)
    if np.any(np.count_nonzero(valid, axis=1) < Cp):
        raise InsufficientCandidates("search space smaller than C'")
    # rows of S are ascending with padding last, so a stable sort breaks ties to the smaller index
    order = np.argsort(-JS, axis=1, kind="stable")[:, :Cp]
    K = np.take_along_axis(S, order, axis=1)
    JK = np.take_along_axis(JS, order, axis=1)

    # block 2: hard partition (K is sorted by descending joint, ties to smaller index)
    labels = K[:, 0].copy()

    # block 3: distance estimates from retained joints only
    use = evaluate & (S != labels[:, None]) & np.isfinite(JK[:, :1])
    cn = np.broadcast_to(labels[:, None], S.shape)[use]
    ct = S[use]
    with np.errstate(divide="ignore", invalid="ignore"):
        log_pi = np.append(np.log(params.pi), 0.0)
        if mode == "kl":
            own = (JK[:, 0] - log_pi[labels])[:, None]
            vals = (own - (JS - log_pi[S]))[use]
        else:
            vals = -JS[use]
    est = _pair_table(cn * C + ct, vals, C)
    g = _neighbourhoods(C, G, est)

    # block 4: truncated responsibilities
    lse = logsumexp(JK, axis=1)
    q = np.exp(JK - lse[:, None])

    return EStepResult(
        state=VarState(K, g, labels),
        q=q,
        JK=JK,
        n_joints=n_joints,
        F=float(np.sum(lse)),
        S=S if keep_search else None,
        JS=JS if keep_search else None,
        distances=est,
    )


def full_e_step(params: MfaParams, X, caches=None, J=None, counter: Optional[JointCounter] = joint_counter):
    """Exact E-step over all C components.

    Returns (K, q, J, loglik) with K = every component for every point.  A
    precomputed joint matrix ``J`` may be passed in (its cost is then the
    caller's to count).
    """
    X = np.asarray(X, dtype=np.float64)
    if J is None:
        J = all_log_joints(params, X, caches=caches, counter=counter)
    lse = logsumexp(J, axis=1)
    q = np.exp(J - lse[:, None])
    K = np.broadcast_to(np.arange(params.C), J.shape)
    return K, q, J, float(np.sum(lse))
