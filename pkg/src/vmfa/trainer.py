"""Training loops: truncated variational EM (v-MFA), exact EM (em-MFA) and the
quality-matched early-stopped exact EM (em-MFA-dagger).

Joint-evaluation counts in a report cover the E-steps only.  Free energies
recorded after an M-step, and NLL evaluations, are monitoring and are neither
counted nor timed.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .convergence import check_convergence
from .errors import MaxIterExceeded, TargetUnreachable
from .estep import MODES, full_e_step, variational_e_step
from .model import (
    JointCounter,
    MfaParams,
    _data,
    all_log_joints,
    exact_log_likelihood,
    free_energy_from_joints,
    joint_counter,
    precompute,
    truncated_free_energy,
    variance_floor,
)
from .mstep import accumulate_suffstats_dense, m_step, update_params
from .seeding import (
    INIT_METHODS,
    afkmc2_seed,
    distance_counter,
    init_params,
    init_varstate,
    random_points_seed,
    warmup,
)

ALGOS = ("vmfa", "emmfa", "emmfa-matched")

# PRNG stream tags; every stream is default_rng([seed, tag, ...])
STREAM_SEEDS, STREAM_PARAMS, STREAM_VARSTATE, STREAM_WARMUP, STREAM_ESTEP = range(5)


def stream(seed, tag, *more):
    return np.random.default_rng([int(seed), tag, *[int(m) for m in more]])


@dataclass
class TrainConfig:
    algo: str = "vmfa"
    C: int = 8
    H: int = 2
    Cprime: int = 3
    G: int = 15
    epsilon: float = 1e-4
    warmup_epsilon: float = 1e-4
    max_iters: int = 1000
    warmup_max_iters: int = 1000
    distance_mode: str = "kl"
    deterministic: bool = True
    seed: int = 0
    eval_nll_every: int = 0
    init: str = "afkmc2"
    chain_length: int = 10
    lambda_scale: float = 1.0
    literal_eq14: bool = False
    strict: bool = True
    threads: Optional[int] = None

    def __post_init__(self):
        if self.init == "random":
            self.init = "random-points"

    def validate(self, D=None):
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if self.C < 1:
            raise ValueError("C must be >= 1")
        if self.H < 1 or (D is not None and self.H > D):
            raise ValueError(f"latent dimension H={self.H} must satisfy 1 <= H <= D")
        if not self.epsilon > 0 or not self.warmup_epsilon > 0:
            raise ValueError("epsilon and warmup_epsilon must be > 0")
        if self.max_iters < 1 or self.warmup_max_iters < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.algo == "vmfa":
            if not 1 <= self.Cprime <= self.C:
                raise ValueError(f"need 1 <= C'={self.Cprime} <= C={self.C}")
            if not 1 <= self.G <= self.C:
                raise ValueError(f"need 1 <= G={self.G} <= C={self.C}")
        if self.distance_mode not in MODES:
            raise ValueError(f"unknown distance mode {self.distance_mode!r}")
        if self.init not in INIT_METHODS:
            raise ValueError(f"unknown init method {self.init!r}")
        if self.chain_length < 1:
            raise ValueError("chain_length must be >= 1")
        if self.eval_nll_every < 0:
            raise ValueError("eval_nll_every must be >= 0")
        return self


@dataclass
class TrainReport:
    config: dict
    records: list = field(default_factory=list)  # one dict per iteration (warm-up and main)
    trace: list = field(default_factory=list)  # (phase, F) in execution order
    warmup_iterations: int = 0
    iterations: int = 0
    converged: bool = False
    joint_evals: int = 0
    distance_evals: int = 0
    wall_ms: float = 0.0
    empty_components: int = 0
    nll_train: Optional[float] = None
    nll_test: Optional[float] = None
    returned_iteration: Optional[int] = None

    def main_F(self):
        return [r["F"] for r in self.records if r["phase"] == "main"]

    def summary(self):
        keys = (
            "warmup_iterations", "iterations", "converged", "joint_evals", "distance_evals",
            "wall_ms", "empty_components", "nll_train", "nll_test", "returned_iteration",
        )
        out = {"type": "summary", "algo": self.config.get("algo")}
        out.update({k: getattr(self, k) for k in keys})
        out["config"] = self.config
        return out

    def jsonl_lines(self, wall=True):
        objs = [dict(r, type="iteration") for r in self.records] + [self.summary()]
        if not wall:
            for o in objs:
                o.pop("wall_ms", None)
        return [json.dumps(o, sort_keys=True) for o in objs]

    def write_jsonl(self, fh, wall=True):
        for line in self.jsonl_lines(wall=wall):
            fh.write(line + "\n")


class _Clock:
    """Training wall-clock that can be paused for evaluation work."""

    def __init__(self):
        self.elapsed = 0.0
        self._t = time.perf_counter()

    def pause(self):
        self.elapsed += time.perf_counter() - self._t

    def resume(self):
        self._t = time.perf_counter()

    @property
    def ms(self):
        return 1e3 * (self.elapsed + time.perf_counter() - self._t)


def _nll(params, data):
    return None if data is None else -exact_log_likelihood(params, data, counter=None) / _data(data).shape[0]


def initialize(config: TrainConfig, dataset, floor=None):
    """Seeds and starting parameters shared by every algorithm for a given seed."""
    X = _data(dataset)
    before = distance_counter.count
    if config.init == "afkmc2":
        seeds = afkmc2_seed(X, config.C, config.chain_length, stream(config.seed, STREAM_SEEDS))
    else:
        seeds = random_points_seed(X, config.C, stream(config.seed, STREAM_SEEDS))
    params = init_params(
        X, config.C, config.H, seeds, stream(config.seed, STREAM_PARAMS), config.lambda_scale, floor=floor
    )
    return params, seeds, distance_counter.count - before


def _record(report, phase, t, F, clock, empty=0, nll=(None, None)):
    report.records.append(
        {
            "phase": phase,
            "t": t,
            "F": F,
            "joint_evals": report.joint_evals,
            "distance_evals": report.distance_evals,
            "wall_ms": clock.ms,
            "empty_components": int(empty),
            "nll_train": nll[0],
            "nll_test": nll[1],
        }
    )


def _periodic_nll(config, t, params, X, testset, clock):
    if config.eval_nll_every and t % config.eval_nll_every == 0:
        clock.pause()
        out = (_nll(params, X), _nll(params, testset))
        clock.resume()
        return out
    return (None, None)


def _finish(report, params, X, testset, clock):
    report.wall_ms = clock.ms
    report.nll_train = _nll(params, X)
    report.nll_test = _nll(params, testset)


def train_vmfa(config: TrainConfig, dataset, testset=None, counter: Optional[JointCounter] = joint_counter):
    """Truncated variational EM.  Returns (params, state, report)."""
    X = _data(dataset)
    config.validate(X.shape[1])
    clock = _Clock()
    report = TrainReport(config=asdict(config))
    floor = variance_floor(X)
    params, seeds, report.distance_evals = initialize(config, X, floor)
    state = init_varstate(X.shape[0], config.C, config.Cprime, config.G, seeds, stream(config.seed, STREAM_VARSTATE))
    active = np.ones(config.C, dtype=bool)
    caches = precompute(params)

    try:
        wu = warmup(
            params, X, state, lambda t: stream(config.seed, STREAM_WARMUP, t), config.warmup_epsilon,
            max_iters=config.warmup_max_iters, mode=config.distance_mode, caches=caches, active=active,
            literal=config.literal_eq14, counter=counter, strict=config.strict,
        )
    except MaxIterExceeded as exc:
        exc.result = (params, exc.result.state, report)
        raise
    report.trace.append(("init", wu.F[0]))
    for t, (F, n) in enumerate(zip(wu.F[1:], wu.joints), start=1):
        report.joint_evals += n
        report.trace.append(("warmup", F))
        _record(report, "warmup", t, F, clock)
    report.warmup_iterations = wu.iterations
    state = wu.state

    F_prev = wu.F[-1]
    for t in range(1, config.max_iters + 1):
        res = variational_e_step(
            params, caches, X, state, rng=stream(config.seed, STREAM_ESTEP, t),
            mode=config.distance_mode, active=active, counter=counter,
        )
        report.joint_evals += res.n_joints
        report.trace.append(("estep", res.F))
        state = res.state
        params, empty = m_step(params, caches, X, res.q, state.K, floor)
        active &= ~empty
        caches = precompute(params)
        F = truncated_free_energy(params, X, state.K, caches=caches, counter=None)
        report.trace.append(("mstep", F))
        report.iterations = t
        report.empty_components = int(np.count_nonzero(~active))
        _record(report, "main", t, F, clock, report.empty_components, _periodic_nll(config, t, params, X, testset, clock))
        if check_convergence(F_prev, F, config.epsilon, config.literal_eq14):
            report.converged = True
            break
        F_prev = F
    _finish(report, params, X, testset, clock)
    if not report.converged and config.strict:
        raise MaxIterExceeded(f"v-MFA did not converge within {config.max_iters} iterations", (params, state, report))
    return params, state, report


def em_iterations(params: MfaParams, X, floor, max_iters, counter: Optional[JointCounter] = joint_counter):
    """Exact EM.  Yields (t, params, loglik_before, loglik_after, empty) per iteration.

    The joint matrix computed to monitor the log-likelihood after an M-step is
    reused by the next E-step, where its N*C evaluations are counted.
    """
    X = _data(X)
    N, C = X.shape[0], params.C
    caches = precompute(params)
    J = all_log_joints(params, X, caches=caches, counter=None)
    for t in range(1, max_iters + 1):
        _, q, _, ll_before = full_e_step(params, X, J=J)
        if counter is not None:
            counter.add(N * C)
        stats = accumulate_suffstats_dense(params, caches, X, q)
        params, empty = update_params(stats, N, params, floor)
        caches = precompute(params)
        J = all_log_joints(params, X, caches=caches, counter=None)
        ll_after = free_energy_from_joints(J)
        yield t, params, ll_before, ll_after, empty


def train_emmfa(config: TrainConfig, dataset, testset=None, counter: Optional[JointCounter] = joint_counter):
    """Exact EM from the same initialisation as v-MFA.  Returns (params, report)."""
    X = _data(dataset)
    config.validate(X.shape[1])
    clock = _Clock()
    report = TrainReport(config=asdict(config))
    floor = variance_floor(X)
    params, _, report.distance_evals = initialize(config, X, floor)
    N, C = X.shape[0], config.C
    for t, params, ll_before, ll, empty in em_iterations(params, X, floor, config.max_iters, counter):
        if t == 1:
            report.trace.append(("init", ll_before))
        report.joint_evals += N * C
        report.trace.append(("estep", ll_before))
        report.trace.append(("mstep", ll))
        report.iterations = t
        report.empty_components = int(np.count_nonzero(params.pi == 0))
        _record(report, "main", t, ll, clock, report.empty_components, _periodic_nll(config, t, params, X, testset, clock))
        if check_convergence(ll_before, ll, config.epsilon, config.literal_eq14):
            report.converged = True
            break
    _finish(report, params, X, testset, clock)
    if not report.converged and config.strict:
        raise MaxIterExceeded(f"em-MFA did not converge within {config.max_iters} iterations", (params, report))
    return params, report


def train_emmfa_matched(config: TrainConfig, dataset, testset, target_nll, counter: Optional[JointCounter] = joint_counter):
    """Exact EM stopped at a quality target.

    After every iteration the test NLL is checked; the first time it drops
    below ``target_nll`` the parameters of the previous iteration are
    returned.  Normal convergence before that returns the final parameters.
    """
    X = _data(dataset)
    if testset is None:
        raise ValueError("the quality-matched variant needs a test set")
    config.validate(X.shape[1])
    clock = _Clock()
    report = TrainReport(config=asdict(config))
    floor = variance_floor(X)
    params, _, report.distance_evals = initialize(config, X, floor)
    N, C = X.shape[0], config.C
    snapshot, snap_t = params, 0
    for t, params, ll_before, ll, empty in em_iterations(params, X, floor, config.max_iters, counter):
        report.joint_evals += N * C
        report.trace.append(("estep", ll_before))
        report.trace.append(("mstep", ll))
        report.iterations = t
        clock.pause()
        nll_test = _nll(params, testset)
        clock.resume()
        report.empty_components = int(np.count_nonzero(params.pi == 0))
        _record(report, "main", t, ll, clock, report.empty_components, (None, nll_test))
        if nll_test < target_nll:
            report.converged = True
            report.returned_iteration = snap_t
            _finish(report, snapshot, X, testset, clock)
            return snapshot, report
        snapshot, snap_t = params, t
        if check_convergence(ll_before, ll, config.epsilon, config.literal_eq14):
            report.converged = True
            report.returned_iteration = t
            _finish(report, params, X, testset, clock)
            return params, report
    _finish(report, params, X, testset, clock)
    raise TargetUnreachable(f"target NLL {target_nll} not reached within {config.max_iters} iterations", (params, report))


def train(config: TrainConfig, dataset, testset=None, target_nll=None):
    """Dispatch on ``config.algo``; always returns (params, state_or_None, report)."""
    if config.algo == "vmfa":
        return train_vmfa(config, dataset, testset)
    if config.algo == "emmfa":
        params, report = train_emmfa(config, dataset, testset)
        return params, None, report
    if config.algo == "emmfa-matched":
        if target_nll is None:
            raise ValueError("emmfa-matched needs a target NLL")
        params, report = train_emmfa_matched(config, dataset, testset, target_nll)
        return params, None, report
    raise ValueError(f"unknown algorithm {config.algo!r}")
