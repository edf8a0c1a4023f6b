"""Scaling and quality experiment harness.

Scaling: for each C on a ladder, train on a uniform subsample of
N~ = N_total * C / C_max rows (so N~/C is constant) and record joint
evaluations per data point until convergence; fit f(C) = b C^a on log-log.

Quality: identical initialisation for every algorithm, relative test NLL
(NLL - NLL_em) / NLL_em and wall-clock speed-up over em-MFA.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .baselines import train_kmeans_fa
from .model import _data, exact_log_likelihood
from .trainer import TrainConfig, initialize, stream, train_emmfa, train_emmfa_matched, train_vmfa
from .errors import TargetUnreachable

CSV_FIELDS = (
    "C", "algo", "cprime", "gsize", "repeat", "n_points", "joints_per_point", "iterations",
    "warmup_iterations", "wall_ms", "nll_train", "nll_test", "rel_nll", "speedup",
)
STREAM_SUBSAMPLE = 10


def fit_power_law(C, y):
    """Least-squares fit of log y = log b + a log C.  Returns (a, b)."""
    lc = np.log(np.asarray(C, dtype=np.float64))
    ly = np.log(np.asarray(y, dtype=np.float64))
    if lc.size < 2 or np.ptp(lc) == 0:
        raise ValueError("need at least two distinct C values")
    a, logb = np.polyfit(lc, ly, 1)
    return float(a), float(math.exp(logb))


def relative_nll(nll_algo, nll_em):
    return (nll_algo - nll_em) / nll_em


@dataclass
class ScalingSuiteSpec:
    C_list: Sequence[int] = (20, 40, 80, 160)
    N_total: int = 16000
    repeats: int = 5
    H: int = 3
    Cprime: int = 3
    G: int = 15
    epsilon: float = 1e-4
    warmup_epsilon: float = 1e-4
    seed: int = 0
    algos: Sequence[str] = ("vmfa", "emmfa")
    max_iters: int = 1000
    parallel_jobs: int = 1

    def validate(self):
        if list(self.C_list) != sorted(self.C_list) or len(set(self.C_list)) != len(self.C_list):
            raise ValueError("C_list must be strictly ascending")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.N_total < 50 * self.C_list[-1]:
            raise ValueError(f"N_total={self.N_total} leaves fewer than 50 points per component at C={self.C_list[-1]}")
        return self


@dataclass
class SuiteResult:
    rows: list = field(default_factory=list)
    exponents: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()


def _row(C, algo, cfg, repeat, n, report, **extra):
    out = {
        "C": C,
        "algo": algo,
        "cprime": cfg.Cprime if algo == "vmfa" else None,
        "gsize": cfg.G if algo == "vmfa" else None,
        "repeat": repeat,
        "n_points": n,
        "joints_per_point": report.joint_evals / n if report is not None else None,
        "iterations": report.iterations if report is not None else None,
        "warmup_iterations": report.warmup_iterations if report is not None else None,
        "wall_ms": report.wall_ms if report is not None else None,
        "nll_train": report.nll_train if report is not None else None,
        "nll_test": report.nll_test if report is not None else None,
        "rel_nll": None,
        "speedup": None,
    }
    out.update(extra)
    return out


def _scaling_job(spec, X, testset, C, r):
    C_max = spec.C_list[-1]
    n = max(C, int(round(spec.N_total * C / C_max)))
    rows_idx = np.sort(stream(spec.seed, STREAM_SUBSAMPLE, C, r).choice(X.shape[0], size=n, replace=False))
    Xs = X[rows_idx]
    base = TrainConfig(
        C=C, H=spec.H, Cprime=spec.Cprime, G=spec.G, epsilon=spec.epsilon, warmup_epsilon=spec.warmup_epsilon,
        seed=spec.seed * 1000 + r, max_iters=spec.max_iters, strict=False,
    )
    out = []
    vm_nll = None
    if "vmfa" in spec.algos:
        cfg = replace(base, algo="vmfa")
        _, _, rep = train_vmfa(cfg, Xs, testset)
        vm_nll = rep.nll_test
        out.append(_row(C, "vmfa", cfg, r, n, rep))
    if "emmfa" in spec.algos:
        cfg = replace(base, algo="emmfa")
        _, rep = train_emmfa(cfg, Xs, testset)
        out.append(_row(C, "emmfa", cfg, r, n, rep))
    if "emmfa-matched" in spec.algos and vm_nll is not None and testset is not None:
        cfg = replace(base, algo="emmfa-matched")
        try:
            _, rep = train_emmfa_matched(cfg, Xs, testset, vm_nll)
        except TargetUnreachable as exc:
            rep = exc.result[1]
        out.append(_row(C, "emmfa-matched", cfg, r, n, rep))
    return out


def run_scaling_suite(spec: ScalingSuiteSpec, dataset, testset=None) -> SuiteResult:
    spec.validate()
    X = _data(dataset)
    C_max = spec.C_list[-1]
    if X.shape[0] < spec.N_total:
        raise ValueError(f"dataset has {X.shape[0]} rows, N_total={spec.N_total}")
    jobs = [(C, r) for C in spec.C_list for r in range(spec.repeats)]
    res = SuiteResult(meta={"C_max": C_max, "N_total": spec.N_total, "parallel_jobs": spec.parallel_jobs})
    if spec.parallel_jobs > 1:
        res.meta["timing_contaminated"] = True
        with ThreadPoolExecutor(spec.parallel_jobs) as ex:
            for rows in ex.map(lambda j: _scaling_job(spec, X, testset, *j), jobs):
                res.rows.extend(rows)
    else:
        for C, r in jobs:
            res.rows.extend(_scaling_job(spec, X, testset, C, r))
    for algo in spec.algos:
        pts = [(row["C"], row["joints_per_point"]) for row in res.rows if row["algo"] == algo]
        if len({c for c, _ in pts}) >= 2:
            res.exponents[algo] = fit_power_law(*zip(*pts))[0]
    return res


def run_quality_suite(
    train_set,
    test_set,
    C,
    H,
    grid=((3, 5), (3, 15), (3, 30), (5, 5), (5, 15), (5, 30), (7, 5), (7, 15), (7, 30)),
    algos=("emmfa", "vmfa", "kmeansfa"),
    seed=0,
    epsilon=1e-4,
    max_iters=1000,
    distance_mode="kl",
) -> SuiteResult:
    """Every algorithm starts from the same seeded means; em-MFA is the reference."""
    X = _data(train_set)
    base = TrainConfig(C=C, H=H, seed=seed, epsilon=epsilon, max_iters=max_iters, strict=False, distance_mode=distance_mode)
    res = SuiteResult()
    em_nll = em_ms = None
    if "emmfa" in algos or "emmfa-matched" in algos:
        cfg = replace(base, algo="emmfa")
        _, rep = train_emmfa(cfg, X, test_set)
        em_nll, em_ms = rep.nll_test, rep.wall_ms
        res.rows.append(_row(C, "emmfa", cfg, 0, X.shape[0], rep, rel_nll=0.0, speedup=1.0))
    if "vmfa" in algos:
        for cp, g in grid:
            if cp > C or g > C:
                continue
            cfg = replace(base, algo="vmfa", Cprime=cp, G=g)
            _, _, rep = train_vmfa(cfg, X, test_set)
            res.rows.append(
                _row(C, "vmfa", cfg, 0, X.shape[0], rep,
                     rel_nll=None if em_nll is None else relative_nll(rep.nll_test, em_nll),
                     speedup=None if em_ms is None else em_ms / rep.wall_ms)
            )
            if "emmfa-matched" in algos:
                mcfg = replace(base, algo="emmfa-matched")
                try:
                    _, mrep = train_emmfa_matched(mcfg, X, test_set, rep.nll_test)
                except TargetUnreachable as exc:
                    mrep = exc.result[1]
                res.rows.append(
                    _row(C, "emmfa-matched", cfg, 0, X.shape[0], mrep,
                         cprime=cp, gsize=g, rel_nll=relative_nll(mrep.nll_test, em_nll),
                         speedup=None if em_ms is None else em_ms / mrep.wall_ms)
                )
    if "kmeansfa" in algos:
        _, seeds, _ = initialize(replace(base, algo="emmfa"), X)
        params, km = train_kmeans_fa(X, C, H, seeds, rng=stream(seed, 11))
        nll = -exact_log_likelihood(params, test_set, counter=None) / _data(test_set).shape[0]
        res.rows.append(
            {**_row(C, "kmeansfa", base, 0, X.shape[0], None), "iterations": km.n_iter, "nll_test": nll,
             "rel_nll": None if em_nll is None else relative_nll(nll, em_nll)}
        )
    return res
