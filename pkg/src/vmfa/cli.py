"""Command-line entry point.

    vmfa synth --components 5 --dim 8 --latent 2 --n 5000 --out data.mfad
    vmfa train --algo vmfa --data data.mfad --components 5 --latent-dim 2 --out-model m.mfam
    vmfa eval --model m.mfam --data test.mfad
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from threadpoolctl import threadpool_limits

from . import __version__
from .baselines import train_kmeans_fa
from .bench import ScalingSuiteSpec, run_quality_suite, run_scaling_suite
from .data import (
    SyntheticSpec,
    gen_synthetic_split,
    load_checkpoint,
    load_csv,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from .errors import MaxIterExceeded, VmfaError
from .model import exact_log_likelihood
from .seeding import afkmc2_seed, random_points_seed
from .trainer import STREAM_SEEDS, TrainConfig, initialize, stream, train


class UsageError(Exception):
    pass


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {s}")
    return v


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a value > 0, got {s}")
    return v


def _model_args(p, required=True):
    p.add_argument("--data", required=required, help="training data (MFAD file)")
    p.add_argument("--components", "-C", type=_positive_int, required=required)
    p.add_argument("--latent-dim", "-H", type=_positive_int, default=2)
    p.add_argument("--cprime", type=_positive_int, default=3)
    p.add_argument("--gsize", type=_positive_int, default=15)
    p.add_argument("--epsilon", type=_positive_float, default=1e-4)
    p.add_argument("--warmup-epsilon", type=_positive_float, default=1e-4)
    p.add_argument("--max-iters", type=_positive_int, default=1000)
    p.add_argument("--init", choices=("afkmc2", "random"), default="afkmc2")
    p.add_argument("--chain-length", type=_positive_int, default=10)
    p.add_argument("--lambda-scale", type=float, default=1.0)
    p.add_argument("--distance", choices=("kl", "euclid"), default="kl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--threads", type=_positive_int, default=None)
    p.add_argument("--literal-eq14", action="store_true", help="signed relative-change stopping rule")
    p.add_argument("--eval-nll-every", type=int, default=0)


def build_parser():
    ap = argparse.ArgumentParser(prog="vmfa", description="Mixtures of factor analyzers by truncated variational EM.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model")
    _model_args(p)
    p.add_argument("--algo", choices=("vmfa", "emmfa", "emmfa-matched", "kmeansfa"), default="vmfa")
    p.add_argument("--test-data")
    p.add_argument("--target-nll", type=float, help="quality target for emmfa-matched")
    p.add_argument("--out-model")
    p.add_argument("--metrics", help="JSON-lines output path ('-' for standard output)")

    p = sub.add_parser("eval", help="per-point negative log-likelihood of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("seed", help="print seed row indices")
    p.add_argument("--data", required=True)
    p.add_argument("--components", "-C", type=_positive_int, required=True)
    p.add_argument("--init", choices=("afkmc2", "random"), default="afkmc2")
    p.add_argument("--chain-length", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="sample a synthetic MFA dataset")
    p.add_argument("--components", "-C", type=_positive_int, required=True)
    p.add_argument("--dim", type=_positive_int, required=True)
    p.add_argument("--latent", type=_positive_int, required=True)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--loading-scale", type=float, default=1.0)
    p.add_argument("--noise-scale", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="synth.mfad")
    p.add_argument("--out-test")
    p.add_argument("--out-truth")

    p = sub.add_parser("bench-scaling", help="joint evaluations per point across a ladder of C")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data")
    p.add_argument("--components-list", default="20,40,80,160")
    p.add_argument("--n-total", type=_positive_int)
    p.add_argument("--repeats", type=_positive_int, default=5)
    p.add_argument("--latent-dim", "-H", type=_positive_int, default=3)
    p.add_argument("--cprime", type=_positive_int, default=3)
    p.add_argument("--gsize", type=_positive_int, default=15)
    p.add_argument("--epsilon", type=_positive_float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--matched", action="store_true", help="also run the quality-matched exact EM")
    p.add_argument("--parallel-jobs", type=_positive_int, default=1)
    p.add_argument("--threads", type=_positive_int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", help="CSV output path (default: standard output)")

    p = sub.add_parser("bench-quality", help="relative test NLL over a (C', G) grid")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--components", "-C", type=_positive_int, required=True)
    p.add_argument("--latent-dim", "-H", type=_positive_int, default=2)
    p.add_argument("--cprime-list", default="3,5,7")
    p.add_argument("--gsize-list", default="5,15,30")
    p.add_argument("--algos", default="emmfa,vmfa,kmeansfa")
    p.add_argument("--epsilon", type=_positive_float, default=1e-4)
    p.add_argument("--distance", choices=("kl", "euclid"), default="kl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive_int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--out", help="CSV output path (default: standard output)")

    p = sub.add_parser("convert-csv", help="convert a small CSV matrix to MFAD")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--delimiter", default=",")
    return ap


def _ints(s):
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad integer list {s!r}") from exc


def _write_text(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _config_from_args(a, D):
    cfg = TrainConfig(
        algo="emmfa" if a.algo == "kmeansfa" else a.algo,
        C=a.components, H=a.latent_dim, Cprime=a.cprime, G=a.gsize, epsilon=a.epsilon,
        warmup_epsilon=a.warmup_epsilon, max_iters=a.max_iters, distance_mode=a.distance,
        deterministic=a.deterministic, seed=a.seed, eval_nll_every=a.eval_nll_every, init=a.init,
        chain_length=a.chain_length, lambda_scale=a.lambda_scale, literal_eq14=a.literal_eq14,
        strict=False, threads=a.threads,
    )
    try:
        cfg.validate(D)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def cmd_train(a):
    data = load_dataset(a.data, "train")
    test = load_dataset(a.test_data, "test") if a.test_data else None
    cfg = _config_from_args(a, data.D)
    if a.algo == "kmeansfa":
        _, seeds, _ = initialize(cfg, data)
        params, km = train_kmeans_fa(data, cfg.C, cfg.H, seeds, rng=stream(cfg.seed, 11))
        summary = {
            "type": "summary", "algo": "kmeansfa", "iterations": km.n_iter, "inertia": km.inertia,
            "nll_train": -exact_log_likelihood(params, data, counter=None) / data.N,
            "nll_test": None if test is None else -exact_log_likelihood(params, test, counter=None) / test.N,
        }
        lines = [json.dumps(summary, sort_keys=True)]
    else:
        if a.algo == "emmfa-matched" and (a.target_nll is None or test is None):
            raise UsageError("emmfa-matched needs --target-nll and --test-data")
        params, state, report = train(cfg, data, test, a.target_nll)
        lines = report.jsonl_lines()
        if not report.converged:
            print(f"warning: stopped after {report.iterations} iterations without converging", file=sys.stderr)
    if a.metrics:
        _write_text(a.metrics, "".join(line + "\n" for line in lines))
    if a.out_model:
        save_checkpoint(params, a.out_model)
    return 0


def cmd_eval(a):
    params = load_checkpoint(a.model)
    data = load_dataset(a.data)
    if data.D != params.D:
        raise VmfaError(f"data dimension {data.D} does not match model dimension {params.D}")
    ll = exact_log_likelihood(params, data, counter=None)
    print(json.dumps({"n": data.N, "log_likelihood": ll, "nll": -ll / data.N}))
    return 0


def cmd_seed(a):
    data = load_dataset(a.data)
    rng = stream(a.seed, STREAM_SEEDS)
    if a.init == "afkmc2":
        seeds = afkmc2_seed(data, a.components, a.chain_length, rng)
    else:
        seeds = random_points_seed(data, a.components, rng)
    print(" ".join(str(int(s)) for s in seeds))
    return 0


def cmd_synth(a):
    spec = SyntheticSpec(a.components, a.dim, a.latent, a.n, a.separation, a.loading_scale, a.noise_scale, a.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    train_set, test_set, truth = gen_synthetic_split(spec, max(a.n_test, 0))
    save_dataset(train_set, a.out)
    if a.n_test > 0:
        save_dataset(test_set, a.out_test or os.path.splitext(a.out)[0] + "-test.mfad")
    if a.out_truth:
        save_checkpoint(truth, a.out_truth)
    return 0


def cmd_bench_scaling(a):
    data = load_dataset(a.data)
    test = load_dataset(a.test_data) if a.test_data else None
    C_list = _ints(a.components_list)
    algos = ("vmfa", "emmfa", "emmfa-matched") if a.matched else ("vmfa", "emmfa")
    spec = ScalingSuiteSpec(
        C_list=C_list, N_total=a.n_total or data.N, repeats=a.repeats, H=a.latent_dim, Cprime=a.cprime,
        G=a.gsize, epsilon=a.epsilon, seed=a.seed, algos=algos, parallel_jobs=a.parallel_jobs,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    res = run_scaling_suite(spec, data, test)
    _write_text(a.out, res.to_csv())
    meta = dict(res.meta, exponents=res.exponents, threads=a.threads, deterministic=a.deterministic)
    print(json.dumps(meta, sort_keys=True), file=sys.stderr)
    return 0


def cmd_bench_quality(a):
    data = load_dataset(a.data)
    test = load_dataset(a.test_data)
    grid = [(cp, g) for cp in _ints(a.cprime_list) for g in _ints(a.gsize_list)]
    algos = tuple(s.strip() for s in a.algos.split(",") if s.strip())
    bad = set(algos) - {"emmfa", "emmfa-matched", "vmfa", "kmeansfa"}
    if bad:
        raise UsageError(f"unknown algorithms: {sorted(bad)}")
    res = run_quality_suite(data, test, a.components, a.latent_dim, grid, algos, a.seed, a.epsilon, distance_mode=a.distance)
    _write_text(a.out, res.to_csv())
    print(json.dumps({"threads": a.threads, "deterministic": a.deterministic}), file=sys.stderr)
    return 0


def cmd_convert_csv(a):
    save_dataset(load_csv(a.input, delimiter=a.delimiter), a.output)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "seed": cmd_seed,
    "synth": cmd_synth,
    "bench-scaling": cmd_bench_scaling,
    "bench-quality": cmd_bench_quality,
    "convert-csv": cmd_convert_csv,
}


def main(argv=None):
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    threads = getattr(a, "threads", None)
    if threads is None and getattr(a, "deterministic", False):
        threads = 1  # a fixed BLAS thread count keeps reductions bit-reproducible
    try:
        if threads is None:
            return COMMANDS[a.command](a)
        with threadpool_limits(limits=threads):
            return COMMANDS[a.command](a)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"vmfa: error: {exc}", file=sys.stderr)
        return 2
    except (VmfaError, OSError, ValueError, ArithmeticError, MaxIterExceeded) as exc:
        print(f"vmfa: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
