import numpy as np
import pytest

from vmfa.bench import ScalingSuiteSpec, fit_power_law, relative_nll, run_quality_suite, run_scaling_suite
from vmfa.data import SyntheticSpec, gen_synthetic_split


def test_two_point_fit():
    a, b = fit_power_law([100, 800], [10, 20])
    assert a == pytest.approx(1 / 3, abs=1e-12)
    assert b * 100**a == pytest.approx(10)


def test_fit_needs_two_distinct_C():
    with pytest.raises(ValueError):
        fit_power_law([10, 10], [1, 2])


def test_relative_nll_fixed_point():
    assert relative_nll(12.5, 12.5) == 0.0
    assert relative_nll(10.1, 10.0) == pytest.approx(0.01)


@pytest.mark.parametrize(
    "kw", [{"C_list": (40, 20)}, {"C_list": (20, 20)}, {"repeats": 0}, {"N_total": 100}]
)
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        ScalingSuiteSpec(**kw).validate()


@pytest.fixture(scope="module")
def split():
    tr, te, _ = gen_synthetic_split(SyntheticSpec(16, 6, 2, 1600, seed=1), 400)
    return tr, te


def test_scaling_suite_counts(split):
    tr, te = split
    spec = ScalingSuiteSpec(C_list=(4, 8, 16), N_total=1600, repeats=2, H=2, G=4, algos=("vmfa", "emmfa", "emmfa-matched"))
    res = run_scaling_suite(spec, tr, te)
    for row in res.rows:
        assert row["n_points"] == 100 * row["C"]
        if row["algo"] in ("emmfa", "emmfa-matched"):
            assert row["joints_per_point"] == row["iterations"] * row["C"]
        else:
            estep_bound = 3 * 4 + 1
            assert row["joints_per_point"] <= (row["iterations"] + row["warmup_iterations"]) * estep_bound
    assert set(res.exponents) == {"vmfa", "emmfa", "emmfa-matched"}
    assert res.exponents["vmfa"] < res.exponents["emmfa"]
    assert abs(res.exponents["emmfa"] - 1.0) <= 0.5
    csv = res.to_csv().splitlines()
    assert len(csv) == 1 + 3 * 3 * 2


def test_scaling_suite_parallel_matches_sequential(split):
    tr, _ = split
    spec = ScalingSuiteSpec(C_list=(4, 8), N_total=800, repeats=1, H=2, G=4)
    seq = run_scaling_suite(spec, tr)
    par = run_scaling_suite(ScalingSuiteSpec(**{**spec.__dict__, "parallel_jobs": 2}), tr)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
    assert strip(seq.rows) == strip(par.rows)
    assert par.meta["timing_contaminated"]


def test_quality_suite(split):
    tr, te = split
    res = run_quality_suite(tr, te, 8, 2, grid=((3, 5), (9, 5)), algos=("emmfa", "vmfa", "emmfa-matched", "kmeansfa"))
    algos = [r["algo"] for r in res.rows]
    assert algos == ["emmfa", "vmfa", "emmfa-matched", "kmeansfa"]
    em = res.rows[0]
    assert em["rel_nll"] == 0.0 and em["speedup"] == 1.0
    vm = res.rows[1]
    assert vm["rel_nll"] == pytest.approx(relative_nll(vm["nll_test"], em["nll_test"]))
    assert np.isfinite(res.rows[3]["nll_test"])
