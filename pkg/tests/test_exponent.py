import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lfpp.errors import (
    ChecksumMismatchError,
    GridSpacingError,
    IncompatibleEstimatesError,
    UnderdeterminedFitError,
)
from lfpp.exponent import (
    ExperimentPlan,
    ExponentEstimate,
    RecordStore,
    ResultRecord,
    check_bracket,
    check_differential_inequalities,
    check_lipschitz,
    check_monotone_in_dimension,
    check_monotone_in_xi,
    count_low_sites,
    estimate_all,
    estimate_derivative,
    estimate_lambda,
    fit_quantile_slope,
    partition_jobs,
    run_cell,
    run_plan,
    run_replicate,
    thick_point_scan,
)
from lfpp.exponent import DerivativeEstimate

LN2 = math.log(2)


def est(xi, lam, se=0.0, d=2, boot=None, key=""):
    return ExponentEstimate(d, xi, lam, se, [], 1.0, [], bootstrap_key=key, boot_slopes=boot)


def synthetic_records(lam, sigma, ks, reps, seed=0, xi=0.5, d=2):
    """log D = log(1 + eps) + lam log eps + N(0, sigma^2)."""
    rng = np.random.default_rng(seed)
    out = []
    for k in ks:
        eps = 2.0**-k
        for s in range(reps):
            out.append(ResultRecord(d, xi, k, s, math.log1p(eps) + lam * math.log(eps) + sigma * rng.standard_normal()))
    return out


# ---------------------------------------------------------------------------
# Plans and cells


def test_plan_validation():
    with pytest.raises(ValueError):
        ExperimentPlan(2, [0.1], 1, 4, 5)
    with pytest.raises(ValueError):
        ExperimentPlan(2, [0.1], 5, 4, 5)
    with pytest.raises(ValueError):
        ExperimentPlan(2, [0.2, 0.1], 2, 4, 5)
    with pytest.raises(ValueError):
        ExperimentPlan(2, [0.1], 2, 4, 1)
    with pytest.raises(ValueError):
        ExperimentPlan(2, [0.1], 2, 4, 5, quantile=1.0)
    plan = ExperimentPlan(2, [0, 0.5], 3, 5, 4)
    assert plan.ks == [3, 4, 5]
    assert len(plan.jobs()) == 12
    assert len(set(plan.replicate_seeds())) == 4


def test_run_cell_xi_zero_exact():
    for k in (2, 4, 6):
        rec = run_cell(2, 0.0, k, seed=3)
        assert rec.log_distance == pytest.approx(math.log1p(2.0**-k), abs=1e-12)


def test_run_cell_deterministic():
    a = run_cell(2, 0.4, 5, seed=11)
    b = run_cell(2, 0.4, 5, seed=11)
    assert a.key == b.key and a.log_distance == b.log_distance
    assert run_cell(2, 0.4, 5, seed=12).log_distance != a.log_distance


def test_crossing_envelope_at_branch_point():
    k = 8
    vals = [run_cell(2, 1 / math.sqrt(6), k, seed=s).log_distance / (-k * LN2) for s in range(9)]
    assert 0.0 <= float(np.median(vals)) <= 0.5


def test_partition_is_complete():
    jobs = [(k, s) for k in range(3, 7) for s in range(10)]
    parts = partition_jobs(jobs, 3, 2)
    assert sorted(j for p in parts for j in p) == sorted(jobs)


# ---------------------------------------------------------------------------
# Fitting


def test_synthetic_quarter_slope():
    plan = ExperimentPlan(2, [0.5], 4, 9, 20, master_seed=0)
    for seed in range(5):
        e = estimate_lambda(plan, 0.5, synthetic_records(0.25, 0.05, plan.ks, 20, seed=seed))
        assert abs(e.lambda_hat - 0.25) <= 0.02
        assert 0 < e.stderr < 0.02


def test_xi_zero_plan_gives_zero():
    plan = ExperimentPlan(2, [0.0], 3, 6, 3)
    records, errors = run_plan(plan)
    assert not errors
    e = estimate_lambda(plan, 0.0, records)
    assert abs(e.lambda_hat) <= 1e-6


def test_underdetermined():
    with pytest.raises(UnderdeterminedFitError):
        estimate_lambda(ExperimentPlan(2, [0.5], 4, 5, 5), 0.5, [])
    plan = ExperimentPlan(2, [0.5], 4, 8, 5)
    recs = [r for r in synthetic_records(0.2, 0.1, plan.ks, 5) if r.k <= 5]
    with pytest.raises(UnderdeterminedFitError):
        estimate_lambda(plan, 0.5, recs)
    with pytest.raises(UnderdeterminedFitError):
        fit_quantile_slope([-1.0, -2.0], [np.ones(3), np.ones(3)])


@given(st.floats(-1.0, 1.0), st.floats(-2.0, 2.0))
def test_fit_exact_on_noise_free_lines(slope, intercept):
    x = -np.arange(3, 8) * LN2
    samples = [np.full(4, intercept + slope * v) for v in x]
    fit = fit_quantile_slope(x, samples, n_boot=20)
    assert fit["slope"] == pytest.approx(slope, abs=1e-9)
    assert fit["stderr"] <= 1e-12


def test_estimate_independent_of_record_order():
    plan = ExperimentPlan(2, [0.5], 4, 8, 10)
    recs = synthetic_records(0.3, 0.1, plan.ks, 10)
    a = estimate_lambda(plan, 0.5, recs)
    b = estimate_lambda(plan, 0.5, recs[::-1])
    assert a.as_dict() == b.as_dict()


def test_quantile_robustness():
    out = {}
    for p in (0.25, 0.5, 0.75):
        plan = ExperimentPlan(2, [0.4], 3, 7, 12, master_seed=5, quantile=p)
        if p == 0.25:
            records, _ = run_plan(plan)
        out[p] = estimate_lambda(plan, 0.4, records)
    for p, q in [(0.25, 0.5), (0.5, 0.75), (0.25, 0.75)]:
        a, b = out[p], out[q]
        assert abs(a.lambda_hat - b.lambda_hat) <= 3 * math.hypot(a.stderr, b.stderr)


# ---------------------------------------------------------------------------
# Derivatives


def test_derivative_constant_and_linear():
    xs = [0.1, 0.15, 0.2, 0.25]
    ders = estimate_derivative([est(x, 0.3) for x in xs])
    assert [d.lambda_prime_hat for d in ders] == [0.0, 0.0]
    ders = estimate_derivative([est(x, 1.7 * x) for x in xs])
    for d in ders:
        assert abs(d.lambda_prime_hat - 1.7) <= 1e-12
    assert [d.xi for d in ders] == [0.15, 0.2]


def test_derivative_errors():
    with pytest.raises(GridSpacingError):
        estimate_derivative([est(x, 0.0) for x in (0.1, 0.2, 0.4)])
    with pytest.raises(GridSpacingError):
        estimate_derivative([est(x, 0.0) for x in (0.1, 0.2)])


def test_derivative_stderr_scales_inverse_with_spacing():
    wide = estimate_derivative([est(x, 0.0, se=0.01) for x in (0.1, 0.2, 0.3)])[0]
    narrow = estimate_derivative([est(x, 0.0, se=0.01) for x in (0.1, 0.15, 0.2)])[0]
    assert wide.stderr == pytest.approx(math.sqrt(2) * 0.01 / 0.2)
    assert narrow.stderr == pytest.approx(2 * wide.stderr)
    assert not wide.paired


def test_paired_bootstrap_cancels_common_noise():
    rng = np.random.default_rng(0)
    common = rng.normal(0, 0.05, 200)
    ests = [est(x, 0.2 + x, se=0.05, boot=0.2 + x + common, key="k") for x in (0.1, 0.2, 0.3)]
    der = estimate_derivative(ests)[0]
    assert der.paired
    assert der.stderr < 1e-12


# ---------------------------------------------------------------------------
# Inequality checks


def test_differential_bounds_at_branch_point():
    xi = 1 / math.sqrt(6)
    rep = check_differential_inequalities(est(xi, 1 / 6), DerivativeEstimate(xi, 0.5, 0.05, 0.0), 2)
    assert rep["lower_bound"] == pytest.approx(-0.408, abs=1e-3)
    assert rep["lower_branch"] == "-xi"
    assert rep["upper_bound"] == pytest.approx(math.sqrt(2.5) - xi, abs=1e-12)
    assert rep["upper_bound"] == pytest.approx(1.173, abs=1e-3)
    assert rep["holds"]


def test_lower_bound_tight():
    xi = 0.3
    rep = check_differential_inequalities(est(xi, 0.2), DerivativeEstimate(xi, -xi, 0.05, 0.0), 2)
    assert rep["lower_margin"] == 0.0
    assert rep["lower_status"] == "pass"


@pytest.mark.parametrize("d", [2, 3, 4, 5])
def test_upper_bound_linear_lambda(d):
    c = math.sqrt(2 * d - 2)
    for xi in np.linspace(0.01, 1 / c, 7):
        rep = check_differential_inequalities(est(xi, c * xi, d=d), DerivativeEstimate(xi, c, 0.05, 0.0), d)
        assert abs(rep["upper_margin"]) <= 1e-12


def test_xi_zero_excludes_branch():
    rep = check_differential_inequalities(est(0.0, 0.0), DerivativeEstimate(0.0, 0.5, 0.05, 0.0), 2)
    assert rep["lower_branch"] == "-xi" and rep["notes"]


def test_status_levels():
    xi = 0.3
    for lp, status in [(-xi - 0.25, "fail"), (-xi - 0.5, "contradiction"), (-xi - 0.05, "pass")]:
        rep = check_differential_inequalities(est(xi, 0.2), DerivativeEstimate(xi, lp, 0.05, 0.1), 2)
        assert rep["lower_status"] == status
    with pytest.raises(IncompatibleEstimatesError):
        check_differential_inequalities(est(0.3, 0.2), DerivativeEstimate(0.35, 0.0, 0.05, 0.0), 2)


def test_lipschitz():
    xs = [0.1, 0.15, 0.2]
    rep = check_lipschitz([est(x, 0.2, d=3) for x in xs], 3)
    assert rep["lipschitz_constant"] == pytest.approx(2.449, abs=1e-3)
    assert rep["holds"]
    jumped = [est(0.1, 0.0), est(0.15, 10 * 0.05 * math.sqrt(4)), est(0.2, 1.0)]
    assert not check_lipschitz(jumped, 2)["holds"]


def test_monotone_in_dimension():
    rep = check_monotone_in_dimension(est(0.0, 0.0, d=2), est(0.0, 0.0, d=3))
    assert rep["holds"] and rep["margin"] == 0.0
    rep = check_monotone_in_dimension(est(0.4, 0.3, 0.01, d=2), est(0.4, 0.1, 0.01, d=3))
    assert not rep["holds"] and rep["status"] == "contradiction"
    with pytest.raises(IncompatibleEstimatesError):
        check_monotone_in_dimension(est(0.4, 0.3, d=2), est(0.5, 0.3, d=3))
    with pytest.raises(IncompatibleEstimatesError):
        check_monotone_in_dimension(est(0.4, 0.3, d=3), est(0.4, 0.3, d=2))


def test_monotone_in_xi_and_bracket():
    assert check_monotone_in_xi([est(0.1, 0.0), est(0.2, 0.1)])["holds"]
    assert not check_monotone_in_xi([est(0.1, 0.3), est(0.2, 0.1)])["holds"]
    assert check_bracket(est(1 / math.sqrt(6), 0.2))["holds"]
    assert not check_bracket(est(1 / math.sqrt(6), 0.5))["holds"]


# ---------------------------------------------------------------------------
# Store and orchestration


def test_store_roundtrip_and_dedup(tmp_path):
    store = RecordStore(tmp_path / "r.csv")
    recs = [ResultRecord(2, 0.1 * i, 4, i, -0.123456789 * i, 0.5) for i in range(4)]
    store.append(recs)
    store.append(recs[:2])
    assert store.read() == recs
    assert store.path.read_text().splitlines()[0] == "d,xi,k,seed,log_distance,wall_seconds"
    untimed = RecordStore(tmp_path / "u.csv", record_timings=False)
    untimed.append(recs)
    assert all(r.wall_seconds == 0.0 for r in untimed.read())


def test_store_checksum(tmp_path):
    store = RecordStore(tmp_path / "r.csv")
    store.append([ResultRecord(2, 0.1, 4, 1, -1.0)])
    store.verify()
    with open(store.path, "a") as fh:
        fh.write("2,0.1,4,2,-5.0,0.0\n")
    with pytest.raises(ChecksumMismatchError):
        store.verify()
    with pytest.raises(ChecksumMismatchError):
        store.append([ResultRecord(2, 0.1, 4, 3, -1.0)])


def test_resume_without_duplicates(tmp_path):
    plan = ExperimentPlan(2, [0.0, 0.5], 3, 5, 3, master_seed=2)
    store = RecordStore(tmp_path / "r.csv")
    half = ExperimentPlan(2, [0.0, 0.5], 3, 4, 3, master_seed=2)
    run_plan(half, store)
    n_half = len(store.read())
    records, _ = run_plan(plan, store)
    assert n_half == 12 and len(store.read()) == 18
    rows_before = store.path.read_text()
    again, _ = run_plan(plan, store)
    assert store.path.read_text() == rows_before
    assert [r.key for r in again] == [r.key for r in records]
    fresh, _ = run_plan(plan)
    assert [r.log_distance for r in fresh] == [r.log_distance for r in records]


def test_workers_match_serial(tmp_path):
    plan = ExperimentPlan(2, [0.25, 0.5], 3, 5, 3, master_seed=4)
    serial, _ = run_plan(plan)
    parallel, errors = run_plan(plan, RecordStore(tmp_path / "r.csv"), workers=2)
    assert not errors
    assert [(r.key, r.log_distance) for r in serial] == [(r.key, r.log_distance) for r in parallel]


def test_reanalysis_byte_identical(tmp_path):
    plan = ExperimentPlan(2, [0.2, 0.3, 0.4], 3, 5, 4, master_seed=1)
    store = RecordStore(tmp_path / "r.csv")
    run_plan(plan, store)

    def report():
        ests = estimate_all(plan, store.read())
        ders = estimate_derivative(ests)
        body = {
            "estimates": [e.as_dict() for e in ests],
            "derivatives": [check_differential_inequalities(e, d, 2) for e, d in zip(ests[1:-1], ders)],
        }
        return json.dumps(body, sort_keys=True)

    assert report() == report()


def test_xi_grid_shares_one_field_per_replicate():
    recs = run_replicate(2, [0.2, 0.6], 4, seed=9)
    assert [r.log_distance for r in recs] == [run_cell(2, x, 4, seed=9).log_distance for x in (0.2, 0.6)]


# ---------------------------------------------------------------------------
# Thick points


def test_count_low_sites():
    v = np.array([-3.0, -1.0, 0.0, 2.0])
    assert count_low_sites(v, 1.0, math.exp(-2)) == 1
    assert count_low_sites(v, 1e-12, 0.5) == 2


def test_thick_points_small_alpha():
    rep = thick_point_scan(2, 1e-3, range(3, 7), 20, seed=0)
    for k, m in zip(rep.ks, rep.mean_counts):
        n = (2**k + 1) ** 2
        assert abs(m / n - 0.5) < 0.1
    assert rep.fitted_exponent == pytest.approx(2.0, abs=0.1)
    assert rep.expected_exponent == pytest.approx(2.0, abs=1e-6)
    assert not rep.low_power


def test_thick_points_low_power():
    rep = thick_point_scan(2, 2.5, range(3, 5), 3, seed=0)
    assert rep.low_power
    assert rep.expected_exponent < 0
    with pytest.raises(ValueError):
        thick_point_scan(2, 0.0, range(3, 5), 3, seed=0)
