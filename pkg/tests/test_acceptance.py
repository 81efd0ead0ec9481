"""Acceptance criteria at their stated sizes and tolerances.

Each test records one PASS/FAIL line that is printed in the terminal
summary, then asserts.  The full module takes the better part of an hour
on one core.
"""

import json
import time

import pytest

from conftest import ACCEPTANCE
from lfpp import verify
from lfpp.cli import main
from lfpp.exponent import RecordStore

FULL = verify.FULL
SEED = FULL["seed"]


def _summary(measured: dict) -> str:
    text = json.dumps(measured, sort_keys=True, default=verify._json_default)
    return text if len(text) <= 240 else text[:237] + "..."


def record(result: verify.CheckResult, summary: str | None = None) -> verify.CheckResult:
    status = "PASS" if result.passed else "FAIL"
    detail = summary if summary is not None else _summary(result.measured)
    ACCEPTANCE[result.criterion] = (
        f"criterion {result.criterion:>2} {status}  {result.name} [{result.tolerance}] "
        f"({result.seconds:.1f} s): {detail}"
    )
    return result


def check(result: verify.CheckResult, summary: str | None = None) -> None:
    record(result, summary)
    assert result.passed, json.dumps(result.measured, sort_keys=True, default=verify._json_default)


@pytest.fixture(scope="module")
def exponent_run(tmp_path_factory):
    store = RecordStore(tmp_path_factory.mktemp("acceptance") / "records.csv", record_timings=False)
    run = verify.run_exponent_plans(verify.make_plans(FULL, SEED), store=store)
    assert not run.errors, run.errors
    return run


def test_criterion_01_variance_slope():
    r = verify.check_variance_slope(seed=SEED, **FULL["variance"])
    check(r, f"slopes {r.measured['slopes']}, within limit {r.measured['within_runtime_limit']}")


def test_criterion_02_covariance_slope():
    r = verify.check_covariance_slope(seed=SEED, **FULL["covariance"])
    check(r)


def test_criterion_03_restriction():
    check(verify.check_restriction(seed=SEED, **FULL["restriction"]))


def test_criterion_04_metric_oracle():
    check(verify.check_metric_oracle(seed=SEED, **FULL["oracle"]))


def test_criterion_05_xi_zero():
    check(verify.check_xi_zero(**FULL["xi_zero"]))


def test_criterion_06_known_value(exponent_run):
    r = verify.check_known_value(exponent_run, limit=FULL["exponent"]["known_limit"])
    m = r.measured
    check(r, f"lambda_hat = {m['lambda_hat']:.4f} +- {m['stderr']:.4f}, d=2 runs {exponent_run.seconds[2]:.0f} s")


def test_criterion_07_bound_bracket(exponent_run):
    ecfg = FULL["exponent"]
    r = verify.check_bound_bracket(exponent_run, ecfg["bracket_cells"], limit=ecfg["limit"])
    cells = ", ".join(f"({c['d']},{c['xi']:.3g}):{c['lambda_hat']:.3f}" for c in r.measured["cells"])
    check(r, f"{cells}; runs {sum(exponent_run.seconds.values()):.0f} s")


def test_criterion_08_dimension_monotonicity(exponent_run):
    r = verify.check_dimension_monotonicity(exponent_run, FULL["exponent"]["monotone_xis"])
    rows = ", ".join(f"xi={x['xi']:.3g}: {x['lambda_d']:.3f} -> {x['lambda_d_plus']:.3f}" for x in r.measured["rows"])
    check(r, rows)


def test_criterion_09_thick_points():
    r = verify.check_thick_points(seed=SEED, **FULL["thick"])
    fits = ", ".join(f"d={d}: {v['fitted']:.3f} vs {v['expected']:.2f}" for d, v in r.measured.items() if isinstance(v, dict))
    check(r, fits)


def test_criterion_10_bound_algebra():
    check(verify.check_bound_algebra())


def test_criterion_11_dgamma_solver():
    check(verify.check_dgamma_solver())


def test_criterion_12_differential_audit(exponent_run):
    r = verify.check_differential_audit(exponent_run, 2, FULL["exponent"]["audit_xis"])
    rows = ", ".join(f"xi={x['xi']:.2f}: {x['lower_status']}/{x['upper_status']}" for x in r.measured["rows"])
    check(r, f"{rows}; lipschitz {r.measured['lipschitz']['holds']}; controls {r.measured['negative_controls_flagged']}")


def _data_files(folder):
    return {p.relative_to(folder).as_posix(): p.read_bytes() for p in sorted(folder.rglob("*")) if p.is_file() and p.name != "run.log"}


def test_criterion_13_reproducibility(tmp_path):
    times, files, codes = [], [], []
    for name in ("a", "b"):
        out = tmp_path / name
        t0 = time.perf_counter()
        codes.append(main(["verify", "--quick", "--seed", "0", "--out", str(out)]))
        times.append(time.perf_counter() - t0)
        files.append(_data_files(out))
    identical = files[0] == files[1] and len(files[0]) > 0
    fast = max(times) < 60
    differing = sorted(k for k in set(files[0]) | set(files[1]) if files[0].get(k) != files[1].get(k))
    result = verify.CheckResult(
        13,
        "quick-suite reproducibility",
        identical and fast,
        {"identical": identical, "differing": differing, "runtimes": times, "exit_codes": codes, "files": sorted(files[0])},
        "byte-identical data files; quick suite < 60 s",
        sum(times),
    )
    check(result, f"identical={identical}, runtimes {times[0]:.1f} s / {times[1]:.1f} s, files {len(files[0])}, exit {codes}")
