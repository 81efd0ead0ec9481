"""Validation checks shared by ``lfpp verify`` and the acceptance tests.

Every check returns a :class:`CheckResult`.  The same functions run in a
quick configuration (small k, few replicates) and in the full one; only the
parameters in :data:`QUICK` and :data:`FULL` differ.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import bounds
from .errors import DisconnectedError, LFPPError
from .exponent import (
    ExperimentPlan,
    RecordStore,
    check_bracket,
    check_differential_inequalities,
    check_lipschitz,
    check_monotone_in_dimension,
    estimate_all,
    estimate_derivative,
    run_plan,
    thick_point_scan,
    ExponentEstimate,
    DerivativeEstimate,
)
from .field import LN2, FieldSpec, derive_rng, iter_samples, restrict_to_hyperplane, variance_profile, variance_slope
from .metric import (
    DistanceQuery,
    GridRegion,
    VertexWeights,
    brute_force_distance,
    crossing_distance,
    set_to_set_distance,
)

log = logging.getLogger("lfpp.verify")

XI_KNOWN = 1 / math.sqrt(6)


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    measured: dict
    tolerance: str
    seconds: float = field(default=0.0, compare=False)

    def as_dict(self) -> dict:
        """Report entry; runtimes are left out so reports are reproducible."""
        return {
            "criterion": self.criterion,
            "name": self.name,
            "passed": bool(self.passed),
            "measured": self.measured,
            "tolerance": self.tolerance,
        }


def _timed(fn: Callable[[], tuple[bool, dict]], criterion: int, name: str, tolerance: str, limit: float | None) -> CheckResult:
    t0 = time.perf_counter()
    passed, measured = fn()
    secs = time.perf_counter() - t0
    if limit is not None:
        measured["runtime_limit_seconds"] = limit
        measured["within_runtime_limit"] = secs < limit
        passed = passed and secs < limit
    log.info("criterion %d %s: %.2f s", criterion, name, secs)
    return CheckResult(criterion, name, bool(passed), measured, tolerance, secs)


# ---------------------------------------------------------------------------
# Field


def check_variance_slope(ds=(2, 3), ks=range(3, 9), reps=200, seed=0, lo=0.9, hi=1.1, limit=None) -> CheckResult:
    """``ks`` is a range shared by all dimensions or a {d: range} mapping."""

    def run():
        slopes = {}
        tables = {}
        for d in ds:
            krange = ks[d] if isinstance(ks, dict) else ks
            specs = [FieldSpec(d=d, k=k, master_seed=seed, job_key=f"variance/d{d}/k{k}") for k in krange]
            table = variance_profile(specs, reps)
            tables[str(d)] = [[k, v] for k, v in table]
            slopes[str(d)] = variance_slope(table)
        ok = all(lo <= s <= hi for s in slopes.values())
        return ok, {"slopes": slopes, "variance_by_k": tables}

    return _timed(run, 1, "field variance slope", f"slope in [{lo}, {hi}]", limit)


def offset_covariances(spec: FieldSpec, reps: int, offsets: list[int]) -> np.ndarray:
    """Covariance of h(x), h(x + m e_i), averaged over positions and both axes.

    The per-position covariance is estimated across replicates and then
    averaged over all pairs that fit inside the box.
    """
    if spec.d != 2:
        raise ValueError("offset_covariances is implemented for d = 2")
    n = spec.side
    s1 = np.zeros((n, n))
    prods = {(m, a): 0.0 for m in offsets for a in (0, 1)}
    for sample in iter_samples(spec, reps):
        h = sample.values
        s1 += h
        for m in offsets:
            prods[(m, 0)] = prods[(m, 0)] + h[:-m, :] * h[m:, :]
            prods[(m, 1)] = prods[(m, 1)] + h[:, :-m] * h[:, m:]
    mean = s1 / reps
    out = []
    for m in offsets:
        c0 = (prods[(m, 0)] - reps * mean[:-m, :] * mean[m:, :]) / (reps - 1)
        c1 = (prods[(m, 1)] - reps * mean[:, :-m] * mean[:, m:]) / (reps - 1)
        out.append(0.5 * (c0.mean() + c1.mean()))
    return np.array(out)


def check_covariance_slope(k=8, reps=2000, seed=0, rmin=0.05, rmax=0.3, lo=0.85, hi=1.15, limit=None) -> CheckResult:
    def run():
        spec = FieldSpec(d=2, k=k, master_seed=seed, job_key=f"covariance/k{k}")
        side = 2**k
        offsets = sorted({int(round(r * side)) for r in np.geomspace(rmin, rmax, 8)})
        covs = offset_covariances(spec, reps, offsets)
        dist = np.array(offsets) / side
        slope = float(np.polyfit(-np.log(dist), covs, 1)[0])
        return lo <= slope <= hi, {
            "slope": slope,
            "distances": dist.tolist(),
            "covariances": covs.tolist(),
        }

    return _timed(run, 2, "covariance slope", f"slope in [{lo}, {hi}]", limit)


def increment_variances(samples, offsets: list[int]) -> np.ndarray:
    """Var(h(x) - h(x + m e_i)) averaged over positions, axes and samples."""
    acc = np.zeros(len(offsets))
    count = 0
    for h in samples:
        for i, m in enumerate(offsets):
            acc[i] += 0.5 * (np.mean((h[:-m, :] - h[m:, :]) ** 2) + np.mean((h[:, :-m] - h[:, m:]) ** 2))
        count += 1
    return acc / count


def check_restriction(k=6, reps=500, seed=0, rmin=0.1, rmax=0.4, tol=1.0, limit=None) -> CheckResult:
    def run():
        side = 2**k
        offsets = sorted({int(round(r * side)) for r in np.linspace(rmin, rmax, 7)})
        spec3 = FieldSpec(d=3, k=k, master_seed=seed, job_key=f"restrict/d3/k{k}")
        spec2 = FieldSpec(d=2, k=k, master_seed=seed, job_key=f"restrict/d2/k{k}")
        sliced = increment_variances((restrict_to_hyperplane(s).values for s in iter_samples(spec3, reps)), offsets)
        native = increment_variances((s.values for s in iter_samples(spec2, reps)), offsets)
        diff = np.abs(sliced - native)
        return bool(np.all(diff <= tol)), {
            "distances": (np.array(offsets) / side).tolist(),
            "slice_increment_variance": sliced.tolist(),
            "native_increment_variance": native.tolist(),
            "max_abs_difference": float(diff.max()),
        }

    return _timed(run, 3, "restriction law", f"|difference| <= {tol}", limit)


# ---------------------------------------------------------------------------
# Metric


def random_oracle_instance(rng: np.random.Generator, side: int, d: int = 2):
    """Random weights, region with holes, and source/target sets on a small box."""
    shape = (side,) * d
    w = np.exp(rng.normal(0.0, 1.0, size=shape)) * rng.uniform(0.1, 1.0)
    mask = rng.random(shape) > 0.15
    idx = [tuple(int(c) for c in s) for s in np.argwhere(mask)]
    if len(idx) < 2:
        mask[:] = True
        idx = [tuple(int(c) for c in s) for s in np.argwhere(mask)]
    region = GridRegion(shape, mask)
    n_src = int(rng.integers(1, 4))
    n_tgt = int(rng.integers(1, 4))
    src = [idx[i] for i in rng.choice(len(idx), size=min(n_src, len(idx)), replace=False)]
    tgt = [idx[i] for i in rng.choice(len(idx), size=min(n_tgt, len(idx)), replace=False)]
    return DistanceQuery(region, tuple(src), tuple(tgt)), VertexWeights(w)


def check_metric_oracle(instances=100, sides=(3, 4), seed=0, tol=1e-12, limit=None) -> CheckResult:
    def run():
        rng = derive_rng(seed, "oracle")
        worst = 0.0
        disconnected = 0
        mismatches = 0
        compared = i = 0
        # disconnected draws are checked for agreement but do not count
        while compared < instances:
            query, weights = random_oracle_instance(rng, sides[i % len(sides)])
            i += 1
            try:
                fast, _ = set_to_set_distance(query, weights)
            except DisconnectedError:
                fast = math.inf
            try:
                slow = brute_force_distance(query, weights)
            except DisconnectedError:
                slow = math.inf
            if math.isinf(fast) or math.isinf(slow):
                disconnected += 1
                mismatches += int(fast != slow)
                continue
            compared += 1
            err = abs(fast - slow)
            worst = max(worst, err)
            mismatches += int(err > tol)
        return mismatches == 0, {"instances": instances, "max_abs_error": worst, "disconnected": disconnected, "mismatches": mismatches}

    return _timed(run, 4, "metric oracle equivalence", f"|dijkstra - brute force| <= {tol}", limit)


def check_xi_zero(ds=(2, 3, 4), ks=range(2, 7), tol=1e-12, limit=None) -> CheckResult:
    def run():
        worst = 0.0
        rows = []
        for d in ds:
            for k in ks:
                eps = 2.0**-k
                # xi = 0 makes every weight eps whatever the field
                w = VertexWeights(np.full((2**k + 1,) * d, eps), xi=0.0, eps=eps)
                dist, _ = crossing_distance(w)
                err = abs(dist - (1 + eps))
                worst = max(worst, err)
                rows.append([d, k, dist])
        return worst <= tol, {"max_abs_error": worst, "cells": len(rows)}

    return _timed(run, 5, "xi = 0 crossing distance", f"|D - (1 + eps)| <= {tol}", limit)


# ---------------------------------------------------------------------------
# Exponent runs


@dataclass
class ExponentRun:
    plans: list
    estimates: dict  # (d, xi) -> ExponentEstimate
    errors: list
    seconds: dict = field(default_factory=dict)  # d -> wall time of its plan


def run_exponent_plans(plans: list[ExperimentPlan], store: RecordStore | None = None, workers: int = 1) -> ExponentRun:
    estimates, errors, seconds = {}, [], {}
    for plan in plans:
        t0 = time.perf_counter()
        records, errs = run_plan(plan, store=store, workers=workers)
        errors.extend(errs)
        for est in estimate_all(plan, records):
            estimates[(plan.d, est.xi)] = est
        seconds[plan.d] = seconds.get(plan.d, 0.0) + time.perf_counter() - t0
    return ExponentRun(plans, estimates, errors, seconds)


def _within(measured: dict, run_seconds: float, limit: float | None) -> bool:
    """Gate on the sampling time of the runs a check consumes."""
    if limit is None:
        return True
    measured["run_limit_seconds"] = limit
    measured["within_run_limit"] = run_seconds < limit
    return run_seconds < limit


def _nearest(estimates: dict, d: int, xi: float) -> ExponentEstimate:
    best = min((key for key in estimates if key[0] == d), key=lambda key: abs(key[1] - xi))
    return estimates[best]


def check_known_value(run: ExponentRun, lo=0.08, hi=0.28, limit=None) -> CheckResult:
    def go():
        est = _nearest(run.estimates, 2, XI_KNOWN)
        measured = {"xi": est.xi, "lambda_hat": est.lambda_hat, "stderr": est.stderr, "r2": est.r2}
        in_time = _within(measured, run.seconds.get(2, 0.0), limit)
        return lo <= est.lambda_hat <= hi and in_time, measured

    return _timed(go, 6, "known 2D value", f"lambda_hat(2, 1/sqrt 6) in [{lo}, {hi}]", None)


def check_bound_bracket(run: ExponentRun, cells, allowance=0.1, limit=None) -> CheckResult:
    def go():
        rows = [check_bracket(_nearest(run.estimates, d, xi), allowance) for d, xi in cells]
        measured = {"cells": rows}
        in_time = _within(measured, sum(run.seconds.values()), limit)
        return all(r["holds"] for r in rows) and in_time, measured

    return _timed(go, 7, "bound bracket", f"lambda_hat within bounds +- {allowance}", None)


def check_dimension_monotonicity(run: ExponentRun, xis, limit=None) -> CheckResult:
    def go():
        rows = [check_monotone_in_dimension(_nearest(run.estimates, 2, xi), _nearest(run.estimates, 3, xi)) for xi in xis]
        return all(r["holds"] for r in rows), {"rows": rows}

    return _timed(go, 8, "dimension monotonicity", "lambda_hat(3) >= lambda_hat(2) - 2 combined se", limit)


def _synthetic_estimate(d, xi, lam, se=0.0) -> ExponentEstimate:
    return ExponentEstimate(d=d, xi=xi, lambda_hat=lam, stderr=se, per_scale=[], r2=1.0, residuals=[])


def negative_controls(d: int = 2) -> dict:
    """Synthetic inputs that every audit must flag."""
    xis = [0.3, 0.35, 0.4]
    # Decreasing faster than -xi violates the lower bound.
    steep_down = [_synthetic_estimate(d, x, 0.3 - 2 * (x - 0.35), 0.001) for x in xis]
    # Slope above sqrt(2(d-1) + 2 lambda + xi^2) - xi violates the upper bound.
    steep_up = [_synthetic_estimate(d, x, 10 * x - 3, 0.001) for x in xis]
    # Jump of 10 dxi between neighbours, above the Lipschitz constant for d = 2.
    jump = [_synthetic_estimate(d, x, v, 0.001) for x, v in zip(xis, [0.1, 0.1, 0.1 + 10 * 0.05 * math.sqrt(2 * d)])]
    # Higher dimension clearly below the lower one.
    low = _synthetic_estimate(d, 0.4, 0.2, 0.001)
    high = _synthetic_estimate(d + 1, 0.4, 0.05, 0.001)
    flags = {}
    for name, ests in (("lower_bound_violation", steep_down), ("upper_bound_violation", steep_up)):
        der = estimate_derivative(ests)[0]
        flags[name] = not check_differential_inequalities(ests[1], der, d)["holds"]
    flags["lipschitz_violation"] = not check_lipschitz(jump, d)["holds"]
    flags["dimension_decrease"] = not check_monotone_in_dimension(low, high)["holds"]
    return flags


def check_differential_audit(run: ExponentRun, d=2, xis=None, limit=None) -> CheckResult:
    def go():
        ests = sorted((e for (dd, _), e in run.estimates.items() if dd == d and (xis is None or any(abs(e.xi - x) < 1e-9 for x in xis))), key=lambda e: e.xi)
        ders = estimate_derivative(ests)
        by_xi = {e.xi: e for e in ests}
        rows = [check_differential_inequalities(by_xi[der.xi], der, d) for der in ders]
        lip = check_lipschitz(ests, d)
        controls = negative_controls(d)
        ok = all(r["holds"] for r in rows) and lip["holds"] and all(controls.values())
        return ok, {"rows": rows, "lipschitz": lip, "negative_controls_flagged": controls}

    return _timed(go, 12, "differential-inequality audit", "inequalities hold within 2 se; controls flagged", limit)


# ---------------------------------------------------------------------------
# Thick points and bounds


def check_thick_points(ds=(2, 3), alpha=1.0, ks=range(4, 9), reps=100, seed=0, tol=0.3, limit=None) -> CheckResult:
    def run():
        reports = {str(d): thick_point_scan(d, alpha, ks, reps, seed) for d in ds}
        ok = all(abs(r.fitted_exponent - r.expected_exponent) <= tol for r in reports.values())
        return ok, {
            d: {"fitted": r.fitted_exponent, "expected": r.expected_exponent, "mean_counts": r.mean_counts, "low_power": r.low_power}
            for d, r in reports.items()
        }

    return _timed(run, 9, "thick-point exponent", f"|fitted - (d - alpha^2/2)| <= {tol}", limit)


def check_bound_algebra(step=1e-3, tol=1e-12) -> CheckResult:
    def run():
        b = bounds.XI_BRANCH
        lo, up = bounds.rho_lower_2d(b), bounds.rho_upper_2d(b)
        # both branches of each piecewise function at the switch point
        lo_gap = abs(bounds._linear_branch(b) - bounds._quadratic_branch(b))
        grid = np.round(np.arange(0.0, 3.0 + step / 2, step), 12)
        order = max(bounds.rho_lower_2d(x) - bounds.rho_upper_2d(x) for x in grid)
        ok = abs(lo - 1 / 6) <= tol and abs(up - 1 / 6) <= tol and lo_gap <= tol and order <= 0
        return ok, {
            "rho_lower_at_branch": lo,
            "rho_upper_at_branch": up,
            "branch_gap": lo_gap,
            "max_lower_minus_upper": order,
        }

    return _timed(run, 10, "bound algebra", f"identities to {tol}; lower <= upper on grid", None)


def check_dgamma_solver(d=3, step=0.01) -> CheckResult:
    def run():
        lin = bounds.solve_d_gamma(1.0, 3, bounds.LambdaFunction.linear(-1.0, 0.5)).d_gamma
        edges = []
        worst_edge = 0.0
        for g in (0.5, 1.0, 1.5, 2.0):
            low = bounds.solve_d_gamma(g, d, bounds.LambdaFunction.constant(0.0)).d_gamma
            high = bounds.solve_d_gamma(g, d, bounds.LambdaFunction.upper_bound(d)).d_gamma
            e_lo = d + g * g / 2
            e_hi = e_lo + g * math.sqrt(2 * d - 2)
            worst_edge = max(worst_edge, abs(low - e_lo), abs(high - e_hi))
            edges.append([g, low, high])
        top = math.sqrt(2 * d)
        gammas = np.arange(step, top, step)
        mid = bounds.LambdaFunction(lambda x: 0.5 * x * math.sqrt(2 * d - 2), "half upper")
        sols = [bounds.solve_d_gamma(float(g), d, mid).d_gamma for g in gammas]
        increasing = bool(np.all(np.diff(sols) > 0))
        ok = abs(lin - 5.0) <= 1e-9 and worst_edge <= 1e-8 and increasing
        return ok, {"linear_case": lin, "max_edge_error": worst_edge, "strictly_increasing": increasing, "grid_points": len(sols)}

    return _timed(run, 11, "d_gamma solver", "linear case 5 +- 1e-9; edges to 1e-8; increasing", None)


# ---------------------------------------------------------------------------
# Suites

FULL = {
    "seed": 0,
    "variance": {"ds": (2, 3), "ks": range(3, 9), "reps": 200, "limit": 300},
    "covariance": {"k": 8, "reps": 2000, "limit": 600},
    "restriction": {"k": 6, "reps": 500},
    "oracle": {"instances": 100, "limit": 10},
    "xi_zero": {"ds": (2, 3, 4), "ks": range(2, 7)},
    "exponent": {
        "plans": [
            {"d": 2, "xi_grid": [0.1, 0.25, 0.3, 0.35, 0.4, XI_KNOWN, 0.45, 0.5, 0.6], "k_min": 5, "k_max": 9, "replicates": 20},
            {"d": 3, "xi_grid": [0.1, 0.25, XI_KNOWN, 0.6], "k_min": 5, "k_max": 8, "replicates": 20},
        ],
        "bracket_cells": [(d, x) for d in (2, 3) for x in (0.1, 0.25, 0.408, 0.6)],
        "monotone_xis": (0.25, 0.408),
        "audit_xis": (0.3, 0.35, 0.4, 0.45, 0.5),
        "known_limit": 1800,
        "limit": 7200,
    },
    "thick": {"ds": (2, 3), "ks": range(4, 9), "reps": 100, "limit": 900},
}

QUICK = {
    "seed": 0,
    "variance": {"ds": (2, 3), "ks": {2: range(3, 9), 3: range(3, 7)}, "reps": 150},
    "covariance": {"k": 7, "reps": 300},
    "restriction": {"k": 5, "reps": 100},
    "oracle": {"instances": 100},
    "xi_zero": {"ds": (2, 3, 4), "ks": range(2, 6)},
    "exponent": {
        "plans": [
            {"d": 2, "xi_grid": [0.0, 0.25, 0.3, 0.35, 0.4, XI_KNOWN], "k_min": 3, "k_max": 7, "replicates": 8},
            {"d": 3, "xi_grid": [0.0, 0.25, XI_KNOWN], "k_min": 3, "k_max": 5, "replicates": 6},
        ],
        "bracket_cells": [(d, x) for d in (2, 3) for x in (0.25, 0.408)],
        "monotone_xis": (0.25, 0.408),
        "audit_xis": (0.3, 0.35, 0.4),
    },
    "thick": {"ds": (2,), "ks": range(4, 9), "reps": 40},
}


def make_plans(config: dict, seed: int) -> list[ExperimentPlan]:
    return [ExperimentPlan(master_seed=seed, **p) for p in config["exponent"]["plans"]]


def run_suite(
    quick: bool = True,
    seed: int | None = None,
    out: str | Path | None = None,
    workers: int = 1,
    only: set[int] | None = None,
) -> list[CheckResult]:
    """Run the selected checks; data files go to ``out`` when given."""
    cfg = QUICK if quick else FULL
    seed = cfg["seed"] if seed is None else seed
    out = Path(out) if out is not None else None
    want = (lambda c: True) if only is None else (lambda c: c in only)
    results: list[CheckResult] = []

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    store = RecordStore(out / "records.csv", record_timings=False) if out is not None else None
    if store is not None:
        try:
            store.verify()
        except LFPPError as exc:
            results.append(CheckResult(0, "result store checksum", False, {"error": str(exc)}, "sha256 matches"))
            return results

    if want(1):
        results.append(check_variance_slope(seed=seed, **cfg["variance"]))
    if want(2):
        results.append(check_covariance_slope(seed=seed, **cfg["covariance"]))
    if want(3):
        results.append(check_restriction(seed=seed, **cfg["restriction"]))
    if want(4):
        results.append(check_metric_oracle(seed=seed, **cfg["oracle"]))
    if want(5):
        results.append(check_xi_zero(**cfg["xi_zero"]))
    if only is None or only & {6, 7, 8, 12}:
        ecfg = cfg["exponent"]
        t0 = time.perf_counter()
        run = run_exponent_plans(make_plans(cfg, seed), store=store, workers=workers)
        log.info("exponent runs: %.2f s", time.perf_counter() - t0)
        if want(6):
            results.append(check_known_value(run, limit=ecfg.get("known_limit")))
        if want(7):
            results.append(check_bound_bracket(run, ecfg["bracket_cells"], limit=ecfg.get("limit")))
        if want(8):
            results.append(check_dimension_monotonicity(run, ecfg["monotone_xis"]))
        if want(12):
            results.append(check_differential_audit(run, 2, ecfg["audit_xis"]))
        if out is not None:
            ests = [e.as_dict() for _, e in sorted(run.estimates.items())]
            write_json(out / "estimates.json", ests)
            if run.errors:
                write_json(out / "errors.json", run.errors)
    if want(9):
        results.append(check_thick_points(seed=seed, **cfg["thick"]))
    if want(10):
        results.append(check_bound_algebra())
    if want(11):
        results.append(check_dgamma_solver())

    results.sort(key=lambda r: r.criterion)
    if out is not None:
        write_json(out / "verify_report.json", {"quick": quick, "seed": seed, "checks": [r.as_dict() for r in results]})
    return results


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, range):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'#':>3}  {'check':<32} {'result':<6}  tolerance"]
    for r in results:
        lines.append(f"{r.criterion:>3}  {r.name:<32} {'PASS' if r.passed else 'FAIL':<6}  {r.tolerance}")
    return "\n".join(lines)
