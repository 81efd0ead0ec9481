"""Command line front end: ``lfpp {estimate,bounds,dgamma,sample,verify}``.

Settings are resolved in this order, later sources winning: built-in
defaults, the ``--config`` file, ``LFPP_<FLAG>`` environment variables, and
command-line flags.  Config files hold one ``section.key = value`` per line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__, bounds
from .errors import GridSpacingError, LFPPError, ResourceLimitError
from .field import FieldSpec, iter_samples, sample_field, save_snapshot
from .exponent import (
    ExperimentPlan,
    RecordStore,
    check_bracket,
    check_differential_inequalities,
    check_lipschitz,
    check_monotone_in_dimension,
    check_monotone_in_xi,
    estimate_all,
    estimate_derivative,
    run_plan,
)

log = logging.getLogger("lfpp")

# ---------------------------------------------------------------------------
# Value parsers


def parse_int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise ValueError("empty integer list")
    return vals


def parse_float_list(text: str) -> list[float]:
    """Comma list ``0.1,0.2`` or inclusive range ``start:stop:step``."""
    text = str(text).strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"range must be start:stop:step, got {text!r}")
        try:
            a, b, step = (float(p) for p in parts)
        except ValueError:
            raise ValueError(f"malformed range {text!r}") from None
        if not step > 0 or b < a:
            raise ValueError(f"range needs step > 0 and stop >= start, got {text!r}")
        n = int(math.floor((b - a) / step + 1e-9)) + 1
        return [round(a + i * step, 12) for i in range(n)]
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ValueError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or not all(math.isfinite(v) for v in vals):
        raise ValueError(f"expected finite numbers, got {text!r}")
    return vals


def parse_k_range(text: str) -> tuple[int, int]:
    """``a..b`` (inclusive) or a single integer."""
    m = re.fullmatch(r"\s*(\d+)\s*(?:\.\.\s*(\d+)\s*)?", str(text))
    if not m:
        raise ValueError(f"k range must look like 5..9, got {text!r}")
    lo = int(m.group(1))
    hi = int(m.group(2)) if m.group(2) is not None else lo
    if hi < lo:
        raise ValueError(f"empty k range {text!r}")
    return lo, hi


_SIZE = {"": 1, "K": 2**10, "M": 2**20, "G": 2**30, "T": 2**40}


def parse_bytes(text: str) -> int:
    m = re.fullmatch(r"\s*(\d+)\s*([KMGT]?)i?B?\s*", str(text), flags=re.IGNORECASE)
    if not m:
        raise ValueError(f"memory size must look like 4G or 1073741824, got {text!r}")
    return int(m.group(1)) * _SIZE[m.group(2).upper()]


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def parse_quantile(text) -> float:
    q = float(text)
    if not 0 < q < 1:
        raise ValueError(f"quantile must lie in (0, 1), got {text}")
    return q


def parse_positive_int(text) -> int:
    v = int(text)
    if v < 1:
        raise ValueError(f"expected an integer >= 1, got {text}")
    return v


# ---------------------------------------------------------------------------
# Options and config


@dataclass(frozen=True)
class Option:
    dest: str
    key: str  # section.key in config files
    parse: Callable
    default: str | None
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.dest.replace("_", "-")

    @property
    def env(self) -> str:
        return "LFPP_" + self.dest.upper()


OPTIONS = [
    Option("d", "grid.d", parse_int_list, "2", "dimension(s), comma list"),
    Option("xi", "grid.xi", parse_float_list, None, "xi values: comma list or start:stop:step"),
    Option("k", "grid.k", parse_k_range, "5..9", "scale range a..b (eps = 2^-k)"),
    Option("reps", "grid.reps", parse_positive_int, "20", "replicates per cell"),
    Option("quantile", "grid.quantile", parse_quantile, "0.5", "quantile of log D used in the fit"),
    Option("gamma", "grid.gamma", parse_float_list, None, "gamma values: comma list or start:stop:step"),
    Option("lam", "grid.lam", str, "lower", "lambda input for dgamma: lower, upper or a CSV with xi,lambda_hat"),
    Option("seed", "run.seed", int, "0", "master seed"),
    Option("workers", "run.workers", parse_positive_int, "1", "worker processes"),
    Option("mem_cap", "run.mem_cap", parse_bytes, "4G", "memory cap per field sample"),
    Option("out", "run.out", str, "lfpp-out", "output directory"),
    Option("quick", "run.quick", parse_bool, "false", "small, fast verification suite"),
    Option("bootstrap", "run.bootstrap", parse_positive_int, "200", "bootstrap resamples"),
    Option("save_fields", "output.save_fields", parse_bool, "false", "write field snapshots"),
    Option("figure", "output.figure", str, None, "figure data to emit: lambda or dgamma"),
]
OPTION_BY_KEY = {o.key: o for o in OPTIONS}
OPTION_BY_DEST = {o.dest: o for o in OPTIONS}


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    """``section.key = value`` lines into {key: value}; '#' starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in OPTION_BY_KEY:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        try:
            OPTION_BY_KEY[key].parse(value)
        except ValueError as exc:
            raise ConfigError(f"line {n}: {key}: {exc}") from None
        out[key] = value
    return out


def serialize_config(values: dict[str, str]) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))


@dataclass
class RunConfig:
    """Resolved settings: raw strings per option plus their parsed values."""

    raw: dict = field(default_factory=dict)

    def get(self, dest: str):
        value = self.raw.get(dest)
        return None if value is None else OPTION_BY_DEST[dest].parse(value)

    def to_text(self, include_out: bool = False) -> str:
        """Config snapshot; the output location is left out unless asked for."""
        return serialize_config(
            {OPTION_BY_DEST[d].key: v for d, v in self.raw.items() if v is not None and (include_out or d != "out")}
        )


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    raw = {o.dest: o.default for o in OPTIONS}
    if getattr(args, "config", None):
        for key, value in parse_config(Path(args.config).read_text()).items():
            raw[OPTION_BY_KEY[key].dest] = value
    for o in OPTIONS:
        if o.env in environ:
            try:
                o.parse(environ[o.env])
            except ValueError as exc:
                raise ConfigError(f"{o.env}: {exc}") from None
            raw[o.dest] = environ[o.env]
    for o in OPTIONS:
        value = getattr(args, o.dest, None)
        if value is not None:
            raw[o.dest] = str(value)
    return RunConfig(raw)


def _checked(parse: Callable) -> Callable:
    """argparse type that validates with ``parse`` but keeps the raw string."""

    def check(text):
        try:
            parse(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
        return text

    check.__name__ = getattr(parse, "__name__", "value")
    return check


COMMAND_OPTIONS = {
    "estimate": ["d", "xi", "k", "reps", "quantile", "seed", "workers", "mem_cap", "out", "bootstrap", "save_fields"],
    "bounds": ["d", "xi", "gamma", "out", "figure"],
    "dgamma": ["d", "gamma", "lam", "out"],
    "sample": ["d", "k", "reps", "seed", "mem_cap", "out", "save_fields"],
    "verify": ["seed", "workers", "out", "quick"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfpp", description="Liouville first passage percolation experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "estimate": "estimate lambda(d, xi) and run the consistency checks",
        "bounds": "evaluate the lambda bounds and emit figure tables",
        "dgamma": "solve for the fractal dimension d_gamma",
        "sample": "draw field samples and summarize them",
        "verify": "run the validation suite",
    }
    for name, dests in COMMAND_OPTIONS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="config file with section.key = value lines")
        p.add_argument("-v", "--verbose", action="store_true")
        for dest in dests:
            o = OPTION_BY_DEST[dest]
            if o.parse is parse_bool:
                p.add_argument(o.flag, dest=dest, action="store_const", const="true", default=None, help=o.help)
            else:
                p.add_argument(o.flag, dest=dest, type=_checked(o.parse), default=None, help=o.help)
    return parser


# ---------------------------------------------------------------------------
# Output helpers


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def _setup_logging(out: Path | None, verbose: bool) -> None:
    handlers = [logging.StreamHandler(sys.stderr)]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(out / "run.log", mode="a"))
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        handlers=handlers,
        force=True,
    )
    if out is not None:
        # the log file always gets timings, whatever the console level
        handlers[1].setLevel(logging.INFO)
        logging.getLogger("lfpp").setLevel(logging.INFO)
        handlers[0].setLevel(logging.INFO if verbose else logging.WARNING)


# ---------------------------------------------------------------------------
# Commands


def cmd_estimate(cfg: RunConfig) -> int:
    from . import plotting

    out = Path(cfg.get("out"))
    ds = cfg.get("d")
    xis = cfg.get("xi")
    if xis is None:
        raise ConfigError("estimate needs --xi")
    k_min, k_max = cfg.get("k")
    mem_cap = cfg.get("mem_cap")
    for d in ds:
        FieldSpec(d=d, k=k_max).check_memory(mem_cap)
    (out / "config.txt").write_text(cfg.to_text())
    store = RecordStore(out / "records.csv")
    store.verify()
    all_estimates, all_errors, checks = {}, [], {"per_d": {}, "dimension_monotonicity": []}
    for d in ds:
        plan = ExperimentPlan(
            d=d,
            xi_grid=sorted(xis),
            k_min=k_min,
            k_max=k_max,
            replicates=cfg.get("reps"),
            master_seed=cfg.get("seed"),
            quantile=cfg.get("quantile"),
            bootstrap=cfg.get("bootstrap"),
        )
        t0 = time.perf_counter()
        records, errors = run_plan(plan, store=store, workers=cfg.get("workers"), mem_cap=mem_cap)
        log.info("d=%d: %d records in %.2f s", d, len(records), time.perf_counter() - t0)
        all_errors.extend(errors)
        if errors:
            continue
        ests = estimate_all(plan, records)
        all_estimates[d] = ests
        checks["per_d"][str(d)] = _checks_for(d, ests)
        if cfg.get("save_fields"):
            _save_fields(out / "fields", plan, mem_cap)
        plotting.plot_scaling_fits(ests, out / f"scaling_fit_d{d}.png")
        plotting.plot_lambda_bounds(bounds.lambda_figure_table(d, xi_max=max(max(xis), 0.1)), d, out / f"lambda_estimates_d{d}.png", ests)
    for lo, hi in zip(ds, ds[1:]):
        if lo in all_estimates and hi in all_estimates and hi > lo:
            for a in all_estimates[lo]:
                for b in all_estimates[hi]:
                    if a.xi == b.xi:
                        checks["dimension_monotonicity"].append(check_monotone_in_dimension(a, b))
    flat = [e for d in ds for e in all_estimates.get(d, [])]
    write_json(out / "estimates.json", [e.as_dict() for e in flat])
    write_csv(out / "estimates.csv", ["d", "xi", "lambda_hat", "stderr", "r2"], [(e.d, e.xi, e.lambda_hat, e.stderr, e.r2) for e in flat])
    write_json(out / "checks.json", checks)
    for e in flat:
        print(f"d={e.d} xi={e.xi:g}: lambda_hat = {e.lambda_hat:.4f} +- {e.stderr:.4f} (R^2 {e.r2:.3f})")
    if all_errors:
        write_json(out / "errors.json", all_errors)
        print(f"{len(all_errors)} job(s) failed; see {out / 'errors.json'}", file=sys.stderr)
        return 1
    return 0


def _checks_for(d: int, ests) -> dict:
    report = {
        "bracket": [check_bracket(e) for e in ests],
        "monotone_in_xi": check_monotone_in_xi(ests),
    }
    if len(ests) >= 2:
        report["lipschitz"] = check_lipschitz(ests, d)
    try:
        ders = estimate_derivative(ests)
    except GridSpacingError as exc:
        report["differential_inequalities"] = {"skipped": str(exc)}
    else:
        by_xi = {e.xi: e for e in ests}
        report["derivatives"] = [der.as_dict() for der in ders]
        report["differential_inequalities"] = [check_differential_inequalities(by_xi[der.xi], der, d) for der in ders]
    return report


def _save_fields(folder: Path, plan: ExperimentPlan, mem_cap) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    seed = plan.replicate_seeds()[0]
    for k in plan.ks:
        spec = plan.field_spec(k, seed)
        save_snapshot(sample_field(spec, mem_cap=mem_cap), folder / f"field_d{plan.d}_k{k}_rep0.bin")


def cmd_bounds(cfg: RunConfig) -> int:
    from . import plotting

    out = Path(cfg.get("out"))
    out.mkdir(parents=True, exist_ok=True)
    ds = cfg.get("d")
    xis = cfg.get("xi")
    gammas = cfg.get("gamma")
    figure = cfg.raw.get("figure")
    if figure not in (None, "lambda", "dgamma"):
        raise ConfigError(f"--figure must be lambda or dgamma, got {figure!r}")
    if figure is None and xis is None and gammas is None:
        figure = "lambda"
    reports = []
    for d in ds:
        for xi in xis or []:
            reports.append(bounds.lambda_bounds(d, xi).as_dict())
        for g in gammas or []:
            reports.append(bounds.d_gamma_bounds(d, g).as_dict())
        if figure == "lambda":
            table = bounds.lambda_figure_table(d)
            path = write_csv(out / f"lambda_bounds_d{d}.csv", ["xi", "lower", "upper"], table)
            plotting.plot_lambda_bounds(table, d, path.with_suffix(".png"))
            print(f"wrote {path}")
        elif figure == "dgamma":
            table = bounds.dgamma_figure_table(d)
            path = write_csv(out / f"dgamma_bounds_d{d}.csv", ["gamma", "lower", "upper"], table)
            plotting.plot_dgamma_bounds(table, d, path.with_suffix(".png"))
            print(f"wrote {path}")
    if reports:
        write_json(out / "bounds.json", reports)
        for r in reports:
            name = "xi" if "xi" in r else "gamma"
            print(f"d={r['d']} {name}={r[name]:g}: [{r['lower']:.6f}, {r['upper']:.6f}]")
    return 0


def _lambda_input(spec: str, d: int) -> bounds.LambdaFunction:
    if spec == "lower":
        return bounds.LambdaFunction.lower_bound(d)
    if spec == "upper":
        return bounds.LambdaFunction.upper_bound(d)
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"--lam must be lower, upper or an existing CSV file, got {spec!r}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r.get("d", d)) == d]
    if len(rows) < 2:
        raise ConfigError(f"{path}: need at least two rows with d={d} and columns xi,lambda_hat")
    return bounds.LambdaFunction.from_table(
        [float(r["xi"]) for r in rows], [float(r["lambda_hat"]) for r in rows], d=d, label=str(path)
    )


def cmd_dgamma(cfg: RunConfig) -> int:
    out = Path(cfg.get("out"))
    out.mkdir(parents=True, exist_ok=True)
    lam_spec = cfg.raw.get("lam")
    rows, report = [], {"lambda": lam_spec, "solutions": [], "xi_c_bracket": {}}
    for d in cfg.get("d"):
        lam = _lambda_input(lam_spec, d)
        top = math.sqrt(2 * d)
        gammas = cfg.get("gamma") or [g for g in (0.5, 1.0, 1.5, 2.0) if g < top]
        for g in gammas:
            sol = bounds.solve_d_gamma(g, d, lam)
            report["solutions"].append(sol.as_dict())
            rows.append((d, g, sol.d_gamma, sol.xi, sol.Q, sol.residual))
            print(f"d={d} gamma={g:g}: d_gamma = {sol.d_gamma:.9f}")
        try:
            lo, hi = bounds.xi_c_bracket(d, bounds.LambdaFunction.lower_bound(d), bounds.LambdaFunction.upper_bound(d))
            report["xi_c_bracket"][str(d)] = [lo, hi]
        except LFPPError as exc:
            report["xi_c_bracket"][str(d)] = {"error": str(exc)}
    write_csv(out / "dgamma.csv", ["d", "gamma", "d_gamma", "xi", "Q", "residual"], rows)
    write_json(out / "dgamma.json", report)
    return 0


def cmd_sample(cfg: RunConfig) -> int:
    from . import plotting

    out = Path(cfg.get("out"))
    out.mkdir(parents=True, exist_ok=True)
    k_min, k_max = cfg.get("k")
    mem_cap = cfg.get("mem_cap")
    rows = []
    for d in cfg.get("d"):
        for k in range(k_min, k_max + 1):
            spec = FieldSpec(d=d, k=k, master_seed=cfg.get("seed"), job_key=f"sample/d{d}/k{k}")
            spec.check_memory(mem_cap)
            for r, sample in enumerate(iter_samples(spec, cfg.get("reps"), mem_cap=mem_cap)):
                v = sample.values
                rows.append((d, k, r, float(v.mean()), float(v.var()), float(v.min()), float(v.max())))
                if cfg.get("save_fields"):
                    save_snapshot(sample, out / f"field_d{d}_k{k}_rep{r}.bin")
                if r == 0:
                    plotting.plot_field_slice(v, out / f"field_d{d}_k{k}.png", f"d={d}, k={k}")
    path = write_csv(out / "field_summary.csv", ["d", "k", "rep", "mean", "variance", "min", "max"], rows)
    print(f"wrote {path}")
    return 0


def cmd_verify(cfg: RunConfig) -> int:
    from . import verify

    out = Path(cfg.get("out"))
    t0 = time.perf_counter()
    results = verify.run_suite(quick=cfg.get("quick"), seed=cfg.get("seed"), out=out, workers=cfg.get("workers"))
    log.info("verify total: %.2f s", time.perf_counter() - t0)
    (out / "config.txt").write_text(cfg.to_text())
    print(verify.format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        for r in failed:
            print(f"FAILED {r.criterion} {r.name}: {json.dumps(r.measured, default=_json_default, sort_keys=True)[:400]}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "estimate": cmd_estimate,
    "bounds": cmd_bounds,
    "dgamma": cmd_dgamma,
    "sample": cmd_sample,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        # only options the subcommand accepts take part
        cfg.raw = {k: v for k, v in cfg.raw.items() if k in COMMAND_OPTIONS[args.command]}
        out = cfg.get("out")
        _setup_logging(Path(out) if out else None, args.verbose)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ValueError, ResourceLimitError) as exc:
        print(f"lfpp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except LFPPError as exc:
        print(f"lfpp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
