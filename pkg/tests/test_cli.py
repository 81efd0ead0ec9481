import argparse
import csv
import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lfpp import cli
from lfpp.cli import (
    ConfigError,
    main,
    parse_bool,
    parse_bytes,
    parse_config,
    parse_float_list,
    parse_int_list,
    parse_k_range,
    resolve_config,
    serialize_config,
)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# Value parsers


def test_parse_float_list():
    assert parse_float_list("0.1,0.25") == [0.1, 0.25]
    assert parse_float_list("0.3:0.5:0.05") == [0.3, 0.35, 0.4, 0.45, 0.5]
    assert parse_float_list("0:1:0.5") == [0.0, 0.5, 1.0]
    for bad in ("0.3:0.5", "a,b", "0.5:0.3:0.1", "0:1:0", "", "nan"):
        with pytest.raises(ValueError):
            parse_float_list(bad)


@given(st.floats(0, 2), st.integers(0, 40), st.floats(0.01, 0.5))
def test_float_range_endpoints(a, n, step):
    b = a + n * step
    vals = parse_float_list(f"{a!r}:{b!r}:{step!r}")
    assert len(vals) == n + 1
    assert vals[0] == pytest.approx(a, abs=1e-9)
    assert vals[-1] == pytest.approx(b, abs=1e-9)


def test_parse_k_range():
    assert parse_k_range("5..9") == (5, 9)
    assert parse_k_range("7") == (7, 7)
    for bad in ("9..5", "5-9", "a..b", "5..", ""):
        with pytest.raises(ValueError):
            parse_k_range(bad)


def test_other_parsers():
    assert parse_int_list("2,3") == [2, 3]
    assert parse_bytes("4G") == 4 * 2**30
    assert parse_bytes("512MiB") == 512 * 2**20
    assert parse_bytes("1000") == 1000
    assert parse_bool("yes") and not parse_bool("0")
    for fn, bad in [(parse_int_list, ""), (parse_bytes, "lots"), (parse_bool, "maybe")]:
        with pytest.raises(ValueError):
            fn(bad)


# ---------------------------------------------------------------------------
# Config files and precedence


config_values = st.fixed_dictionaries(
    {},
    optional={
        "grid.d": st.sampled_from(["2", "3", "2,3"]),
        "grid.xi": st.sampled_from(["0.1,0.2", "0.3:0.5:0.05", "0.25"]),
        "grid.k": st.sampled_from(["3..5", "4", "5..9"]),
        "grid.reps": st.integers(1, 100).map(str),
        "run.seed": st.integers(0, 2**31).map(str),
        "run.mem_cap": st.sampled_from(["4G", "100M", "1024"]),
        "run.quick": st.sampled_from(["true", "false"]),
    },
)


@given(config_values)
def test_config_roundtrip_idempotent(values):
    text = serialize_config(values)
    assert parse_config(text) == values
    assert serialize_config(parse_config(text)) == text


def test_config_errors():
    with pytest.raises(ConfigError):
        parse_config("grid.nope = 1\n")
    with pytest.raises(ConfigError):
        parse_config("grid.k = 9..5\n")
    with pytest.raises(ConfigError):
        parse_config("just words\n")
    assert parse_config("# comment\n\ngrid.d = 3  # trailing\n") == {"grid.d": "3"}


def test_precedence(tmp_path):
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("grid.reps = 7\nrun.seed = 5\ngrid.k = 3..4\n")
    args = argparse.Namespace(config=str(cfg_file), reps=None, seed="9", k=None)
    cfg = resolve_config(args, environ={"LFPP_SEED": "8", "LFPP_K": "4..6"})
    assert cfg.get("reps") == 7  # config over default
    assert cfg.get("k") == (4, 6)  # env over config
    assert cfg.get("seed") == 9  # flag over env
    assert cfg.get("quantile") == 0.5  # default
    with pytest.raises(ConfigError):
        resolve_config(argparse.Namespace(), environ={"LFPP_K": "bad"})


def test_malformed_range_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--xi", "0.3:0.5", "--out", str(tmp_path)])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--xi", "0.3", "--k", "9..5", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_env_error_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("LFPP_REPS", "zero")
    assert main(["estimate", "--xi", "0.3", "--out", str(tmp_path)]) == 2


def test_memory_cap_exits_2(tmp_path, capsys):
    code = main(["estimate", "--xi", "0.3", "--d", "3", "--k", "3..9", "--mem-cap", "1M", "--out", str(tmp_path)])
    assert code == 2
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# Subcommands


ESTIMATE = ["estimate", "--d", "2", "--xi", "0,0.2,0.4", "--k", "3..5", "--reps", "4", "--seed", "3", "--bootstrap", "50"]


def test_estimate_outputs_and_rerun(tmp_path):
    out = tmp_path / "run"
    assert main(ESTIMATE + ["--out", str(out)]) == 0
    for name in ("config.txt", "records.csv", "estimates.json", "estimates.csv", "checks.json", "scaling_fit_d2.png", "lambda_estimates_d2.png"):
        assert (out / name).exists(), name
    ests = json.loads((out / "estimates.json").read_text())
    zero = [e for e in ests if e["xi"] == 0.0][0]
    assert abs(zero["lambda_hat"]) <= 1e-6
    rows = read_csv(out / "records.csv")
    assert rows[0] == ["d", "xi", "k", "seed", "log_distance", "wall_seconds"]
    assert len(rows) == 1 + 3 * 3 * 4
    before = {n: (out / n).read_bytes() for n in ("estimates.json", "checks.json", "config.txt")}
    assert main(ESTIMATE + ["--out", str(out)]) == 0
    assert len(read_csv(out / "records.csv")) == len(rows)
    for n, b in before.items():
        assert (out / n).read_bytes() == b, n
    other = tmp_path / "other"
    assert main(ESTIMATE + ["--out", str(other)]) == 0
    assert (other / "estimates.json").read_bytes() == before["estimates.json"]


def test_estimate_refuses_tampered_store(tmp_path):
    out = tmp_path / "run"
    assert main(ESTIMATE + ["--out", str(out)]) == 0
    with open(out / "records.csv", "a") as fh:
        fh.write("2,0.2,3,1,-0.5,0.0\n")
    assert main(ESTIMATE + ["--out", str(out)]) == 1


def test_bounds_figures(tmp_path):
    assert main(["bounds", "--d", "3", "--figure", "lambda", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "lambda_bounds_d3.csv")
    assert rows[0] == ["xi", "lower", "upper"]
    for xi, lo, hi in rows[1:]:
        assert float(hi) == pytest.approx(2 * float(xi), abs=1e-12)
        assert float(lo) <= float(hi)
    assert (tmp_path / "lambda_bounds_d3.png").exists()
    assert main(["bounds", "--d", "4", "--figure", "dgamma", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "dgamma_bounds_d4.csv")
    assert rows[0] == ["gamma", "lower", "upper"]
    assert float(rows[-1][0]) < math.sqrt(8)
    assert (tmp_path / "dgamma_bounds_d4.png").exists()


def test_bounds_report(tmp_path, capsys):
    assert main(["bounds", "--d", "3", "--xi", "0.3", "--gamma", "1", "--out", str(tmp_path)]) == 0
    reports = json.loads((tmp_path / "bounds.json").read_text())
    assert reports[0]["upper"] == pytest.approx(0.6)
    assert reports[1]["upper"] == pytest.approx(5.5)
    assert main(["bounds", "--figure", "other", "--out", str(tmp_path)]) == 2


def test_dgamma_command(tmp_path):
    assert main(["dgamma", "--d", "3", "--gamma", "1", "--lam", "upper", "--out", str(tmp_path)]) == 0
    sol = json.loads((tmp_path / "dgamma.json").read_text())["solutions"][0]
    assert sol["d_gamma"] == pytest.approx(5.5, abs=1e-8)
    table = tmp_path / "lam.csv"
    table.write_text("d,xi,lambda_hat\n3,0.1,0.05\n3,0.3,0.2\n")
    assert main(["dgamma", "--d", "3", "--gamma", "1,2", "--lam", str(table), "--out", str(tmp_path)]) == 0
    assert main(["dgamma", "--d", "3", "--lam", "missing.csv", "--out", str(tmp_path)]) == 2


def test_sample_command(tmp_path):
    assert main(["sample", "--d", "2", "--k", "3..4", "--reps", "2", "--save-fields", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "field_summary.csv")
    assert len(rows) == 1 + 4
    assert abs(float(rows[1][3])) < 1e-9
    assert (tmp_path / "field_d2_k3.png").exists()
    assert (tmp_path / "field_d2_k4_rep1.bin").exists()


def test_verify_corrupted_store(tmp_path, capsys):
    from lfpp.exponent import RecordStore, ResultRecord
    from lfpp.verify import run_suite

    out = tmp_path / "v"
    RecordStore(out / "records.csv").append([ResultRecord(2, 0.1, 3, 1, -0.1)])
    with open(out / "records.csv", "a") as fh:
        fh.write("2,0.1,3,2,-0.2,0.0\n")
    results = run_suite(quick=True, seed=0, out=out, only=set())
    assert [(r.criterion, r.passed) for r in results] == [(0, False)]
    assert main(["verify", "--quick", "--out", str(out)]) == 1
    assert "checksum" in capsys.readouterr().err


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "lfpp" in capsys.readouterr().out
    assert cli.OPTION_BY_DEST["mem_cap"].env == "LFPP_MEM_CAP"
