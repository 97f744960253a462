import csv
import json
import math

import pytest

from smot.cli import dumps, fmt, main, write_csv
from smot.config import SCHEMA_VERSION, RunConfig, load_config, parse_config
from smot.errors import ValidationError


def _write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def _manifest(out):
    return json.loads((out / "manifest.json").read_text(encoding="utf-8"))


# --- configuration --------------------------------------------------------------------


def test_config_roundtrip():
    cfg = parse_config({"family": {"family": "bachelier", "delta": 0.1}, "seed": 3,
                        "simulate": {"stats_times": [0.5, 1.0]}, "curve": {"eps": [0.1, 0.01]}})
    again = parse_config(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and isinstance(again, RunConfig)
    assert cfg.schema_version == SCHEMA_VERSION and cfg.simulate.stats_times == (0.5, 1.0)


@pytest.mark.parametrize("data,message", [
    ({"family": {"family": "uniform"}, "colour": 1}, "unknown field colour"),
    ({"family": {"family": "uniform", "sigma": 1}}, "unknown field family.sigma"),
    ({"seed": 1}, "missing required field family"),
    ({"family": {"family": "uniform"}, "simulate": {"n_paths": 0}}, "simulate.n_paths"),
    ({"family": {"family": "uniform"}, "simulate": {"dt": 0.5}}, "simulate.dt"),
    ({"family": {"family": "uniform"}, "duality": {"dt": 0}}, "duality.dt"),
    ({"family": {"family": "cauchy"}}, "family.family"),
    ({"family": {"family": "tabulated"}}, "family.table_path"),
    ({"family": {"family": "uniform"}, "schema_version": 7}, "schema_version"),
    ({"family": {"family": "uniform"}, "seed": "x"}, "seed"),
    ({"family": {"family": "uniform"}, "simulate": {"dt": True}}, "simulate.dt"),
])
def test_config_rejections(data, message):
    with pytest.raises(ValidationError, match=message):
        parse_config(data)


def test_load_config_errors(tmp_path):
    with pytest.raises(ValidationError):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    with pytest.raises(ValidationError, match="not valid JSON"):
        load_config(bad)


# --- formatting -------------------------------------------------------------------------


def test_seventeen_digit_formatting():
    assert fmt(0.1) == "0.10000000000000001"
    assert float(fmt(math.pi)) == math.pi
    assert fmt(float("nan")) == "nan" and fmt(float("-inf")) == "-inf"
    assert json.loads(dumps({"a": [1, 0.1, float("nan")], "b": True})) == {"a": [1, 0.1, None], "b": True}


def test_csv_line_endings(tmp_path):
    path = tmp_path / "x.csv"
    write_csv(path, ["a", "b"], [(1, 0.5), ("s,t", 2.0)])
    assert path.read_bytes() == b'a,b\n1,0.5\n"s,t",2\n'


# --- commands ----------------------------------------------------------------------------


def test_transition_curve_uniform(tmp_path, capsys):
    out = tmp_path / "curve"
    cfg = _write_config(tmp_path, {"family": {"family": "uniform"}, "curve": {"n_times": 21, "eps": [0.1]}})
    assert main(["transition-curve", "--config", cfg, "--out", str(out)]) == 0
    rows = _read_csv(out / "curve.csv")
    assert rows[0] == ["t", "x1", "m", "mean", "x1_eps=0.1"]
    for row in rows[1:]:
        t, x1 = float(row[0]), float(row[1])
        assert x1 == pytest.approx(-math.exp(t) / (1 + 2 * math.exp(t)), abs=1e-9)
        assert row[1] == fmt(x1)
    assert rows[-1][4] == ""
    man = _manifest(out)
    assert man["status"] == "ok" and man["exit_code"] == 0
    assert parse_config(man["config"]) == load_config(cfg).replace(out=str(out))


def test_transition_curve_gbm_positive(tmp_path):
    out = tmp_path / "gbm"
    cfg = _write_config(tmp_path, {"family": {"family": "gbm"}, "curve": {"n_times": 11}})
    assert main(["transition-curve", "--config", cfg, "--out", str(out)]) == 0
    assert all(float(r[1]) > 0 for r in _read_csv(out / "curve.csv")[1:])


def test_transition_curve_bachelier_eps_sweep(tmp_path):
    out = tmp_path / "bach"
    cfg = _write_config(tmp_path, {"family": {"family": "bachelier"},
                                   "curve": {"n_times": 5, "eps": [0.2, 0.1, 0.05, 0.02]}})
    assert main(["transition-curve", "--config", cfg, "--out", str(out)]) == 0
    rows = _read_csv(out / "curve.csv")
    for row in rows[1:3]:
        x1 = float(row[1])
        gaps = [abs(float(v) - x1) for v in row[4:]]
        assert gaps == sorted(gaps, reverse=True)


def test_dump_coupling(tmp_path):
    out = tmp_path / "dc"
    cfg = _write_config(tmp_path, {"family": {"family": "uniform"}, "coupling": {"grid_points": 51}})
    assert main(["dump-coupling", "--config", cfg, "--out", str(out)]) == 0
    rows = _read_csv(out / "coupling.csv")
    assert rows[0] == ["x", "T_d", "T_u", "q"] and len(rows) == 52
    meta = json.loads((out / "coupling.json").read_text(encoding="utf-8"))
    assert meta["x1"] == pytest.approx(0.0, abs=1e-9)
    # uniform t=0, eps=ln2: T_u - T_d = 3(1 - x) and T_u + T_d = x + 1 on the band
    for x, td, tu, _ in ([float(v) if v not in ("inf", "") else math.inf for v in r] for r in rows[1:]):
        if 0 < x < 1:
            assert tu - td == pytest.approx(3 * (1 - x), abs=1e-8)
            assert tu + td == pytest.approx(x + 1, abs=1e-8)


def test_dump_increasing_coupling(tmp_path):
    out = tmp_path / "inc"
    cfg = _write_config(tmp_path, {"family": {"family": "uniform"},
                                   "coupling": {"kind": "increasing", "grid_points": 21, "eps": 0.1}})
    assert main(["dump-coupling", "--config", cfg, "--out", str(out)]) == 0
    assert _manifest(out)["status"] == "ok"


def test_simulate_seed_repeat_is_byte_identical(tmp_path):
    data = {"family": {"family": "uniform"},
            "simulate": {"scheme": "sde", "dt": 0.01, "n_paths": 2000, "dense_times": [0.5]}}
    cfg = _write_config(tmp_path, data)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", cfg, "--out", str(a), "--seed", "4"]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(b), "--seed", "4", "--threads", "2"]) == 0
    assert (a / "stats.csv").read_bytes() == (b / "stats.csv").read_bytes()
    assert (a / "paths.csv").read_bytes() == (b / "paths.csv").read_bytes()
    assert _read_csv(a / "stats.csv")[0] == ["t", "mean", "var", "ks"]
    assert len(_read_csv(a / "paths_dense.csv")) == 2001
    assert _manifest(b)["threads"] == 2


def test_simulate_threads_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SMOT_THREADS", "3")
    cfg = _write_config(tmp_path, {"family": {"family": "uniform"},
                                   "simulate": {"scheme": "discrete", "n": 4, "n_paths": 500}})
    out = tmp_path / "env"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    assert _manifest(out)["threads"] == 3


def test_simulate_threshold_failure_exit_code(tmp_path):
    cfg = _write_config(tmp_path, {"family": {"family": "uniform"},
                                   "simulate": {"scheme": "increasing", "dt": 0.01, "n_paths": 200,
                                                "ks_threshold": 1e-6}})
    out = tmp_path / "ks"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 4
    man = _manifest(out)
    assert man["status"] == "threshold-failure" and not all(c["pass"] for c in man["checks"].values())


def test_duality_gap_command(tmp_path, capsys):
    cfg = _write_config(tmp_path, {"family": {"family": "uniform"},
                                   "duality": {"dt": 0.005, "n_paths": 1000, "n_t": 32, "chain_n": 4}})
    out = tmp_path / "dg"
    assert main(["duality-gap", "--config", cfg, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "quadrature value" in text and "chain n=4" in text
    man = _manifest(out)
    assert man["results"]["optimal_value_quadrature"] < 0
    assert len(_read_csv(out / "residuals.csv")) == 1001
    assert len(_read_csv(out / "chain_residuals.csv")) == 1001


def test_duality_gap_zero_cost(tmp_path):
    cfg = _write_config(tmp_path, {"family": {"family": "uniform"},
                                   "duality": {"cost": "zero", "dt": 0.01, "n_paths": 200, "n_t": 16}})
    out = tmp_path / "zero"
    assert main(["duality-gap", "--config", cfg, "--out", str(out)]) == 0
    res = _manifest(out)["results"]
    assert res["optimal_value_quadrature"] == 0 and res["mc_estimate"] == 0
    assert all(float(r[1]) == 0 for r in _read_csv(out / "residuals.csv")[1:])


# --- failures ------------------------------------------------------------------------------


def test_squared_cost_is_validation_error(tmp_path, capsys):
    cfg = _write_config(tmp_path, {"family": {"family": "uniform"}, "duality": {"cost": "squared"}})
    out = tmp_path / "sq"
    assert main(["duality-gap", "--config", cfg, "--out", str(out)]) == 2
    assert "c_xy > 0" in capsys.readouterr().err
    man = _manifest(out)
    assert man["status"] == "error" and man["error"]["type"] == "CostAssumptionError"


def test_missing_family_exit_code(tmp_path, capsys):
    cfg = _write_config(tmp_path, {"seed": 1, "out": str(tmp_path / "fallback")})
    assert main(["simulate", "--config", cfg]) == 2
    assert "missing required field family" in capsys.readouterr().err
    assert _manifest(tmp_path / "fallback")["exit_code"] == 2


def test_bad_threads_flag(tmp_path):
    cfg = _write_config(tmp_path, {"family": {"family": "uniform"}})
    assert main(["transition-curve", "--config", cfg, "--out", str(tmp_path / "t"), "--threads", "0"]) == 2


def test_unwritable_output_directory(tmp_path, capsys):
    cfg = _write_config(tmp_path, {"family": {"family": "uniform"}})
    assert main(["transition-curve", "--config", cfg, "--out", "/proc/smot-nope"]) == 2
    assert "error" in capsys.readouterr().err


def test_time_out_of_range_is_validation_error(tmp_path):
    cfg = _write_config(tmp_path, {"family": {"family": "uniform"}, "coupling": {"t": 0.9, "eps": 0.5}})
    assert main(["dump-coupling", "--config", cfg, "--out", str(tmp_path / "oor")]) == 2


def test_unknown_command_exits_through_argparse(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate", "--config", "x.json"])
    assert info.value.code == 2
