import json
import os
import subprocess
import sys

import numpy as np
import pytest

from trial_adjust.analysis import AnalysisRequest, analyze_trial
from trial_adjust.cli import EXIT_INTERNAL, EXIT_OK, EXIT_USER, main
from trial_adjust.config import load_config, parse_config_text
from trial_adjust.errors import ConfigError, MissingData, NonNumeric, SchemaError
from trial_adjust.io import Bindings, read_trial_csv, report_to_csv, report_to_json, write_report



def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def trial_csv(tmp_path, rng):
    n = 80
    arm = rng.permutation(np.repeat(["control", "treat"], n // 2))
    age = rng.normal(40, 10, n).round(1)
    race = rng.choice(["a", "b", "c", "d", "e"], n)
    eta = -0.5 + 0.8 * (arm == "treat") + 0.04 * (age - 40)
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(int)
    lines = ["y,arm,age,race"] + [f"{a},{b},{c},{d}" for a, b, c, d in zip(y, arm, age, race)]
    return _write(tmp_path / "trial.csv", "\n".join(lines) + "\n")


# --- CSV ingestion ---------------------------------------------------------------------------

def test_read_small_csv(tmp_path):
    p = _write(tmp_path / "t.csv", "y,a,w1\n1,x,0.5\n0,z,1.5\n1,x,-2\n")
    d = read_trial_csv(p, Bindings("y", "a", ("w1",)))
    assert (d.n, d.q, d.k) == (3, 1, 2)
    assert d.arm.tolist() == [1, 2, 1]
    assert d.arm_labels == ("x", "z")
    np.testing.assert_array_equal(d.w[:, 0], [0.5, 1.5, -2.0])


def test_missing_cell(tmp_path):
    p = _write(tmp_path / "t.csv", "y,a,w1\n1,x,0.5\n,z,1.5\n1,x,-2\n")
    with pytest.raises(MissingData):
        read_trial_csv(p, Bindings("y", "a", ("w1",)))
    p = _write(tmp_path / "u.csv", "y,a,w1\n1,x,NA\n0,z,1.5\n")
    with pytest.raises(MissingData):
        read_trial_csv(p, Bindings("y", "a", ("w1",)))


def test_single_arm_level(tmp_path):
    p = _write(tmp_path / "t.csv", "y,a\n1,x\n0,x\n")
    with pytest.raises(SchemaError):
        read_trial_csv(p, Bindings("y", "a", ()))


def test_schema_errors(tmp_path):
    p = _write(tmp_path / "t.csv", "y,a\n1,x\n0,z\n")
    with pytest.raises(SchemaError):
        read_trial_csv(p, Bindings("y", "a", ("w9",)))
    p = _write(tmp_path / "u.csv", "y,a\n2,x\n0,z\n")
    with pytest.raises(SchemaError):
        read_trial_csv(p, Bindings("y", "a", ()))
    read_trial_csv(p, Bindings("y", "a", ()), family="poisson")
    p = _write(tmp_path / "v.csv", "y,a\nyes,x\n0,z\n")
    with pytest.raises(NonNumeric):
        read_trial_csv(p, Bindings("y", "a", ()))


def test_five_level_factor_gives_four_columns(trial_csv):
    d = read_trial_csv(trial_csv, Bindings("y", "arm", ("age", "race")))
    assert d.q == 5
    assert d.covariate_names == ("age", "race[b]", "race[c]", "race[d]", "race[e]")
    # the lexicographically first level is the reference
    race = np.loadtxt(trial_csv, delimiter=",", skiprows=1, usecols=3, dtype=str)
    np.testing.assert_array_equal(d.w[:, 1:].sum(axis=1) == 0, race == "a")


def test_forced_categorical(tmp_path):
    p = _write(tmp_path / "t.csv", "y,a,site\n1,x,3\n0,z,1\n1,x,2\n0,z,1\n")
    d = read_trial_csv(p, Bindings("y", "a", ("site",), categorical=("site",)))
    assert d.covariate_names == ("site[2]", "site[3]")


# --- reports ---------------------------------------------------------------------------------

def _report(trial_csv, **kw):
    d = read_trial_csv(trial_csv, Bindings("y", "arm", ("age", "race")))
    return analyze_trial(d, AnalysisRequest(**kw))


def test_report_json_round_trip(trial_csv, tmp_path):
    rep = _report(trial_csv)
    path = write_report(rep, tmp_path / "r.json")
    back = json.loads(path.read_text())
    assert back == json.loads(report_to_json(rep))
    assert back["rows"][0]["estimate"] == rep["rows"][0]["estimate"]
    # proportions are unscaled in JSON
    assert abs(back["unadjusted"]["estimate"]) < 1.0


def test_report_csv_rows_and_scaling(trial_csv, tmp_path):
    rep = _report(trial_csv)
    text = write_report(rep, tmp_path / "r.csv").read_text()
    lines = text.strip().splitlines()
    assert len(lines) - 1 == 7 * 2 * 2 + 1
    header = lines[0].split(",")
    first = dict(zip(header, lines[2].split(",")))
    assert float(first["estimate"]) == pytest.approx(100 * rep["rows"][0]["estimate"])
    assert float(first["z"]) == pytest.approx(rep["rows"][0]["z"])


def test_relative_efficiency_recomputes_from_se(trial_csv):
    rep = _report(trial_csv)
    se0 = rep["unadjusted"]["se"]
    for row in rep["rows"]:
        assert row["status"] == "ok"
        assert abs(row["relative_efficiency"] - (1 - row["se"] ** 2 / se0 ** 2)) < 1e-12


def test_arm_only_analysis_matches_unadjusted(trial_csv):
    d = read_trial_csv(trial_csv, Bindings("y", "arm", ()))
    rep = analyze_trial(d, AnalysisRequest(estimators=("gc-mle", "gob-mle-c1")))
    for row in rep["rows"]:
        assert row["estimate"] == pytest.approx(rep["unadjusted"]["estimate"], abs=1e-12)


def test_report_metadata_and_diagnostics(trial_csv):
    rep = _report(trial_csv, model="stratified", estimators=("gc-mle", "gob-fc-c0"))
    meta = rep["metadata"]
    assert meta["arm_labels"] == ["control", "treat"]
    assert meta["parameters"] == 12
    assert set(rep["diagnostics"]) == {"mle", "firth"}
    assert rep["diagnostics"]["firth"]["separation_flagged"] is False
    assert len(meta["request_digest"]) == 16


def test_ratio_report_is_not_percent_scaled(trial_csv):
    rep = _report(trial_csv, contrast="ratio", estimators=("gc-mle",))
    lines = report_to_csv(rep).strip().splitlines()
    header = lines[0].split(",")
    row = dict(zip(header, lines[2].split(",")))
    assert float(row["estimate"]) == pytest.approx(rep["rows"][0]["estimate"])


# --- config documents -----------------------------------------------------------------------

def test_config_text_and_ranges():
    cfg = parse_config_text("preset = experiment-1\nreps = 50  # short\nadjusted_counts = 0..3, 6\n")
    assert cfg.reps == 50 and cfg.adjusted_counts == (0, 1, 2, 3, 6)
    assert cfg.n == 60


def test_config_json(tmp_path):
    p = _write(tmp_path / "c.json", json.dumps({"preset": "experiment-2", "reps": 7,
                                                 "kinds": ["gc-mle", "gob-fc-c1"]}))
    cfg = load_config(p)
    assert cfg.reps == 7 and cfg.kinds == ("gc-mle", "gob-fc-c1") and cfg.mode == "stratified"


@pytest.mark.parametrize("text,line,field", [
    ("preset = experiment-1\nreps = many\n", 2, "reps"),
    ("preset = experiment-1\ncolour = red\n", 2, "colour"),
    ("reps 5\n", 1, None),
    ("preset = experiment-1\nreps = 5\nreps = 6\n", 3, "reps"),
    ("preset = nope\n", 1, "preset"),
    ('{"reps": 5,\n "seed": }', 2, None),
])
def test_config_errors(text, line, field):
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert info.value.line == line
    assert info.value.field == field


# --- command line ----------------------------------------------------------------------------

def test_cli_analyze_json(trial_csv, tmp_path):
    out = tmp_path / "rep.json"
    code = main(["analyze", "--data", str(trial_csv), "--outcome", "y", "--arm", "arm",
                 "--covariates", "age,race", "--estimator", "gc-mle,gob-fc-c0",
                 "--variance", "adjusted", "--test", "wald", "--out", str(out)])
    assert code == EXIT_OK
    rep = json.loads(out.read_text())
    assert [r["estimator"] for r in rep["rows"]] == ["gc-mle", "gob-fc-c0"]


def test_cli_analyze_csv_stdout(trial_csv, capsys):
    code = main(["analyze", "--data", str(trial_csv), "--outcome", "y", "--arm", "arm",
                 "--all-covariates", "--estimator", "gc-fc", "--format", "csv",
                 "--treatment", "control", "--control", "treat"])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 + 1 + 4


@pytest.mark.parametrize("argv", [
    ["analyze", "--data", "missing.csv", "--outcome", "y", "--arm", "arm"],
    ["analyze", "--outcome", "y"],
    ["simulate", "--preset", "experiment-1"],
    ["frobnicate"],
])
def test_cli_user_errors(argv, capsys):
    assert main(argv) == EXIT_USER
    assert "error" in capsys.readouterr().err


def test_cli_bad_variance_flag(trial_csv):
    assert main(["analyze", "--data", str(trial_csv), "--outcome", "y", "--arm", "arm",
                 "--variance", "hc3"]) == EXIT_USER


def test_cli_malformed_config(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.cfg", "preset = experiment-1\nreps = -\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USER
    assert "line 2" in capsys.readouterr().err


def test_cli_internal_error_code(monkeypatch, trial_csv):
    import trial_adjust.cli as cli

    def boom(*a, **k):
        raise RuntimeError("unexpected")
    monkeypatch.setattr(cli, "analyze_trial", boom)
    assert main(["analyze", "--data", str(trial_csv), "--outcome", "y", "--arm", "arm"]) \
        == EXIT_INTERNAL


def _simulate(out, *extra):
    return main(["simulate", "--preset", "experiment-1", "--reps", "6", "--seed", "7",
                 "--out", str(out), *extra])


def test_cli_simulate_is_byte_identical(tmp_path):
    assert _simulate(tmp_path / "a", "--records") == EXIT_OK
    assert _simulate(tmp_path / "b", "--records", "--threads", "2") == EXIT_OK
    for name in ("summary.json", "summary.csv", "separation.csv", "replicates.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    doc = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert doc["config"]["seed"] == 7 and doc["truth"]["reps"] == 6


def test_cli_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("TRIAL_ADJUST_SEED", "7")
    assert main(["simulate", "--preset", "experiment-1", "--reps", "6",
                 "--out", str(tmp_path / "env")]) == EXIT_OK
    assert _simulate(tmp_path / "flag") == EXIT_OK
    a = (tmp_path / "env" / "summary.json").read_bytes()
    assert a == (tmp_path / "flag" / "summary.json").read_bytes()
    monkeypatch.setenv("TRIAL_ADJUST_SEED", "seven")
    assert main(["simulate", "--preset", "experiment-1", "--reps", "2",
                 "--out", str(tmp_path / "x")]) == EXIT_USER


def test_cli_simulate_percent_csv(tmp_path):
    assert _simulate(tmp_path / "p") == EXIT_OK
    doc = json.loads((tmp_path / "p" / "summary.json").read_text())
    lines = (tmp_path / "p" / "summary.csv").read_text().splitlines()
    header = lines[0].split(",")
    first = dict(zip(header, lines[1].split(",")))
    assert float(first["coverage"]) == pytest.approx(100 * doc["rows"][0]["coverage"])


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "trial_adjust", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "simulate" in res.stdout


# --- numba and numpy back ends ------------------------------------------------------------------

_BACKEND_SCRIPT = """
import json, numpy as np
from trial_adjust import _kernels
from trial_adjust.glm import TrialData, WorkingModelSpec, build_design, fit_firth, fit_mle
rng = np.random.default_rng(4)
out = []
for mode in ("pooled", "stratified"):
    arm = np.repeat([1, 2], 40)
    w = rng.normal(size=(80, 3))
    y = (rng.random(80) < 1 / (1 + np.exp(-(w @ [0.5, -0.4, 0.3] + 0.4 * arm)))).astype(float)
    des = build_design(TrialData(y=y, arm=arm, w=w), WorkingModelSpec(mode=mode))
    for fit in (fit_mle(des, y), fit_firth(des, y)):
        out.append(fit.beta.tolist() + fit.hat.tolist())
print(json.dumps({"jit": _kernels.USE_NUMBA, "values": out}))
"""


def _backend(flag):
    env = dict(os.environ, TRIAL_ADJUST_JIT=flag)
    res = subprocess.run([sys.executable, "-c", _BACKEND_SCRIPT], capture_output=True,
                         text=True, env=env, check=True)
    return json.loads(res.stdout)


def test_numba_and_numpy_kernels_agree():
    fast, plain = _backend("1"), _backend("0")
    assert plain["jit"] is False
    assert fast["jit"] is True
    for a, b in zip(fast["values"], plain["values"]):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)
