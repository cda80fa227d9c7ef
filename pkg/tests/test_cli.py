from __future__ import annotations

import io
import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest
from conftest import EDU_MODEL, SIM_MODEL

from pivsem.cli import InputError, main, parse_anchors, parse_types
from pivsem.simlab import benchmark_design, generate_dataset


@pytest.fixture(scope="module")
def files(tmp_path_factory, edu_data):
    d = tmp_path_factory.mktemp("cli")
    (d / "edu.txt").write_text(EDU_MODEL)
    edu_data.to_csv(d / "edu.csv", index=False)
    (d / "sim.txt").write_text(SIM_MODEL)
    generate_dataset(benchmark_design(), 500, rep=1).to_csv(d / "sim.csv", index=False)
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_parse_helpers():
    assert parse_types("y6=ordinal, y1=continuous") == {"y6": "ordinal", "y1": "continuous"}
    assert parse_anchors("madeg:1=12,3=16;padeg:2=0") == {"madeg": ((1, 12.0), (3, 16.0)), "padeg": ((2, 0.0),)}
    with pytest.raises(InputError):
        parse_types("y6=binary")
    with pytest.raises(InputError):
        parse_anchors("madeg:1=")


def test_fit_table(capsys, files):
    code, out, _ = run(capsys, "fit", "--model", files / "edu.txt", "--data", files / "edu.csv")
    assert code == 0
    assert out.startswith("Observations: 2000\n")
    assert "Parameter" in out and "Std.Err." in out and "R2_S" in out
    assert "tau[madeg,1]" in out and "MIIVs: madeg, padeg" in out


def test_fit_json_and_csv(capsys, files):
    types = "--types=" + ",".join(f"y{k}=ordinal" for k in range(6, 13))
    code, out, _ = run(capsys, "fit", "--model", files / "sim.txt", "--data", files / "sim.csv", types, "--format", "json")
    assert code == 0
    obj = json.loads(out)
    assert obj["schema_version"] == 1 and obj["n_obs"] == 500
    names = {p["name"] for p in obj["parameters"]}
    assert "lambda[y7,eta3]" in names and "tau[y6,4]" in names
    code, out, _ = run(capsys, "fit", "--model", files / "sim.txt", "--data", files / "sim.csv", types, "--format", "csv",
                       "--parameterization", "alternative")
    assert code == 0
    df = pd.read_csv(io.StringIO(out))
    assert list(df.columns) == ["parameter", "est", "se", "z", "r2_shea", "fixed"]
    assert df.set_index("parameter").loc["tau[y6,2]", "est"] == 1.0


def test_moments_round_trip(capsys, files, tmp_path):
    bundle = tmp_path / "m.json"
    code, direct, _ = run(capsys, "fit", "--model", files / "edu.txt", "--data", files / "edu.csv", "--format", "json",
                          "--moments-out", bundle)
    assert code == 0
    code, again, _ = run(capsys, "fit", "--model", files / "edu.txt", "--from-moments", bundle, "--format", "json")
    assert code == 0
    a = {p["name"]: p for p in json.loads(direct)["parameters"]}
    b = {p["name"]: p for p in json.loads(again)["parameters"]}
    assert a.keys() == b.keys()
    for k in a:
        assert abs(a[k]["est"] - b[k]["est"]) <= 1e-12
        assert (a[k]["se"] is None) == (b[k]["se"] is None)
        if a[k]["se"] is not None:
            assert abs(a[k]["se"] - b[k]["se"]) <= 1e-12


@pytest.mark.parametrize("fmt", ["json", "csv", "table"])
def test_moments_command(capsys, files, fmt):
    code, out, _ = run(capsys, "moments", "--model", files / "edu.txt", "--data", files / "edu.csv", "--format", fmt)
    assert code == 0
    if fmt == "json":
        assert json.loads(out)["schema_version"] == 1
    elif fmt == "csv":
        assert out.splitlines()[0].split(",")[1:] == ["madeg", "padeg", "chdeg", "maeduc", "paeduc", "cheduc"]
    else:
        assert "Sigma*" in out and "thresholds" in out


def test_missing_column_is_input_error(capsys, files, tmp_path):
    pd.read_csv(files / "edu.csv").drop(columns="padeg").to_csv(tmp_path / "bad.csv", index=False)
    code, _, err = run(capsys, "fit", "--model", files / "edu.txt", "--data", tmp_path / "bad.csv")
    assert code == 2
    assert "padeg" in err


@pytest.mark.parametrize(
    "argv_extra,expected",
    [
        (["--data", "nope.csv"], 2),
        (["--data", "EDU", "--types", "maeduc=ordinal"], 2),
        (["--data", "EDU", "--anchors", "madeg:1=16,3=12"], 2),
    ],
)
def test_input_errors(capsys, files, argv_extra, expected):
    argv = [str(files / "edu.csv") if a == "EDU" else a for a in argv_extra]
    code, _, err = run(capsys, "fit", "--model", files / "edu.txt", *argv)
    assert code == expected and err.startswith("error")


def test_syntax_error_exit_code(capsys, tmp_path, files):
    (tmp_path / "bad.txt").write_text("f =~ a +\n")
    code, _, err = run(capsys, "fit", "--model", tmp_path / "bad.txt", "--data", files / "edu.csv")
    assert code == 2 and "line 1" in err


def test_estimation_error_exit_code(capsys, tmp_path):
    rng = np.random.default_rng(0)
    pd.DataFrame(rng.normal(size=(50, 2)), columns=["a", "b"]).to_csv(tmp_path / "d.csv", index=False)
    (tmp_path / "m.txt").write_text("f =~ a + b\n")
    code, _, err = run(capsys, "fit", "--model", tmp_path / "m.txt", "--data", tmp_path / "d.csv")
    assert code == 1 and "[instruments]" in err


def test_console_script_entry_point(files):
    proc = subprocess.run([sys.executable, "-m", "pivsem.cli", "fit", "--model", str(files / "edu.txt"),
                           "--data", str(files / "edu.csv"), "--format", "json"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["n_obs"] == 2000


def test_simulate_smoke(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "--sizes", "3200", "--reps", "50", "--parameterization", "standard",
                       "--out", tmp_path / "res")
    assert code == 0
    assert "standard parameterization" in out and "N=3200" in out
    for f in ("summary.csv", "rates.csv", "parameters.csv", "shea.csv", "bias_table.txt"):
        assert (tmp_path / "res" / f).is_file()
    rates = pd.read_csv(tmp_path / "res" / "rates.csv")
    assert rates.nonconvergence_pct.iloc[0] == 0.0


def test_simulate_is_reproducible(capsys):
    def argv(seed):
        return ["simulate", "--sizes", "200", "--reps", "3", "--seed", seed, "--parameterization", "alternative",
                "--npd-policy", "include", "--format", "csv"]

    code, a, _ = run(capsys, *argv(7))
    code2, b, _ = run(capsys, *argv(7))
    assert code == code2 == 0 and a == b
    assert set(pd.read_csv(io.StringIO(a)).npd_policy) == {"include"}
    _, c, _ = run(capsys, *argv(8))
    assert c != a
