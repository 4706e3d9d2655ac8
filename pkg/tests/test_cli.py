"""Command line front end: configs, output files, exit codes."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from blowup import cli
from blowup.errors import NumericalOverflow

DATA = Path(__file__).parent / "data"
CONFIGS = Path(__file__).parent.parent / "configs"


def write_cfg(tmp_path, cfg, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return str(p)


def ode_cfg(out, **ode):
    block = dict(power=2, u0=1.0, schemes=["implicit"], algorithm=2, tau1=0.1,
                 ladder=dict(base=0.125, count=3))
    block.update(ode)
    return dict(mode="ode", output_dir=str(out), ode=block)


def read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_shipped_configs_validate():
    names = sorted(p.name for p in CONFIGS.glob("*.yaml"))
    assert len(names) >= 7
    for p in CONFIGS.glob("*.yaml"):
        assert cli.load_config(p)["mode"] in ("ode", "pde")


def test_ode_run_outputs(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["ode", "--config", write_cfg(tmp_path, ode_cfg(out))]) == 0
    rows = read(out / "ode_implicit.csv")
    assert [float(r["tol"]) for r in rows] == [1.0, 0.125, 0.015625]
    assert all(float(r["T"]) < 1.0 for r in rows)
    assert all(r["termination"] for r in rows)
    rates = read(out / "ode_rates.csv")
    assert rates[0]["scheme"] == "implicit" and float(rates[0]["r"]) > 0


def test_ode_single_tolerance_no_rate(tmp_path):
    out = tmp_path / "o"
    cfg = ode_cfg(out, ladder=None, tolerances=[0.01])
    del cfg["ode"]["ladder"]
    assert cli.main(["ode", "--config", write_cfg(tmp_path, cfg)]) == 0
    assert (out / "ode_implicit.csv").exists()
    assert not (out / "ode_rates.csv").exists()


def test_ode_coefficients_and_quadrature_blowup_time(tmp_path):
    # u' = 1 + u^2, u(0) = 0: T* = pi / 2
    out = tmp_path / "o"
    cfg = ode_cfg(out, coefficients=[1.0, 0.0, 1.0], u0=0.0)
    del cfg["ode"]["power"]
    assert cli.main(["ode", "--config", write_cfg(tmp_path, cfg)]) == 0
    rows = read(out / "ode_implicit.csv")
    assert all(float(r["T"]) < np.pi / 2 for r in rows)


def test_json_config_accepted(tmp_path):
    out = tmp_path / "o"
    p = tmp_path / "c.json"
    p.write_text(json.dumps(ode_cfg(out)))
    assert cli.main(["ode", "--config", str(p)]) == 0


@pytest.mark.parametrize("mutate", [
    lambda c: c.update(bogus=1),
    lambda c: c["ode"].update(colour="red"),
    lambda c: c["ode"].update(ladder=dict(base=0.5, count=0)),
    lambda c: c["ode"]["ladder"].update(steps=3),
    lambda c: c.update(mode="sde"),
    lambda c: c["ode"].update(tolerances=[-1.0]),
    lambda c: c["ode"].update(schemes=["rk4"]),
])
def test_bad_config_exit_1(tmp_path, mutate, capsys):
    cfg = ode_cfg(tmp_path / "o")
    mutate(cfg)
    assert cli.main(["ode", "--config", write_cfg(tmp_path, cfg)]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_file_and_usage_errors(tmp_path):
    assert cli.main(["ode", "--config", str(tmp_path / "nope.yaml")]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main([]) == 1
    cfg = ode_cfg(tmp_path / "o")
    assert cli.main(["pde", "--config", write_cfg(tmp_path, cfg)]) == 1


def test_overflow_exit_2(tmp_path, monkeypatch):
    def boom(cfg):
        raise NumericalOverflow("too large")
    monkeypatch.setattr(cli, "cmd_ode_run", boom)
    assert cli.main(["ode", "--config", write_cfg(tmp_path, ode_cfg(tmp_path / "o"))]) == 2


def test_output_env_override(tmp_path, monkeypatch):
    env_dir = tmp_path / "env"
    monkeypatch.setenv(cli.OUTPUT_ENV, str(env_dir))
    assert cli.main(["ode", "--config", write_cfg(tmp_path, ode_cfg(tmp_path / "cfg"))]) == 0
    assert (env_dir / "ode_implicit.csv").exists()
    assert not (tmp_path / "cfg").exists()


def test_ode_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["ode", "--config", write_cfg(tmp_path, ode_cfg(out))]) == 0
    for name in ("ode_implicit.csv", "ode_rates.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def pde_cfg(out, **adapt):
    ad = dict(p=2, gamma=30, grid=[4, 4], tau1=0.125, stol_plus=1e-2, max_level=1)
    ad.update(adapt)
    return dict(mode="pde", output_dir=str(out),
                pde=dict(problem="example1", tolerances=[1.0], adapt=ad, dump_fields=True))


def test_pde_run_outputs_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["pde", "--config", write_cfg(tmp_path, pde_cfg(out))]) == 0
    summary = read(a / "pde_summary.csv")
    assert len(summary) == 1 and summary[0]["reason"] == "no_delta"
    for name in ("pde_summary.csv", "pde_ledger_0.csv", "pde_steps_0.csv",
                 "pde_field_0_initial.csv", "pde_field_0_final.csv",
                 "pde_mesh_0_initial.csv", "pde_mesh_0_final.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    steps = read(a / "pde_steps_0.csv")
    assert int(summary[0]["N"]) == int(steps[-1]["k"])
    mesh = np.loadtxt(a / "pde_mesh_0_final.csv", delimiter=",", skiprows=1)
    assert np.sum(mesh[:, 2] * mesh[:, 3]) == pytest.approx(64.0)


def test_pde_zero_problem_horizon(tmp_path, capsys):
    out = tmp_path / "z"
    cfg = dict(mode="pde", output_dir=str(out),
               pde=dict(problem="zero", tolerances=[1.0], adapt=dict(p=1, t_end=1.0)))
    assert cli.main(["pde", "--config", write_cfg(tmp_path, cfg)]) == 0
    row = read(out / "pde_summary.csv")[0]
    assert row["reason"] == "horizon" and float(row["T"]) == 1.0
    assert float(row["linf"]) == 0.0


def test_pde_unknown_problem(tmp_path):
    cfg = pde_cfg(tmp_path / "o")
    cfg["pde"]["problem"] = "example9"
    assert cli.main(["pde", "--config", write_cfg(tmp_path, cfg)]) == 1


# ------------------------------------------------------------------ rates

def test_rates_reference_table(tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert cli.main(["rates", str(DATA / "reference_example1.csv"), "--last", "3",
                     "--out", str(out)]) == 0
    got = {r["quantity"]: float(r["value"]) for r in read(out)}
    assert abs(got["s"] - 0.5) <= 0.05
    assert abs(got["t_star"] - 0.21705) <= 5e-4
    assert "s = " in capsys.readouterr().out


def test_rates_roundtrip_ode(tmp_path):
    out = tmp_path / "o"
    cfg = ode_cfg(out, ladder=dict(base=0.125, count=5))
    assert cli.main(["ode", "--config", write_cfg(tmp_path, cfg)]) == 0
    r_file = float(read(out / "ode_rates.csv")[0]["r"])
    res = tmp_path / "r.csv"
    assert cli.main(["rates", str(out / "ode_implicit.csv"), "--blowup-time", "1",
                     "--out", str(res)]) == 0
    assert float(read(res)[0]["value"]) == pytest.approx(r_file, rel=1e-12)


def test_rates_time_series(tmp_path):
    ts, p = 0.3, 1.0
    t = np.array([0.0, 0.1, 0.2, 0.25])
    path = tmp_path / "s.csv"
    np.savetxt(path, np.c_[t, 2.0 / (ts - t) ** p], delimiter=",", header="t,linf",
               comments="")
    res = tmp_path / "r.csv"
    assert cli.main(["rates", str(path), "--out", str(res)]) == 0
    got = {r["quantity"]: float(r["value"]) for r in read(res)}
    assert got["t_star"] == pytest.approx(ts, rel=1e-12)
    assert got["C_N"] == pytest.approx(2.0, rel=1e-10)
    assert got["p_tail_mean"] == pytest.approx(1.0, rel=1e-10)


@pytest.mark.parametrize("content", ["a,b\n1,2\n", "N,linf\n3,x\n", "N,linf\n4,1\n4,2\n", ""])
def test_rates_bad_input(tmp_path, content):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    assert cli.main(["rates", str(path)]) == 1
