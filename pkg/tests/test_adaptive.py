"""Space-time adaptive driver and the blow-up diagnostics."""

import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blowup.adaptive import (AdaptConfig, _marks, algorithm3_run, blowup_rate_sequence,
                             diagnose, extrapolate_tstar, fit_norm_growth)
from blowup.errors import ConfigError, DegenerateFit
from blowup.mesh import MeshForest
from blowup.problems import PROBLEMS

import support

DATA = Path(__file__).parent / "data"


def load_table(name):
    return np.genfromtxt(DATA / name, delimiter=",", names=True)


# ----------------------------------------------------------------- config

@pytest.mark.parametrize("kw", [dict(ttol_plus=0.0), dict(stol_plus=-1.0),
                                dict(ttol_plus=1.0, ttol_minus=2.0), dict(p=0),
                                dict(tau1=math.inf), dict(max_level=-1)])
def test_config_rejected(kw):
    with pytest.raises(ConfigError):
        AdaptConfig(**kw)


def test_config_defaults():
    cfg = AdaptConfig(ttol_plus=0.5, stol_plus=1e-3)
    assert cfg.ttol_minus == pytest.approx(0.005)
    assert cfg.stol_minus == pytest.approx(1e-9)
    assert len(cfg.initial_mesh()) == 16


# ---------------------------------------------------------------- marking

def test_marks_skip_capped_cells():
    mesh = MeshForest.uniform((0, 1, 0, 1), 2, max_level=1).refine([0])
    ind = np.full(len(mesh), 1.0)
    refine, coarsen = _marks(mesh, ind, 0.5, 1e-6)
    assert np.all(mesh.levels[refine] < mesh.max_level)
    assert set(refine) == set(np.nonzero(mesh.levels < 1)[0])
    assert coarsen.size == 0
    refine, coarsen = _marks(mesh, np.zeros(len(mesh)), 0.5, 1e-6)
    assert refine.size == 0 and coarsen.size == len(mesh)


# ------------------------------------------------------------ run ledger

@pytest.fixture(scope="module")
def run2():
    return support.example1_run(2)


def test_run_terminates_by_delta(run2):
    assert run2.reason == "no_delta"
    assert run2.terminal["c"] > 1 / (2 * math.e)
    assert run2.steps >= 2


def test_tolerance_ledger(run2):
    G = np.array([r.G for r in run2.records])
    ttp = np.array([r.ttol_plus for r in run2.records])
    stp = np.array([r.stol_plus for r in run2.records])
    np.testing.assert_allclose(ttp, 0.125 ** 2 * np.cumprod(G), rtol=1e-12)
    np.testing.assert_allclose(stp, 1e-4 * np.cumprod(G), rtol=1e-12)


def test_bound_ledger_invariants(run2):
    recs = run2.records[1:]
    psi = np.array([r.Psi for r in recs])
    assert np.all(np.diff(psi) >= 0)
    assert all(r.delta > 1 for r in recs)
    assert all(r.G >= 1 for r in recs)
    assert run2.bound >= psi[-1]


def test_times_and_steps(run2):
    t = run2.times
    tau = np.array([r.tau for r in run2.records[1:]])
    assert np.all(np.diff(t) > 0)
    assert math.isclose(tau.sum(), t[-1], rel_tol=1e-12)
    # the controller only halves or doubles the first step
    ratio = np.log2(tau / 0.125)
    np.testing.assert_allclose(ratio, np.round(ratio), atol=1e-12)
    assert len(run2.mesh_sizes) == len(run2.records)


def test_time_accuracy_per_step(run2):
    recs = run2.records[1:]
    assert all(r.int_T2sq <= rp.ttol_plus * (1 + 1e-12) or r.tau == recs[0].tau
               for rp, r in zip(run2.records[:-1], recs))


def test_callback_sees_every_step():
    data, box = PROBLEMS["example1"]()
    seen = []
    out = algorithm3_run(data, AdaptConfig(ttol_plus=1.0, box=box, p=2, stol_plus=1e-2,
                                           max_level=1), callback=seen.append)
    assert [r.k for r in seen] == list(range(1, out.steps + 1))


def test_rotation_symmetry():
    # radially symmetric datum: the adapted solution keeps the square's symmetries
    data, box = PROBLEMS["example1"]()
    out = algorithm3_run(data, AdaptConfig(ttol_plus=0.125, box=box, p=2, stol_plus=1e-3,
                                           max_level=2))
    U = out.U_final
    pts = np.random.default_rng(0).uniform(-3.9, 3.9, (300, 2))
    x, y = pts.T
    scale = U.linf_norm()
    for X, Y in ((y, x), (-x, y), (-y, x)):
        assert np.abs(U(x, y) - U(X, Y)).max() <= 1e-10 * scale


def test_zero_data_reaches_horizon():
    data, box = PROBLEMS["zero"]()
    out = algorithm3_run(data, AdaptConfig(box=box, p=1, t_end=1.0))
    assert out.reason == "horizon"
    assert out.final_time == 1.0
    assert out.bound == 0.0 and out.final_linf == 0.0


def test_deterministic():
    a = support.example1_run(0)
    data, box = PROBLEMS["example1"]()
    b = algorithm3_run(data, AdaptConfig(ttol_plus=1.0, box=box, **support.EXAMPLE1_ADAPT))
    assert [(r.t, r.linf, r.Psi) for r in a.records] == [(r.t, r.linf, r.Psi) for r in b.records]


# ------------------------------------------------------------ diagnostics

@settings(max_examples=100, deadline=None)
@given(ts=st.floats(0.1, 10.0), C=st.floats(0.1, 100.0), a=st.floats(0.1, 0.9),
       b=st.floats(0.91, 0.999))
def test_extrapolate_exact_family(ts, C, a, b):
    t1, t2 = a * ts, b * ts
    got, CN = extrapolate_tstar(t1, C / (ts - t1), t2, C / (ts - t2))
    assert got == pytest.approx(ts, rel=1e-9)
    assert CN == pytest.approx(C, rel=1e-8)


def test_extrapolate_reference_rows():
    ts, CN = extrapolate_tstar(0.21478, 496.885, 0.21549, 722.884)
    assert abs(ts - 0.21705) <= 5e-4
    assert CN > 0


def test_extrapolate_degenerate():
    with pytest.raises(DegenerateFit):
        extrapolate_tstar(0.1, 2.0, 0.2, 2.0)


@pytest.mark.parametrize("p", [1.0, 2.0, 0.5])
def test_rate_sequence_exact_family(p):
    ts = 0.3
    t = np.array([0.0, 0.1, 0.2, 0.25, 0.29])
    u = 3.0 / (ts - t) ** p
    np.testing.assert_allclose(blowup_rate_sequence(t, u, ts), p, rtol=1e-12)
    assert blowup_rate_sequence([0.0], [1.0], ts).size == 0
    with pytest.raises(DegenerateFit):
        blowup_rate_sequence(t, u, 0.2)


def test_fit_norm_growth_synthetic():
    N = np.array([3, 8, 19, 42, 92])
    assert fit_norm_growth(N, 5 * N ** 0.5) == pytest.approx(0.5, abs=1e-12)
    u = 5 * N ** 0.5
    u[0] *= 3
    assert fit_norm_growth(N, u, last=3) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(DegenerateFit):
        fit_norm_growth([4, 4], [1, 2])
    with pytest.raises(DegenerateFit):
        fit_norm_growth([4], [1])


@pytest.mark.parametrize("name", ["reference_example1.csv", "reference_example2.csv"])
def test_fit_norm_growth_reference_tables(name):
    tab = load_table(name)
    assert abs(fit_norm_growth(tab["N"], tab["linf"], last=3) - 0.5) <= 0.05


def test_diagnose_needs_two_steps():
    data, box = PROBLEMS["zero"]()
    out = algorithm3_run(data, AdaptConfig(box=box, p=1, t_end=0.125))
    with pytest.raises(DegenerateFit):
        diagnose(out)


def test_diagnose_run(run2):
    d = run2.diagnostics()
    assert d.t_star > run2.final_time
    assert d.p_sequence.size == run2.steps
    assert d.p_sequence[-1] == pytest.approx(1.0, rel=1e-9)
    assert d.N == run2.steps
