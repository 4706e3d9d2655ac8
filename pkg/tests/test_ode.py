"""ODE steppers, slab quantities, delta equation and the two drivers."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.optimize import brentq

from blowup import ode
from blowup.delta import delta_function, quadratic_delta, smallest_delta
from blowup.errors import DegenerateFit, ImplicitNoRoot, NoDelta
from blowup.ode import PolynomialOde, Scheme, Termination

SQ = PolynomialOde.power(2, 1.0)
CUBE = PolynomialOde.power(3, 1.0)
SCHEMES = list(Scheme)


# ----------------------------------------------------------------- data

def test_power_blowup_times():
    assert SQ.analytic_blowup_time == 1.0
    assert CUBE.analytic_blowup_time == 0.5
    assert PolynomialOde.power(2, 2.0).analytic_blowup_time == 0.5


def test_inconsistent_blowup_time_rejected():
    with pytest.raises(ValueError):
        PolynomialOde((0.0, 0.0, 1.0), 1.0, 0.9)


@pytest.mark.parametrize("coeffs", [(0.0, 1.0), (0.0, -1.0, 1.0), (0.0, 0.0, -1.0)])
def test_blowup_hypothesis_enforced(coeffs):
    with pytest.raises(ValueError):
        PolynomialOde(coeffs, 1.0)


def test_scheme_parse():
    assert Scheme.parse("ExplicitEuler") is Scheme.EXPLICIT
    assert Scheme.parse("implicit") is Scheme.IMPLICIT
    assert Scheme.parse("improved_euler") is Scheme.IMPROVED
    with pytest.raises(ValueError):
        Scheme.parse("rk4")


# ------------------------------------------------------------- stepping

def test_step_examples():
    assert ode.step("explicit", SQ, 1.0, 0.1) == pytest.approx(1.1, abs=1e-15)
    assert ode.step("implicit", SQ, 1.0, 0.1) == pytest.approx((1 - math.sqrt(0.6)) / 0.2,
                                                              rel=1e-14)
    assert ode.step("improved", SQ, 1.0, 0.1) == pytest.approx(1.1105, abs=1e-14)


def test_implicit_no_root():
    # tau U^2 - U + 1 = 0 has no real root when 4 tau > 1
    with pytest.raises(ImplicitNoRoot):
        ode.step("implicit", SQ, 1.0, 0.3)


def test_implicit_cubic_satisfies_equation():
    u = ode.step("implicit", CUBE, 1.0, 0.05)
    assert abs(0.05 * u ** 3 - u + 1.0) < 1e-13
    # closest root to u_prev
    roots = np.roots([0.05, 0.0, -1.0, 1.0])
    real = roots[np.abs(roots.imag) < 1e-12].real
    assert u == pytest.approx(real[np.argmin(np.abs(real - 1.0))], rel=1e-13)


@settings(max_examples=200, deadline=None)
@given(u=st.floats(0.0, 5.0), tau=st.floats(1e-4, 0.05))
def test_explicit_underestimates(u, tau):
    # Explicit Euler for u' = u^2 stays below the exact flow from the same start
    U = ode.step("explicit", SQ, u, tau)
    exact = u / (1.0 - tau * u)
    assert U <= exact * (1 + 1e-15)


# --------------------------------------------------------- slab pieces

def test_residual_integral_explicit_example():
    # oracle: adaptive quadrature of |U(s)^2 - 1| with U linear 1 -> 1.1
    ref, _ = quad(lambda s: abs((1.0 + s) ** 2 - 1.0), 0.0, 0.1, epsabs=1e-15)
    assert ref == pytest.approx(0.010333333333333333, rel=1e-12)
    val = ode.residual_integral(SQ, "explicit", 1.0, 1.1, 0.1)
    assert val == pytest.approx(0.010333333333333333, rel=1e-13)


def test_residual_integral_zero_cases():
    assert ode.residual_integral(SQ, "explicit", 0.0, 0.0, 0.1) == 0.0
    assert ode.residual_integral(SQ, "implicit", 2.0, 2.0, 0.1) == 0.0


@settings(max_examples=100, deadline=None)
@given(scheme=st.sampled_from(SCHEMES), u=st.floats(0.1, 3.0), tau=st.floats(1e-3, 0.05),
       p=st.sampled_from([2, 3]))
def test_residual_integral_matches_quadrature(scheme, u, tau, p):
    f = PolynomialOde.power(p, 1.0)
    try:
        un = ode.step(scheme, f, u, tau)
    except ImplicitNoRoot:
        return
    F = (un - u) / tau
    g = lambda s: f.poly(u + (un - u) * s / tau) - F
    # give the kink locations to the quadrature
    r = np.roots(np.polyfit(np.linspace(0, tau, p + 1), g(np.linspace(0, tau, p + 1)), p))
    kinks = sorted(x.real for x in r if abs(x.imag) < 1e-12 and 0 < x.real < tau)
    ref, _ = quad(lambda s: abs(g(s)), 0.0, tau, points=kinks or None,
                  epsabs=1e-15, epsrel=1e-12, limit=200)
    assert ode.residual_integral(f, scheme, u, un, tau) == pytest.approx(ref, rel=1e-8, abs=1e-14)


def test_growth_factor_examples():
    assert ode.growth_factor(SQ, 1.0, 1.1, 0.1) == pytest.approx(math.exp(0.21), rel=1e-14)
    assert ode.growth_factor(SQ, 0.0, 0.0, 0.1) == 1.0
    c, tau = 1.3, 0.02
    assert ode.growth_factor(CUBE, c, c, tau) == pytest.approx(math.exp(3 * c * c * tau), rel=1e-13)


def test_phi():
    assert ode.phi(0.0, 0.01) == 0.01
    assert ode.phi(0.02, 0.01) == pytest.approx(0.03)


# ------------------------------------------------------- delta equation

def _bisect_ode(c):
    return brentq(lambda x: c * x - math.log(x), 1.0 + 1e-15, 1.0 / c, xtol=1e-15)


def test_delta_example():
    assert _bisect_ode(0.05) == pytest.approx(1.0541, abs=5e-5)
    assert smallest_delta([0.05]) == pytest.approx(_bisect_ode(0.05), rel=1e-12)


def test_delta_tangency():
    # c = 1/e: c x = log x touches at x = e
    assert smallest_delta([1.0 / math.e]) == pytest.approx(math.e, rel=1e-6)


def test_nodelta_threshold_ode_sampled():
    # calculus oracle: c x - log x has a root above one iff c <= 1/e
    rng = np.random.default_rng(0)
    cs = np.concatenate([rng.uniform(1e-4, 1.0, 980),
                         1 / math.e + rng.uniform(-1e-6, 1e-6, 20)])
    for c in cs:
        exists = c <= 1.0 / math.e
        try:
            d = smallest_delta([c])
            got = True
            assert d > 1.0
            assert abs(delta_function([c], d)) < 1e-12
        except NoDelta:
            got = False
        assert got == exists, c


@settings(max_examples=100, deadline=None)
@given(c=st.floats(1e-4, 0.36))
def test_delta_root_minimal(c):
    d = smallest_delta([c])
    xs = np.linspace(1.0, d, 202)[1:-1]
    assert np.all(c * xs - np.log(xs) > 0.0)


def test_quadratic_delta():
    c = 0.1
    ref = brentq(lambda x: c * x * x - math.log(x), 1.0 + 1e-15, 1.0 / math.sqrt(2 * c))
    assert quadratic_delta(c) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(NoDelta):
        quadratic_delta(0.3)


def test_delta_cubic_coefficients():
    coeffs = [0.05, 0.02]
    d = smallest_delta(coeffs)
    assert abs(0.05 * d + 0.02 * d * d - math.log(d)) < 1e-12


def test_solve_delta_ode_consistent():
    u, un, tau = 1.0, 1.1, 0.1
    G = ode.growth_factor(SQ, u, un, tau)
    phi_k = ode.phi(0.0, ode.residual_integral(SQ, "explicit", u, un, tau))
    d = ode.solve_delta_ode(SQ, u, un, tau, G, phi_k)
    # f''/2 = 1 for u^2, so the coefficient is G phi tau
    assert d == pytest.approx(_bisect_ode(G * phi_k * tau), rel=1e-12)


# ---------------------------------------------------------------- drivers

@pytest.mark.parametrize("scheme", SCHEMES)
@pytest.mark.parametrize("algorithm", [1, 2])
def test_run_invariants(scheme, algorithm):
    runner = ode.run_algorithm1 if algorithm == 1 else ode.run_algorithm2
    res = runner(SQ, scheme, 0.1, 1e-3)
    assert res.termination is Termination.DELTA_FAILED
    assert res.steps == len(res.slabs)
    assert np.all(np.isfinite(res.records))
    tau = res.column("tau")
    assert math.isclose(tau.sum(), res.final_time, rel_tol=1e-12)
    assert res.final_time < SQ.analytic_blowup_time
    for s in res.slabs[:50]:
        assert s.growth >= 1.0
        assert s.delta > 1.0
        assert s.bound == s.delta * s.growth * s.phi
        assert s.t_end == s.t_start + s.tau


def test_tolerance_ledger_algorithm2():
    res = ode.run_algorithm2(SQ, "implicit", 0.1, 1e-2)
    tol = res.column("tol")
    G = res.column("growth")
    # tolerance in force on slab k is tol0 * prod_{j<k} G_j
    expect = 1e-2 * np.concatenate([[1.0], np.cumprod(G[:-1])])
    np.testing.assert_allclose(tol, expect, rtol=1e-12)


def test_algorithm1_fixed_tolerance():
    res = ode.run_algorithm1(SQ, "explicit", 0.1, 1e-2)
    assert np.all(res.column("tol") == 1e-2)
    assert np.all(res.column("residual_int") <= 1e-2)


def test_huge_tolerance_stops_early():
    res = ode.run_algorithm1(SQ, "explicit", 0.1, 1e6)
    assert res.steps < 20
    assert res.final_time < 1.0


def test_phi_chain():
    res = ode.run_algorithm1(SQ, "explicit", 0.1, 1e-2)
    s = res.slabs
    prev = 0.0
    for sl in s[:20]:
        assert sl.phi == pytest.approx(prev + sl.residual_int, rel=1e-14)
        prev = sl.bound


@pytest.mark.parametrize("scheme", SCHEMES)
def test_deterministic(scheme):
    a = ode.run_algorithm2(SQ, scheme, 0.1, 1e-3)
    b = ode.run_algorithm2(SQ, scheme, 0.1, 1e-3)
    assert np.array_equal(a.records, b.records)


def test_interpolant():
    res = ode.run_algorithm1(SQ, "explicit", 0.1, 1e-2)
    s = res.slabs[0]
    assert s.interpolant(s.t_start) == s.u_prev
    assert s.interpolant(s.t_end) == pytest.approx(s.u_next)


# --------------------------------------------------------------- rate fit

def test_fit_rate_exact():
    fit = ode.fit_rate([(0, 10, 0, 0.1), (0, 40, 0, 0.05), (0, 160, 0, 0.025)])
    assert fit.rate == pytest.approx(0.5, abs=1e-12)
    fit = ode.fit_rate([(0, 10, 0, 0.1), (0, 100, 0, 0.01)])
    assert fit.rate == pytest.approx(1.0, abs=1e-12)


def test_fit_rate_with_blowup_time():
    fit = ode.fit_rate([(0, 10, 0.9), (0, 100, 0.99)], blowup_time=1.0)
    assert fit.rate == pytest.approx(1.0, abs=1e-9)


def test_fit_rate_degenerate():
    with pytest.raises(DegenerateFit):
        ode.fit_rate([(0, 10, 0, 0.1), (0, 10, 0, 0.2)])
    with pytest.raises(DegenerateFit):
        ode.fit_rate([(0, 10, 0, 0.1)])


def test_rate_ladder_shapes():
    tols = [0.125 ** m for m in range(4)]
    samples, results = ode.rate_ladder(SQ, "implicit", tols)
    assert [s[0] for s in samples] == tols
    assert all(r.steps == 1 for r in results)
    Ns = [s[1] for s in samples]
    assert Ns == sorted(Ns)
