"""Shared drivers and oracles for the test suite.

Expensive runs are cached per session so that module tests and the
acceptance report share them.
"""

import math
from functools import lru_cache

import numpy as np

from blowup import ode
from blowup.adaptive import AdaptConfig, algorithm3_run
from blowup.dg import DgSpace, gauss_rule
from blowup.imex import ImexStepper, initial_field
from blowup.mesh import MeshForest
from blowup.problems import PROBLEMS, manufactured

# reference results for the Gaussian datum, first five ttol+ levels
REF_T = (0.09375, 0.125, 0.14844, 0.16406, 0.17969)
REF_N = (3, 8, 19, 42, 92)
REF_LINF = (12.244, 14.742, 18.556, 23.468, 32.108)

# Gaussian-datum desk settings: degree 5, penalty 30, 4x4 start, small spatial threshold
EXAMPLE1_ADAPT = dict(p=5, gamma=30.0, grid=(4, 4), tau1=0.125, stol_plus=1e-4, max_level=4)


def l2_error(U, exact, t, n=12):
    """``||exact(t) - U||`` by an ``n``-point tensor Gauss rule per cell."""
    x, w = gauss_rule(n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w).ravel()
    sp_ = U.space
    c, h = sp_.centers, sp_.half
    px = c[:, 0, None] + h[:, 0, None] * X.ravel()
    py = c[:, 1, None] + h[:, 1, None] * Y.ravel()
    cells = np.repeat(np.arange(sp_.ncells), X.size)
    V = sp_.basis_at(cells, px.ravel(), py.ravel())
    uh = np.einsum("qb,qb->q", V, U.coeffs[cells]).reshape(px.shape)
    return float(math.sqrt(np.sum(sp_.jac[:, None] * W * (exact(px, py, t) - uh) ** 2)))


def run_fixed(data, mesh, p, tau, nsteps, t0=0.0):
    """Uniform steps on a fixed mesh; returns the final field."""
    stepper = ImexStepper(data)
    space = DgSpace(mesh, p)
    U = initial_field(space, data.u0)
    t = t0
    for k in range(1, nsteps + 1):
        U = stepper.step(k, U, space, t, tau).U
        t += tau
    return U


def observed_orders(errors, factor=2.0):
    e = np.asarray(errors, dtype=float)
    return np.log(e[:-1] / e[1:]) / math.log(factor)


@lru_cache(maxsize=None)
def temporal_order(T=0.5, p=5, cells=4, steps=(8, 16, 32, 64)):
    data, box = manufactured(eps=1.0, decay=1.0)
    mesh = MeshForest.uniform(box, cells)
    errs = [l2_error(run_fixed(data, mesh, p, T / n, n), data.exact, T) for n in steps]
    return tuple(errs), tuple(observed_orders(errs))


@lru_cache(maxsize=None)
def spatial_order(p, cells=(2, 4, 8), tau=0.1, T=20.0):
    """Errors of the discrete steady state of a time-independent exact solution.

    With ``decay = 0`` the time error disappears once the iteration has
    converged, leaving the dG discretisation error alone.
    """
    data, box = manufactured(eps=1.0, decay=0.0)
    n = int(round(T / tau))
    errs = [l2_error(run_fixed(data, MeshForest.uniform(box, c), p, tau, n), data.exact, T)
            for c in cells]
    return tuple(errs), tuple(observed_orders(errs))


@lru_cache(maxsize=None)
def example1_run(m, **over):
    data, box = PROBLEMS["example1"]()
    kw = dict(EXAMPLE1_ADAPT)
    kw.update(over)
    cfg = AdaptConfig(ttol_plus=0.125 ** m, box=box, **kw)
    return algorithm3_run(data, cfg)


def centre_refined_mesh(box, levels=3, radius=2.5):
    """4x4 grid refined ``levels`` times on the cells centred within ``radius``."""
    mesh = MeshForest.uniform(box, 4, max_level=8)
    for _ in range(levels):
        c = mesh.centers
        mesh = mesh.refine(np.nonzero(np.hypot(c[:, 0], c[:, 1]) < radius)[0])
    return mesh


@lru_cache(maxsize=None)
def example1_uniform(nsteps, tau=1.0 / 32, p=5, levels=3):
    """Uniform steps on a fixed centre-refined mesh; returns (times, norms)."""
    data, box = PROBLEMS["example1"]()
    stepper = ImexStepper(data)
    space = DgSpace(centre_refined_mesh(box, levels), p)
    U = initial_field(space, data.u0)
    t, times, norms = 0.0, [0.0], [U.linf_norm()]
    for k in range(1, nsteps + 1):
        U = stepper.step(k, U, space, t, tau).U
        t += tau
        times.append(t)
        norms.append(U.linf_norm())
    return tuple(times), tuple(norms)


@lru_cache(maxsize=None)
def ode_rate(power, scheme, algorithm, count, last=None):
    f = ode.PolynomialOde.power(power, 1.0)
    tols = [0.125 ** m for m in range(count)]
    samples, results = ode.rate_ladder(f, scheme, tols, tau1=0.1, algorithm=algorithm)
    fit = ode.fit_rate(samples, f.analytic_blowup_time, last=last)
    return fit.rate, tuple(samples)


def fixed_bound_run(data, mesh, p, tau, nsteps, C=1.0):
    """Uniform steps on a fixed mesh with the full estimator recursion.

    Returns a dict of per-step times, L2 errors (when ``data.exact`` is
    set), ``Psi``, ``delta``, ``G``, the running final bound and the total
    ``int eta_T2**2``.
    """
    from blowup.estimator import BoundState, SlabEstimator, eta_I, eta_S1, slab_integrals

    stepper = ImexStepper(data)
    space = DgSpace(mesh, p)
    U = initial_field(space, data.u0)
    A = stepper.initial_A(U, 0.0)
    s1_prev, _ = eta_S1(space, U, A, data, 0.0)
    eI = eta_I(space, data.u0, U)
    bound = BoundState(C=C, C_GN=1.0, eta_I=eI)
    out = dict(t=[], err=[], psi=[], delta=[], G=[], bound=[], int_T2sq=0.0, eta_I=eI,
               err0=l2_error(U, data.exact, 0.0) if data.exact else None)
    t = 0.0
    for k in range(1, nsteps + 1):
        st = stepper.step(k, U, space, t, tau, A_prev=A)
        est = SlabEstimator(st, data, C)
        s1, cells = eta_S1(space, st.U, st.A, data, t + tau)
        slab = slab_integrals(est, s1_prev, s1, k, cells, eI if k == 1 else 0.0)
        Phi, G, delta, Psi = bound.trial(slab, data.eps)
        bound.commit(slab, Phi, G, delta, Psi)
        t += tau
        U, A, s1_prev = st.U, st.A, s1
        out["t"].append(t)
        out["psi"].append(Psi)
        out["delta"].append(delta)
        out["G"].append(G)
        out["bound"].append(bound.bound)
        out["int_T2sq"] += slab.int_T2sq
        if data.exact is not None:
            out["err"].append(l2_error(U, data.exact, t))
    return out


# ------------------------------------------------------------------ mesh

def check_invariants(mesh):
    assert mesh.covers_domain()
    assert mesh.is_one_irregular()
    h = mesh.sizes
    assert np.all(h[:, 0] == h[:, 1])  # square cells
    e = mesh.edges
    inner = e.plus >= 0
    assert np.all(e.minus[inner] != e.plus[inner])
    # interface lengths: every cell side is covered exactly once
    per_cell = np.zeros(len(mesh))
    np.add.at(per_cell, e.minus, e.length)
    np.add.at(per_cell, e.plus[inner], e.length[inner])
    np.testing.assert_allclose(per_cell, 4 * h[:, 0], rtol=1e-13)


def random_cycle(mesh, rng):
    n = len(mesh)
    r = rng.choice(n, size=rng.integers(0, max(1, n // 4) + 1), replace=False)
    c = rng.choice(n, size=rng.integers(0, n // 2 + 1), replace=False)
    return mesh.adapt(r, c)
