"""A posteriori estimators and the conditional error bound for the dG scheme.

The estimator of a slab ``(t^{k-1}, t^k]`` combines

* ``eta_S1`` elliptic residuals at the slab endpoints,
* ``eta_S2`` projection defects caused by mesh change,
* ``eta_T1`` time variation of the velocity,
* ``eta_S3``, ``eta_S4`` nonconformity (jump) terms,
* ``eta_T2`` time residual of the reaction,

integrated in time and fed into the recursion

    Phi_k = sqrt(Psi_{k-1}**2 + C int eta_A**2) + C int eta_B,
    Psi_k = delta_k G_k Phi_k,

where ``G_k = exp(int sigma)`` and ``delta_k`` is the smallest root above
one of ``c delta**2 = log delta``.  Constants ``C`` and ``C_GN`` default to 1,
so ``Psi`` is an estimator rather than a certified bound.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import lambertw

from .dg import DgField, DgSpace, ProblemData, _volume_tables, gauss_rule, inject
from .errors import NoDelta, NumericalOverflow
from .mesh import MeshForest

__all__ = [
    "EtaSlab", "BoundState", "SlabEstimator", "space_for", "eta_S1", "eta_S2",
    "eta_T1", "eta_S3", "eta_S4", "eta_T2", "eta_I", "jump_seminorm",
    "slab_integrals", "solve_delta_pde", "psi_update", "final_bound",
    "write_ledger", "LEDGER_COLUMNS",
]

_SPACES: dict = {}


def space_for(mesh: MeshForest, p: int) -> DgSpace:
    """Shared :class:`DgSpace` per mesh so edge tables are built once."""
    key = (mesh, p)
    sp = _SPACES.get(key)
    if sp is None:
        if len(_SPACES) > 16:
            _SPACES.pop(next(iter(_SPACES)))
        sp = _SPACES[key] = DgSpace(mesh, p)
    return sp


# ----------------------------------------------------------- eta_S1

def eta_S1(space: DgSpace, U: DgField, A: DgField, data: ProblemData, t: float):
    """Elliptic residual estimator and its per-cell attribution.

    Edge terms are split evenly between the two adjacent cells; boundary
    edges go to their cell.

    Returns
    -------
    value : float
    per_cell : ndarray
        ``eta_S1**2`` restricted to each cell; sums to ``value**2``.
    """
    p = space.p
    eps, gamma = float(data.eps), float(data.gamma)
    n = p + 2
    tb = _volume_tables(p, n)
    h = space.half
    C, Ac = U.coeffs, A.coeffs
    lap = (C @ tb["Vxx"].T) / h[:, 0, None] ** 2 + (C @ tb["Vyy"].T) / h[:, 1, None] ** 2
    r = Ac @ tb["V"].T + eps * lap
    if data.has_convection:
        X, Y, _ = space.quad_points(n)
        ax, ay = data.a(X, Y, t)
        gx = (C @ tb["Vx"].T) / h[:, 0, None]
        gy = (C @ tb["Vy"].T) / h[:, 1, None]
        r = r - (ax * gx + ay * gy)
    hK = space.mesh.diameters
    per_cell = (hK ** 2 / eps) * space.jac * (r ** 2 @ tb["W"])

    e = space.mesh.edges
    if len(e):
        et = space.edge_traces()
        pl = np.where(et.interior, e.plus, e.minus)
        um = np.einsum("eqb,eb->eq", et.Vm, C[e.minus])
        up = np.einsum("eqb,eb->eq", et.Vp, C[pl])
        dm = np.einsum("eqb,eb->eq", et.Dm, C[e.minus])
        dp = np.einsum("eqb,eb->eq", et.Dp, C[pl])
        jump = um - up
        hE = e.length
        val = (gamma * eps / hE) * np.sum(et.w * jump ** 2, axis=1)
        val += np.where(et.interior, eps * hE * np.sum(et.w * (dm - dp) ** 2, axis=1), 0.0)
        if data.has_convection:
            ax, ay = data.a(et.x, et.y, t)
            an = ax * e.normal[:, 0, None] + ay * e.normal[:, 1, None]
            val += (hE / eps) * np.sum(et.w * (an * jump) ** 2, axis=1)
        share = np.where(et.interior, 0.5, 1.0) * val
        np.add.at(per_cell, e.minus, share)
        np.add.at(per_cell, e.plus[et.interior], share[et.interior])
    return float(math.sqrt(per_cell.sum())), per_cell


def jump_seminorm(space: DgSpace, coeffs) -> float:
    """``sqrt(sum_E h_E ||[u]||_E**2)`` over all edges (boundary included)."""
    from .dg import edge_jumps
    l2sq, _ = edge_jumps(space, coeffs)
    return float(math.sqrt(np.sum(space.mesh.edges.length * l2sq))) if l2sq.size else 0.0


def eta_I(space0: DgSpace, u0, U0: DgField, n: Optional[int] = None) -> float:
    """Initial estimator ``sqrt(||u0 - U0||**2 + sum_E h_E ||[U0]||_E**2)``."""
    n = 2 * space0.p + 5 if n is None else int(n)
    tb = _volume_tables(space0.p, n)
    X, Y, W = space0.quad_points(n)
    err = np.asarray(u0(X, Y), dtype=float) - U0.coeffs @ tb["V"].T
    l2 = float(np.sum(W * err ** 2))
    return float(math.sqrt(l2 + jump_seminorm(space0, U0.coeffs) ** 2))


# ------------------------------------------------------- slab estimator

class SlabEstimator:
    """Time-dependent estimator pieces of one slab evaluated on the overlay.

    Parameters
    ----------
    state : SlabState
        Solved IMEX step carrying ``U``, ``A`` and ``A_prev``.
    data : ProblemData
    C : float
        Constant multiplying the jump term of ``sigma``.
    """

    def __init__(self, state, data: ProblemData, C: float = 1.0):
        self.state = state
        self.data = data
        self.C = float(C)
        ov = state.overlay
        src_prev = state.U_prev.mesh
        if ov.mesh_a == src_prev:
            anc_prev, anc_cur = ov.anc_a, ov.anc_b
        else:
            anc_prev, anc_cur = ov.anc_b, ov.anc_a
        self.mesh = ov.mesh
        p = state.space.p
        self.space = space_for(ov.mesh, p)
        self.tau = state.tau
        self.t0 = state.t_prev
        self.u0 = inject(state.U_prev, ov.mesh, anc_prev)
        self.u1 = inject(state.U, ov.mesh, anc_cur)
        self.pu0 = inject(state.PU_prev, ov.mesh, anc_cur)
        self.pf = inject(state.Pf, ov.mesh, anc_cur)
        self.a1 = inject(state.A, ov.mesh, anc_cur)
        self.a0 = (inject(state.A_prev, ov.mesh, anc_prev)
                   if state.A_prev is not None else np.zeros_like(self.u0))
        self._anc = (anc_prev, anc_cur)
        self._quad = None
        self._edges = None

    # -- helpers
    def weights(self, t):
        l1 = (t - self.t0) / self.tau
        return 1.0 - l1, l1

    def _q(self):
        if self._quad is None:
            p = self.space.p
            n = 2 * p + 1
            tb = _volume_tables(p, n)
            X, Y, W = self.space.quad_points(n)
            V = tb["V"].T
            self._quad = dict(n=n, X=X, Y=Y, W=W, u0=self.u0 @ V, u1=self.u1 @ V,
                              pu0=self.pu0 @ V, pf=self.pf @ V, dA=(self.a1 - self.a0) @ V)
            f0 = self.data.forcing(X, Y, self.t0)
            self._quad["f_prev"] = f0 - self._quad["u0"] ** 2
        return self._quad

    def _e(self):
        if self._edges is None:
            sp = self.space
            e = sp.mesh.edges
            if len(e) == 0:
                self._edges = None
                return None
            et = sp.edge_traces()
            pl = np.where(et.interior, e.plus, e.minus)

            def jumps(Vm, Vp, C):
                return (np.einsum("eqb,eb->eq", Vm, C[e.minus])
                        - np.einsum("eqb,eb->eq", Vp, C[pl]))

            Lm, Lp = sp.edge_lattice()
            _, V = _lattice_cache(sp.p)
            self._edges = dict(
                w=et.w, h=e.length,
                j0=jumps(et.Vm, et.Vp, self.u0), j1=jumps(et.Vm, et.Vp, self.u1),
                l0=jumps(Lm, Lp, self.u0), l1=jumps(Lm, Lp, self.u1),
                c0=self.u0 @ V.T, c1=self.u1 @ V.T,
                P=sp.mesh.patch_incidence,
            )
        return self._edges

    # -- pieces
    def eta_S2(self) -> float:
        q = self._q()
        defect = q["f_prev"] - q["pf"] - (q["u0"] - q["pu0"]) / self.tau
        hK = self.mesh.diameters
        return float(math.sqrt(np.sum((hK ** 2 / self.data.eps)[:, None] * q["W"] * defect ** 2)))

    def eta_T1(self, t: float) -> float:
        if not (self.data.has_convection and self.data.velocity_time_dependent):
            return 0.0
        q = self._q()
        l0, l1 = self.weights(t)
        X, Y = q["X"], q["Y"]
        ax, ay = self.data.a(X, Y, t)
        a0x, a0y = self.data.a(X, Y, self.t0)
        a1x, a1y = self.data.a(X, Y, self.t0 + self.tau)
        vx = l0 * (a0x - ax) * q["u0"] + l1 * (a1x - ax) * q["u1"]
        vy = l0 * (a0y - ay) * q["u0"] + l1 * (a1y - ay) * q["u1"]
        return float(math.sqrt(np.sum(q["W"] * (vx ** 2 + vy ** 2)) / self.data.eps))

    def eta_T2(self, t: float) -> float:
        q = self._q()
        l0, l1 = self.weights(t)
        uh = l0 * q["u0"] + l1 * q["u1"]
        f_t = self.data.forcing(q["X"], q["Y"], t) - uh ** 2
        r = q["f_prev"] - f_t + l0 * q["dA"]
        return float(math.sqrt(np.sum(q["W"] * r ** 2)))

    def jump_data(self, t: float):
        """Per-edge ``||[U_h(t)]||_E**2`` and sampled ``max |[U_h(t)]|``."""
        d = self._e()
        if d is None:
            return np.zeros(0), np.zeros(0)
        l0, l1 = self.weights(t)
        j = l0 * d["j0"] + l1 * d["j1"]
        lat = l0 * d["l0"] + l1 * d["l1"]
        return np.sum(d["w"] * j ** 2, axis=1), np.abs(lat).max(axis=1)

    def cell_linf(self, t: float) -> np.ndarray:
        d = self._e()
        l0, l1 = self.weights(t)
        if d is None:
            _, V = _lattice_cache(self.space.p)
            return np.abs((l0 * self.u0 + l1 * self.u1) @ V.T).max(axis=1)
        return np.abs(l0 * d["c0"] + l1 * d["c1"]).max(axis=1)

    def eta_S3(self, t: float) -> float:
        d = self._e()
        if d is None:
            return 0.0
        l2sq, linf = self.jump_data(t)
        P = d["P"]
        hl2 = d["h"] * l2sq
        patch_sum = P @ hl2
        patch_max = np.maximum.reduceat(linf[P.indices], P.indptr[:-1])
        sigma = 2.0 * self.cell_linf(t) + patch_max
        return float(math.sqrt(np.sum(sigma ** 2 * patch_sum)))

    def eta_S4(self) -> float:
        d = self._e()
        if d is None:
            return 0.0
        dj = (d["j1"] - d["j0"]) / self.tau
        return float(math.sqrt(np.sum(d["h"] * np.sum(d["w"] * dj ** 2, axis=1))))

    def sigma(self, t: float) -> float:
        """``2 ||U_h(t)||_inf + C ||[U_h(t)]||_inf`` (sampled)."""
        _, linf = self.jump_data(t)
        jmax = float(linf.max()) if linf.size else 0.0
        return 2.0 * float(self.cell_linf(t).max()) + self.C * jmax

    def jump_norm(self, t: float) -> float:
        l2sq, _ = self.jump_data(t)
        d = self._e()
        return 0.0 if d is None else float(math.sqrt(np.sum(d["h"] * l2sq)))


def _lattice_cache(p):
    from .dg import _lattice
    return _lattice(p)


# module-level forms of the slab pieces

def eta_S2(est: SlabEstimator) -> float:
    return est.eta_S2()


def eta_T1(est: SlabEstimator, t: float) -> float:
    return est.eta_T1(t)


def eta_S3(est: SlabEstimator, t: float) -> float:
    return est.eta_S3(t)


def eta_S4(est: SlabEstimator) -> float:
    return est.eta_S4()


def eta_T2(est: SlabEstimator, t: float) -> float:
    return est.eta_T2(t)


# ---------------------------------------------------------- integrals

@dataclass
class EtaSlab:
    """Time-integrated estimator data of one slab."""

    k: int
    t_prev: float
    tau: float
    s1_prev: float
    s1: float
    s2: float
    s4: float
    int_A2: float
    int_B: float
    int_sigma: float
    int_T2sq: float
    sigma_max: float
    jump_max: float
    eta_I: float = 0.0
    per_cell: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def G(self) -> float:
        if not self.int_sigma < 709.0:
            raise NumericalOverflow("growth factor overflows")
        return math.exp(self.int_sigma)


def _gauss_times(t0, tau, n):
    x, w = gauss_rule(n)
    return t0 + 0.5 * tau * (x + 1.0), 0.5 * tau * w


def slab_integrals(est: SlabEstimator, s1_prev: float, s1: float, k: int = 0,
                   per_cell=None, eta_init: float = 0.0) -> EtaSlab:
    """Integrate the estimator pieces over the slab.

    ``eta_A`` uses a 3-point Gauss rule (exact when the velocity is constant
    in time); ``eta_B``, ``sigma`` and ``eta_T2**2`` use 4 points.
    """
    t0, tau = est.t0, est.tau
    s2 = est.eta_S2()
    s4 = est.eta_S4()
    tA, wA = _gauss_times(t0, tau, 3)
    int_A2 = 0.0
    for t, w in zip(tA, wA):
        l0, l1 = est.weights(t)
        int_A2 += w * (l0 * s1_prev + l1 * s1 + s2 + est.eta_T1(t)) ** 2
    tB, wB = _gauss_times(t0, tau, 4)
    int_B = int_sig = int_T2 = 0.0
    sig_max = 0.0
    for t, w in zip(tB, wB):
        t2 = est.eta_T2(t)
        sig = est.sigma(t)
        int_B += w * (est.eta_S3(t) + s4 + t2)
        int_sig += w * sig
        int_T2 += w * t2 ** 2
        sig_max = max(sig_max, sig)
    jmax = max(est.jump_norm(t) for t in np.concatenate([[t0], tA, [t0 + tau]]))
    for t in (t0, t0 + tau):
        sig_max = max(sig_max, est.sigma(t))
    return EtaSlab(k, t0, tau, s1_prev, s1, s2, s4, int_A2, int_B, int_sig, int_T2,
                   sig_max, jmax, eta_init, per_cell)


# ---------------------------------------------------------- recursion

def solve_delta_pde(tau: float, G: float, Phi: float, eps: float = 1.0,
                    C_GN: float = 1.0) -> float:
    """Smallest root above one of ``c d**2 = log d``, ``c = C_GN**2 tau G**2 Phi**2 / eps``.

    The root is ``sqrt(-W0(-2c) / (2c))`` with ``W0`` the principal Lambert
    function; no root exists when ``c > 1/(2e)``.

    Raises
    ------
    NoDelta
    """
    c = C_GN ** 2 * tau * G ** 2 * Phi ** 2 / eps
    return delta_from_c(c)


def delta_from_c(c: float) -> float:
    if not (c >= 0.0 and math.isfinite(c)):
        raise NoDelta(f"invalid coefficient {c!r}")
    if c == 0.0:
        return 1.0
    if c > 1.0 / (2.0 * math.e):
        raise NoDelta(f"c = {c:.6g} exceeds 1/(2e)")
    z = -2.0 * c
    # scipy returns nan exactly at the branch point -1/e, where W = -1
    w = -1.0 if z <= -1.0 / math.e else lambertw(z, 0).real
    if not math.isfinite(w):
        w = -1.0
    d = math.sqrt(-w / (2.0 * c))
    # polish; the function is convex with its minimum at 1/sqrt(2c)
    top = 1.0 / math.sqrt(2.0 * c)
    for _ in range(3):
        g = c * d * d - math.log(d)
        dg = 2.0 * c * d - 1.0 / d
        if dg >= 0.0 or g == 0.0:
            break
        nd = d - g / dg
        if not (1.0 < nd <= top):
            break
        d = nd
    return max(min(d, top), 1.0 + 0.0)


def psi_update(prev: float, int_A2: float, int_B: float, delta: float, G: float,
               C: float = 1.0, first: bool = False):
    """One step of the bound recursion.

    ``prev`` is ``Psi_{k-1}``, or ``eta_I`` when ``first`` is set (then the
    square-root slot holds ``C eta_I**2``).

    Returns
    -------
    (Phi, Psi)
    """
    base = C * prev ** 2 if first else prev ** 2
    Phi = math.sqrt(base + C * int_A2) + C * int_B
    return Phi, delta * G * Phi


def final_bound(psi_N: float, jump_max: float) -> float:
    """``Psi_N`` plus the largest sampled jump seminorm of ``U_h(t)``."""
    return float(psi_N + jump_max)


@dataclass
class BoundState:
    """Running state of the bound recursion."""

    C: float = 1.0
    C_GN: float = 1.0
    eta_I: float = 0.0
    psi: float = 0.0
    k: int = 0
    jump_max: float = 0.0
    history: list = field(default_factory=list)

    def trial(self, slab: EtaSlab, eps: float):
        """``(Phi, G, delta, Psi)`` for ``slab`` without committing; may raise NoDelta."""
        G = slab.G
        first = self.k == 0
        prev = self.eta_I if first else self.psi
        Phi, _ = psi_update(prev, slab.int_A2, slab.int_B, 1.0, 1.0, self.C, first)
        delta = solve_delta_pde(slab.tau, G, Phi, eps, self.C_GN)
        return Phi, G, delta, delta * G * Phi

    def commit(self, slab: EtaSlab, Phi, G, delta, Psi):
        self.k += 1
        self.psi = Psi
        self.jump_max = max(self.jump_max, slab.jump_max)
        self.history.append(dict(k=slab.k, t=slab.t_prev + slab.tau, tau=slab.tau,
                                 eta_S1=slab.s1, int_A2=slab.int_A2, int_B=slab.int_B,
                                 sigma_max=slab.sigma_max, G=G, delta=delta, Phi=Phi,
                                 Psi=Psi))

    @property
    def bound(self) -> float:
        return final_bound(self.psi, self.jump_max)


LEDGER_COLUMNS = ["k", "t", "tau", "eta_S1", "int_A2", "int_B", "sigma_max", "G",
                  "delta", "Phi", "Psi"]


def write_ledger(rows, path) -> None:
    """Per-step estimator ledger as CSV with 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS)
        for r in rows:
            w.writerow([r["k"]] + [f"{float(r[c]):.17g}" for c in LEDGER_COLUMNS[1:]])
