"""First-order IMEX time step for the dG semilinear problem.

Diffusion and convection are implicit, the reaction ``f(u) = f0 - u**2``
is explicit at the previous time level::

    (M/tau + B + K) U^k = M/tau P U^{k-1} - (f^{k-1}, v)

where ``P`` is the L2 projection onto the current space.  Because the basis
is orthonormal the load equals ``M P f^{k-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dg import (DgField, DgSpace, ProblemData, _volume_tables, assemble_forms,
                 inject, l2_project_function, restrict)
from .errors import NumericalOverflow, SolverFailure
from .mesh import common_refinement

__all__ = ["SlabState", "ImexStepper", "initial_field", "imex_step", "compute_A",
           "reaction_projection", "discrete_operator"]

SOLVE_RTOL = 1e-10
# systems up to this many unknowns are factorised, larger ones use Krylov
DIRECT_LIMIT = 6000


def _krylov(S, nb, symmetric):
    """Block-Jacobi preconditioned CG (symmetric) or BiCGSTAB/GMRES."""
    n = S.shape[0] // nb
    bsr = S.tobsr(blocksize=(nb, nb))
    rows = np.repeat(np.arange(n), np.diff(bsr.indptr))
    diag = rows == bsr.indices
    blocks = np.zeros((n, nb, nb))
    blocks[rows[diag]] = bsr.data[diag]
    inv = np.linalg.inv(blocks)
    P = spla.LinearOperator(S.shape, dtype=float,
                            matvec=lambda v: np.matmul(inv, v.reshape(n, nb, 1)).ravel())

    def solve(rhs, x0):
        tol = 1e-2 * SOLVE_RTOL
        if symmetric:
            x, info = spla.cg(S, rhs, x0=x0, M=P, rtol=tol, atol=0.0, maxiter=20000)
        else:
            x, info = spla.bicgstab(S, rhs, x0=x0, M=P, rtol=tol, atol=0.0, maxiter=20000)
            if info != 0:
                x, info = spla.gmres(S, rhs, x0=x, M=P, rtol=tol, atol=0.0,
                                     restart=200, maxiter=200)
        if info != 0:
            raise SolverFailure(f"Krylov solver did not converge (info={info})")
        return x

    return solve


def initial_field(space: DgSpace, u0) -> DgField:
    """L2 projection of the initial datum."""
    return l2_project_function(space, lambda x, y: u0(x, y))


def _reaction_points(p: int) -> int:
    # (U**2) v has degree 3p per variable
    return (3 * p) // 2 + 1


def reaction_projection(U_prev: DgField, target: DgSpace, data: ProblemData,
                        t_prev: float, overlay=None) -> DgField:
    """``P f^{k-1}`` with ``f^{k-1} = f0(t^{k-1}) - (U^{k-1})**2`` on ``target``.

    The square is integrated exactly on the common refinement of the two
    meshes; the forcing uses ``2p+3`` points per direction.
    """
    p = target.p
    if overlay is None:
        overlay = common_refinement(U_prev.mesh, target.mesh)
    anc_src, anc_dst = _anc(overlay, U_prev.mesh)
    fine = overlay.mesh
    sub = DgSpace(fine, p)
    n = _reaction_points(p)
    tb = _volume_tables(p, n)
    vals = inject(U_prev, fine, anc_src) @ tb["V"].T
    coeffs = -((vals ** 2) * tb["W"]) @ tb["V"]
    if data.has_forcing:
        f0 = l2_project_function(sub, lambda x, y: data.forcing(x, y, t_prev))
        coeffs = coeffs + f0.coeffs
    return restrict(coeffs, fine, target, anc_dst)


def _anc(overlay, mesh_src):
    if overlay.mesh_a == mesh_src:
        return overlay.anc_a, overlay.anc_b
    return overlay.anc_b, overlay.anc_a


def discrete_operator(space: DgSpace, data: ProblemData, t: float):
    """Sparse ``B + K`` and the diagonal of the mass matrix."""
    B, K, M = assemble_forms(space, data, t)
    return (B + K).tocsr(), space.mass_diag


@dataclass
class SlabState:
    """Everything one IMEX step produces on the slab ``(t^{k-1}, t^k]``.

    ``PU_prev`` and ``Pf`` are the projections of ``U^{k-1}`` and
    ``f^{k-1}`` onto the current space; ``A`` is the discrete elliptic
    operator applied to ``U``.
    """

    k: int
    t_prev: float
    tau: float
    U_prev: DgField
    space: DgSpace
    overlay: object
    PU_prev: DgField
    Pf: DgField
    U: Optional[DgField] = None
    A: Optional[DgField] = None
    A_prev: Optional[DgField] = None

    @property
    def t(self) -> float:
        return self.t_prev + self.tau


class ImexStepper:
    """IMEX stepper with cached operators and factorisations.

    Factorisations are reused for repeated ``(mesh, tau)`` pairs when the
    velocity does not depend on time.
    """

    def __init__(self, data: ProblemData, cache_size: int = 4):
        self.data = data
        self.cache_size = int(cache_size)
        self._ops = {}
        self._lu = {}

    def _key_t(self, t):
        return float(t) if self.data.velocity_time_dependent else None

    def operator(self, space: DgSpace, t: float):
        key = (space.mesh, space.p, self._key_t(t))
        if key not in self._ops:
            if len(self._ops) >= self.cache_size:
                self._ops.pop(next(iter(self._ops)))
            self._ops[key] = discrete_operator(space, self.data, t)
        return self._ops[key]

    def _system(self, space, t, tau):
        """System matrix and a solver callable ``(rhs, x0) -> x``."""
        key = (space.mesh, space.p, self._key_t(t), float(tau))
        if key in self._lu:
            return self._lu[key]
        if len(self._lu) >= self.cache_size:
            self._lu.pop(next(iter(self._lu)))
        L, m = self.operator(space, t)
        S = (sp.diags(m / tau) + L).tocsr()
        if space.ndofs <= DIRECT_LIMIT:
            try:
                lu = spla.splu(S.tocsc())
            except RuntimeError as exc:  # singular factor
                raise SolverFailure(str(exc)) from exc
            solver = lambda rhs, x0: lu.solve(rhs)
        else:
            solver = _krylov(S, space.nb, symmetric=not self.data.has_convection)
        self._lu[key] = (S, solver)
        return self._lu[key]

    def apply_operator(self, field: DgField, t: float) -> np.ndarray:
        L, _ = self.operator(field.space, t)
        return L @ field.vector

    def initial_A(self, U0: DgField, t0: float = 0.0) -> DgField:
        """``A^0`` defined by ``(A^0, v) = B(t^0; U^0, v) + K(U^0, v)``."""
        L, m = self.operator(U0.space, t0)
        return DgField(U0.space, (L @ U0.vector) / m)

    def prepare(self, k: int, U_prev: DgField, space: DgSpace, t_prev: float,
                tau: float) -> SlabState:
        overlay = common_refinement(U_prev.mesh, space.mesh)
        anc_src, anc_dst = _anc(overlay, U_prev.mesh)
        if U_prev.mesh == space.mesh:
            PU = U_prev.copy()
        else:
            PU = restrict(inject(U_prev, overlay.mesh, anc_src), overlay.mesh, space, anc_dst)
        Pf = reaction_projection(U_prev, space, self.data, t_prev, overlay)
        return SlabState(k, float(t_prev), float(tau), U_prev, space, overlay, PU, Pf)

    def solve(self, state: SlabState) -> DgField:
        space, tau = state.space, state.tau
        t = state.t
        L, m = self.operator(space, t)
        rhs = m * (state.PU_prev.vector / tau - state.Pf.vector)
        if not np.all(np.isfinite(rhs)):
            raise NumericalOverflow("non-finite right-hand side")
        S, solver = self._system(space, t, tau)
        x = solver(rhs, state.PU_prev.vector)
        if not np.all(np.isfinite(x)):
            raise NumericalOverflow("non-finite solution")
        scale = np.linalg.norm(rhs)
        if scale > 0 and np.linalg.norm(rhs - S @ x) > SOLVE_RTOL * scale:
            # one round of refinement before giving up
            x = x + solver(rhs - S @ x, np.zeros_like(x))
            if np.linalg.norm(rhs - S @ x) > SOLVE_RTOL * scale:
                raise SolverFailure("linear solve residual above tolerance")
        return DgField(space, x)

    def step(self, k: int, U_prev: DgField, space: DgSpace, t_prev: float,
             tau: float, A_prev: Optional[DgField] = None) -> SlabState:
        """Prepare, solve and compute ``A^k`` for one slab."""
        st = self.prepare(k, U_prev, space, t_prev, tau)
        st.U = self.solve(st)
        st.A = compute_A(st)
        st.A_prev = A_prev
        return st


def imex_step(state: SlabState, data: ProblemData,
              stepper: Optional[ImexStepper] = None) -> DgField:
    """Solve for ``U^k`` given a prepared slab state."""
    stepper = ImexStepper(data) if stepper is None else stepper
    return stepper.solve(state)


def compute_A(state: SlabState, check: bool = False, data: Optional[ProblemData] = None,
              rng=None, ntests: int = 10, rtol: float = 1e-8) -> DgField:
    """``A^k = -P f^{k-1} - (U^k - P U^{k-1}) / tau``.

    With ``check=True`` the identity ``(A^k, v) = B(U^k, v) + K(U^k, v)`` is
    tested on ``ntests`` random fields and a :class:`SolverFailure` raised
    if it is violated.
    """
    if state.U is None:
        raise ValueError("state has no solution yet")
    A = DgField(state.space, -state.Pf.coeffs - (state.U.coeffs - state.PU_prev.coeffs) / state.tau)
    if check:
        if data is None:
            raise ValueError("check requires the problem data")
        rng = np.random.default_rng(0) if rng is None else rng
        L, m = discrete_operator(state.space, data, state.t)
        LU = L @ state.U.vector
        mA = m * A.vector
        for _ in range(ntests):
            v = rng.standard_normal(state.space.ndofs)
            lhs, rhs = v @ mA, v @ LU
            if abs(lhs - rhs) > rtol * max(abs(rhs), np.abs(v).dot(np.abs(LU)), 1e-300):
                raise SolverFailure("A^k characterisations disagree")
    return A
