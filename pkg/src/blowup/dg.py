"""Discontinuous tensor-Legendre spaces on quadtree meshes.

Every active cell carries the ``(p+1)**2`` functions
``phi_ij(x, y) = L_i(xi) L_j(eta)`` where ``L_i`` is the Legendre polynomial
normalised on ``[-1, 1]`` and ``(xi, eta)`` are the affine reference
coordinates of the cell.  The basis is orthonormal on the reference square,
so the mass matrix of a cell is ``|K|/4`` times the identity.  Coefficients
of a field are stored as an ``(ncells, (p+1)**2)`` array with the local index
``b = i*(p+1) + j``.

Cross-mesh operations go through the overlay of two meshes: restricting a
cell polynomial to a descendant is exact (:func:`transfer_1d`), and the L2
projection of a piecewise polynomial onto a coarser cell is the area-weighted
sum of the transposed transfers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from numpy.polynomial import legendre as npleg

from .errors import AssemblyDegenerate
from .mesh import MeshForest, common_refinement

__all__ = [
    "DgSpace", "DgField", "ProblemData", "gauss_rule", "legendre_values",
    "transfer_1d", "l2_project_function", "l2_project_field", "inject",
    "restrict", "assemble_forms", "assemble_mass", "edge_jumps", "dump_field_csv",
]


# ------------------------------------------------------------ 1D tables

@lru_cache(maxsize=None)
def gauss_rule(n: int):
    """Gauss-Legendre nodes and weights on ``[-1, 1]`` (read-only arrays)."""
    x, w = npleg.leggauss(int(n))
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


@lru_cache(maxsize=None)
def _deriv_matrices(p: int):
    # rows: derivative order; maps orthonormal coefficients to Legendre series
    scale = np.sqrt((2 * np.arange(p + 1) + 1) / 2.0)
    d1 = np.zeros((p + 1, p + 1))
    d2 = np.zeros((p + 1, p + 1))
    for i in range(p + 1):
        e = np.zeros(p + 1)
        e[i] = scale[i]
        c1 = npleg.legder(e, 1) if i >= 1 else np.zeros(1)
        c2 = npleg.legder(e, 2) if i >= 2 else np.zeros(1)
        d1[: c1.size, i] = c1
        d2[: c2.size, i] = c2
    return scale, d1, d2


def legendre_values(p: int, x, deriv: int = 0) -> np.ndarray:
    """Orthonormal Legendre polynomials (or derivatives) at points ``x``.

    Returns an array of shape ``x.shape + (p+1,)``.
    """
    x = np.asarray(x, dtype=float)
    V = npleg.legvander(x, p)
    scale, d1, d2 = _deriv_matrices(p)
    if deriv == 0:
        return V * scale
    if deriv == 1:
        return V @ d1
    if deriv == 2:
        return V @ d2
    raise ValueError("deriv must be 0, 1 or 2")


def _tensor(px, py):
    # (..., p+1) x (..., p+1) -> (..., (p+1)**2) with b = i*(p+1) + j
    return (px[..., :, None] * py[..., None, :]).reshape(px.shape[:-1] + (-1,))


@lru_cache(maxsize=None)
def _volume_tables(p: int, n: int):
    """Values and reference derivatives of the 2D basis at an ``n x n`` rule.

    Point index ``q = qx*n + qy``.
    """
    x, w = gauss_rule(n)
    P0, P1, P2 = (legendre_values(p, x, d) for d in (0, 1, 2))
    X = np.repeat(x, n)
    Y = np.tile(x, n)
    W = np.outer(w, w).ravel()
    V = np.einsum("ai,bj->abij", P0, P0).reshape(n * n, -1)
    Vx = np.einsum("ai,bj->abij", P1, P0).reshape(n * n, -1)
    Vy = np.einsum("ai,bj->abij", P0, P1).reshape(n * n, -1)
    Vxx = np.einsum("ai,bj->abij", P2, P0).reshape(n * n, -1)
    Vyy = np.einsum("ai,bj->abij", P0, P2).reshape(n * n, -1)
    out = dict(X=X, Y=Y, W=W, V=V, Vx=Vx, Vy=Vy, Vxx=Vxx, Vyy=Vyy)
    for a in out.values():
        a.flags.writeable = False
    return out


@lru_cache(maxsize=None)
def _lattice(p: int):
    """Uniform ``(2p+3)**2`` sampling lattice on the reference square."""
    s = np.linspace(-1.0, 1.0, 2 * p + 3)
    P = legendre_values(p, s)
    V = np.einsum("ai,bj->abij", P, P).reshape(s.size ** 2, -1)
    V.flags.writeable = False
    return s, V


@lru_cache(maxsize=None)
def transfer_1d(p: int, d: int, off: int) -> np.ndarray:
    """Restriction of 1D orthonormal Legendre series to a dyadic sub-interval.

    The sub-interval is ``off``-th of ``2**d`` equal parts of ``[-1, 1]``.
    ``t[i, j]`` is the coefficient of child function ``i`` in parent
    function ``j`` restricted to the child, so ``c_child = t @ c_parent``
    holds exactly.
    """
    if d == 0:
        return np.eye(p + 1)
    s, w = gauss_rule(p + 1)
    n = 1 << d
    # child point s maps to parent coordinate -1 + (off + (s+1)/2) * 2/n
    x = -1.0 + (off + 0.5 * (s + 1.0)) * (2.0 / n)
    Pc = legendre_values(p, s)
    Pp = legendre_values(p, x)
    t = (Pc * w[:, None]).T @ Pp
    t.flags.writeable = False
    return t


# ------------------------------------------------------------- problem

def _zero2(x, y, t):
    z = np.zeros(np.broadcast(x, y).shape)
    return z, z


def _zero(x, y, t=0.0):
    return np.zeros(np.broadcast(x, y).shape)


@dataclass
class ProblemData:
    """Data of ``u_t - eps Lap u + a.grad u + f0 - u**2 = 0``, ``u = 0`` on the boundary.

    Parameters
    ----------
    eps : float
        Diffusion coefficient (> 0).
    velocity : callable ``(x, y, t) -> (ax, ay)``, optional
        Divergence-free convection field; zero when omitted.
    f0 : callable ``(x, y, t) -> array``, optional
        Forcing; zero when omitted.
    u0 : callable ``(x, y) -> array``
        Initial datum.
    gamma : float
        Interior penalty parameter.
    velocity_time_dependent : bool
        Whether ``velocity`` depends on ``t``.
    exact : callable ``(x, y, t) -> array``, optional
        Exact solution when known (manufactured problems).
    """

    eps: float = 1.0
    velocity: Optional[Callable] = None
    f0: Optional[Callable] = None
    u0: Callable = _zero
    gamma: float = 30.0
    velocity_time_dependent: bool = False
    exact: Optional[Callable] = None
    name: str = ""

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @property
    def has_convection(self) -> bool:
        return self.velocity is not None

    @property
    def has_forcing(self) -> bool:
        return self.f0 is not None

    def a(self, x, y, t):
        if self.velocity is None:
            return _zero2(x, y, t)
        ax, ay = self.velocity(x, y, t)
        shape = np.broadcast(x, y).shape
        return np.broadcast_to(ax, shape).astype(float), np.broadcast_to(ay, shape).astype(float)

    def forcing(self, x, y, t):
        if self.f0 is None:
            return _zero(x, y, t)
        return np.broadcast_to(self.f0(x, y, t), np.broadcast(x, y).shape).astype(float)

    def check_divergence(self, points, t: float = 0.0, h: float = 1e-5, tol: float = 1e-6):
        """Spot-check ``div a = 0`` by central differences at ``points``."""
        if self.velocity is None:
            return True
        x, y = np.asarray(points, dtype=float).T
        ax1, _ = self.a(x + h, y, t)
        ax0, _ = self.a(x - h, y, t)
        _, ay1 = self.a(x, y + h, t)
        _, ay0 = self.a(x, y - h, t)
        div = (ax1 - ax0 + ay1 - ay0) / (2 * h)
        return bool(np.all(np.abs(div) <= tol * (1 + np.abs(ax1) + np.abs(ay1))))


# --------------------------------------------------------------- space

@dataclass(frozen=True)
class _EdgeTraces:
    """Basis traces on the Gauss points of every edge of a mesh."""

    x: np.ndarray        # (nE, nq) physical points
    y: np.ndarray
    w: np.ndarray        # (nE, nq) physical weights (include h_E/2)
    Vm: np.ndarray       # (nE, nq, nb) minus-side values
    Vp: np.ndarray       # (nE, nq, nb) plus-side values (zero on boundary)
    Dm: np.ndarray       # (nE, nq, nb) minus-side normal derivatives
    Dp: np.ndarray
    interior: np.ndarray  # (nE,) bool


class DgSpace:
    """Broken tensor polynomials of degree ``p`` in each variable on a mesh."""

    def __init__(self, mesh: MeshForest, p: int):
        if int(p) < 0:
            raise ValueError("degree must be non-negative")
        self.mesh = mesh
        self.p = int(p)
        self.nb = (self.p + 1) ** 2
        self._cache = {}

    def __repr__(self):
        return f"DgSpace(p={self.p}, cells={len(self.mesh)})"

    @property
    def ncells(self) -> int:
        return len(self.mesh)

    @property
    def ndofs(self) -> int:
        return self.ncells * self.nb

    @cached_property
    def half(self) -> np.ndarray:
        """``(ncells, 2)`` half side lengths."""
        return 0.5 * self.mesh.sizes

    @cached_property
    def centers(self) -> np.ndarray:
        return self.mesh.centers

    @cached_property
    def jac(self) -> np.ndarray:
        """Determinant of the reference map, ``|K| / 4``."""
        return self.half[:, 0] * self.half[:, 1]

    @cached_property
    def mass_diag(self) -> np.ndarray:
        return np.repeat(self.jac, self.nb)

    def zero(self) -> "DgField":
        return DgField(self, np.zeros((self.ncells, self.nb)))

    def ref_coords(self, cells, x, y):
        c = self.centers[cells]
        h = self.half[cells]
        return (x - c[..., 0]) / h[..., 0], (y - c[..., 1]) / h[..., 1]

    def basis_at(self, cells, x, y) -> np.ndarray:
        """Basis values of ``cells`` at physical points (broadcast shapes)."""
        xi, eta = self.ref_coords(cells, x, y)
        return _tensor(legendre_values(self.p, xi), legendre_values(self.p, eta))

    def basis_grad_at(self, cells, x, y):
        xi, eta = self.ref_coords(cells, x, y)
        P0x, P1x = legendre_values(self.p, xi), legendre_values(self.p, xi, 1)
        P0y, P1y = legendre_values(self.p, eta), legendre_values(self.p, eta, 1)
        h = self.half[cells]
        gx = _tensor(P1x, P0y) / h[..., 0, None]
        gy = _tensor(P0x, P1y) / h[..., 1, None]
        return gx, gy

    def quad_points(self, n: int):
        """Physical Gauss points ``(ncells, n*n)`` and weights."""
        t = _volume_tables(self.p, n)
        c, h = self.centers, self.half
        X = c[:, 0, None] + h[:, 0, None] * t["X"]
        Y = c[:, 1, None] + h[:, 1, None] * t["Y"]
        W = self.jac[:, None] * t["W"]
        return X, Y, W

    def edge_traces(self, nq: Optional[int] = None) -> _EdgeTraces:
        nq = self.p + 2 if nq is None else int(nq)
        return self._edge_traces(nq)

    def _edge_traces(self, nq: int) -> _EdgeTraces:
        key = ("traces", nq)
        if key not in self._cache:
            self._cache[key] = self._build_traces(nq)
        return self._cache[key]

    def _build_traces(self, nq: int) -> _EdgeTraces:
        e = self.mesh.edges
        s, ws = gauss_rule(nq)
        pa = np.stack(self.mesh.to_physical(e.a[:, 0], e.a[:, 1]), axis=1)
        pb = np.stack(self.mesh.to_physical(e.b[:, 0], e.b[:, 1]), axis=1)
        mid = 0.5 * (pa + pb)
        half = 0.5 * (pb - pa)
        x = mid[:, 0, None] + half[:, 0, None] * s
        y = mid[:, 1, None] + half[:, 1, None] * s
        if np.any(e.length <= 0):
            raise AssemblyDegenerate("edge of zero length")
        w = (0.5 * e.length)[:, None] * ws
        interior = e.plus >= 0
        m = e.minus[:, None]
        Vm = self.basis_at(m, x, y)
        gx, gy = self.basis_grad_at(m, x, y)
        nx, ny = e.normal[:, 0, None, None], e.normal[:, 1, None, None]
        Dm = nx * gx + ny * gy
        pl = np.where(interior, e.plus, e.minus)[:, None]
        Vp = self.basis_at(pl, x, y)
        gx, gy = self.basis_grad_at(pl, x, y)
        Dp = nx * gx + ny * gy
        Vp[~interior] = 0.0
        Dp[~interior] = 0.0
        return _EdgeTraces(x, y, w, Vm, Vp, Dm, Dp, interior)

    def edge_lattice(self):
        """Basis traces on ``2p+3`` uniform points per edge (L-infinity sampling)."""
        if "lattice" not in self._cache:
            self._cache["lattice"] = self._build_edge_lattice()
        return self._cache["lattice"]

    def _build_edge_lattice(self):
        e = self.mesh.edges
        s = np.linspace(-1.0, 1.0, 2 * self.p + 3)
        pa = np.stack(self.mesh.to_physical(e.a[:, 0], e.a[:, 1]), axis=1)
        pb = np.stack(self.mesh.to_physical(e.b[:, 0], e.b[:, 1]), axis=1)
        mid, half = 0.5 * (pa + pb), 0.5 * (pb - pa)
        x = mid[:, 0, None] + half[:, 0, None] * s
        y = mid[:, 1, None] + half[:, 1, None] * s
        interior = e.plus >= 0
        Vm = self.basis_at(e.minus[:, None], x, y)
        Vp = self.basis_at(np.where(interior, e.plus, e.minus)[:, None], x, y)
        Vp[~interior] = 0.0
        return Vm, Vp


@dataclass
class DgField:
    """Coefficients of a broken polynomial on ``space``."""

    space: DgSpace
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.space.ncells, self.space.nb):
            c = c.reshape(self.space.ncells, self.space.nb)
        self.coeffs = c

    @property
    def mesh(self) -> MeshForest:
        return self.space.mesh

    @property
    def vector(self) -> np.ndarray:
        return self.coeffs.ravel()

    def copy(self) -> "DgField":
        return DgField(self.space, self.coeffs.copy())

    def __add__(self, other):
        _check_same(self, other)
        return DgField(self.space, self.coeffs + other.coeffs)

    def __sub__(self, other):
        _check_same(self, other)
        return DgField(self.space, self.coeffs - other.coeffs)

    def __mul__(self, s: float):
        return DgField(self.space, self.coeffs * float(s))

    __rmul__ = __mul__

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.coeffs)))

    def __call__(self, x, y):
        """Point evaluation (points on cell boundaries take one side)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        cells = self.mesh.locate(x.ravel(), y.ravel())
        V = self.space.basis_at(cells, x.ravel(), y.ravel())
        return np.einsum("qb,qb->q", V, self.coeffs[cells]).reshape(x.shape)

    def at_quad(self, n: int) -> np.ndarray:
        return self.coeffs @ _volume_tables(self.space.p, n)["V"].T

    # ---------------------------------------------------------- norms
    def l2_norm(self) -> float:
        return float(math.sqrt(np.sum(self.space.jac[:, None] * self.coeffs ** 2)))

    def cell_l2_sq(self) -> np.ndarray:
        return self.space.jac * np.sum(self.coeffs ** 2, axis=1)

    def h1_seminorm(self) -> float:
        """Broken ``(sum_K ||grad u||_K**2)**0.5``."""
        t = _volume_tables(self.space.p, self.space.p + 1)
        h = self.space.half
        gx = (self.coeffs @ t["Vx"].T) / h[:, 0, None]
        gy = (self.coeffs @ t["Vy"].T) / h[:, 1, None]
        W = self.space.jac[:, None] * t["W"]
        return float(math.sqrt(np.sum(W * (gx ** 2 + gy ** 2))))

    def lattice_values(self) -> np.ndarray:
        """Values on the ``(2p+3)**2`` uniform lattice of every cell."""
        _, V = _lattice(self.space.p)
        return self.coeffs @ V.T

    def cell_linf(self) -> np.ndarray:
        return np.abs(self.lattice_values()).max(axis=1)

    def linf_norm(self) -> float:
        """Sampled ``max |u|`` over the lattice points of every cell."""
        if self.space.ncells == 0:
            return 0.0
        return float(self.cell_linf().max())


def _check_same(a: DgField, b: DgField):
    if a.space.mesh != b.space.mesh or a.space.p != b.space.p:
        raise ValueError("fields live on different spaces")


# ----------------------------------------------------------- projections

def l2_project_function(space: DgSpace, g: Callable, n: Optional[int] = None) -> DgField:
    """Cellwise L2 projection of ``g(x, y)``.

    ``n`` Gauss points per direction, default ``2p + 3``; the projection is
    exact for polynomial ``g`` of degree up to ``3p + 5`` per variable.
    """
    n = 2 * space.p + 3 if n is None else int(n)
    t = _volume_tables(space.p, n)
    X, Y, _ = space.quad_points(n)
    vals = np.broadcast_to(np.asarray(g(X, Y), dtype=float), X.shape)
    # reference-orthonormal basis: c_b = sum_q w_q g_q phi_b(q)
    return DgField(space, (vals * t["W"]) @ t["V"])


def _relative(keys_fine, keys_coarse):
    """Level difference and child offsets of fine cells inside coarse cells."""
    lf, xf, yf = keys_fine.T
    lc, xc, yc = keys_coarse.T
    d = lf - lc
    return d, xf - (xc << d), yf - (yc << d)


def _transfer_groups(p, d, ox, oy):
    """Yield ``(index array, 2D transfer matrix)`` grouped by relative position."""
    key = np.stack([d, ox, oy], axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    for g, (dd, a, b) in enumerate(uniq):
        idx = np.nonzero(inv == g)[0]
        if dd == 0:
            yield idx, None
        else:
            T = np.kron(transfer_1d(p, int(dd), int(a)), transfer_1d(p, int(dd), int(b)))
            yield idx, T


def _keys(mesh: MeshForest) -> np.ndarray:
    return np.array(mesh.cells, dtype=np.int64).reshape(-1, 3)


def inject(field: DgField, fine: MeshForest, anc: Optional[np.ndarray] = None) -> np.ndarray:
    """Exact representation of ``field`` on a refinement ``fine`` of its mesh.

    Returns coefficients of shape ``(len(fine), nb)``.
    """
    src = field.mesh
    if fine == src:
        return field.coeffs.copy()
    if anc is None:
        anc = np.array([src.index(src.active_cover(k)) for k in fine.cells], dtype=np.int64)
    d, ox, oy = _relative(_keys(fine), _keys(src)[anc])
    out = np.empty((len(fine), field.space.nb))
    C = field.coeffs[anc]
    for idx, T in _transfer_groups(field.space.p, d, ox, oy):
        out[idx] = C[idx] if T is None else C[idx] @ T.T
    return out


def restrict(coeffs: np.ndarray, fine: MeshForest, target: DgSpace,
             anc: Optional[np.ndarray] = None) -> DgField:
    """L2 projection onto ``target`` of a field given on a refinement ``fine``."""
    coarse = target.mesh
    if fine == coarse:
        return DgField(target, np.array(coeffs, dtype=float, copy=True))
    if anc is None:
        anc = np.array([coarse.index(coarse.active_cover(k)) for k in fine.cells],
                       dtype=np.int64)
    d, ox, oy = _relative(_keys(fine), _keys(coarse)[anc])
    contrib = np.empty_like(coeffs)
    for idx, T in _transfer_groups(target.p, d, ox, oy):
        # child area fraction 4**-d
        contrib[idx] = coeffs[idx] if T is None else (coeffs[idx] @ T) * (0.25 ** d[idx])[:, None]
    out = np.zeros((coarse.__len__(), target.nb))
    np.add.at(out, anc, contrib)
    return DgField(target, out)


def l2_project_field(field: DgField, target: DgSpace, overlay=None) -> DgField:
    """L2 projection of a field onto a space on another mesh of the same forest."""
    if field.mesh == target.mesh and field.space.p == target.p:
        return DgField(target, field.coeffs.copy())
    if overlay is None:
        overlay = common_refinement(field.mesh, target.mesh)
    if overlay.mesh_a == field.mesh:
        anc_src, anc_dst = overlay.anc_a, overlay.anc_b
    else:
        anc_src, anc_dst = overlay.anc_b, overlay.anc_a
    fine = inject(field, overlay.mesh, anc_src)
    return restrict(fine, overlay.mesh, target, anc_dst)


# -------------------------------------------------------------- assembly

def assemble_mass(space: DgSpace) -> sp.dia_matrix:
    return sp.diags(space.mass_diag)


def _block_matrix(space, rows, cols, blocks):
    """Sum ``(nb x nb)`` blocks at cell positions into a CSR matrix."""
    nb = space.nb
    if len(rows) == 0:
        return sp.csr_matrix((space.ndofs, space.ndofs))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    blocks = np.concatenate(blocks, axis=0)
    r = (rows[:, None, None] * nb + np.arange(nb)[None, :, None])
    c = (cols[:, None, None] * nb + np.arange(nb)[None, None, :])
    r = np.broadcast_to(r, blocks.shape).ravel()
    c = np.broadcast_to(c, blocks.shape).ravel()
    A = sp.coo_matrix((blocks.ravel(), (r, c)), shape=(space.ndofs, space.ndofs))
    return A.tocsr()


@lru_cache(maxsize=None)
def _ref_stiffness(p: int):
    # int L_i' L_j' on [-1,1] for orthonormal Legendre
    x, w = gauss_rule(p + 1)
    P0 = legendre_values(p, x)
    P1 = legendre_values(p, x, 1)
    S = (P1 * w[:, None]).T @ P1
    M = (P0 * w[:, None]).T @ P0
    Sx = np.kron(S, M)
    Sy = np.kron(M, S)
    return Sx, Sy


def assemble_forms(space: DgSpace, data: ProblemData, t: float = 0.0):
    """Matrices of ``B(t; ., .)`` and ``K_h(., .)`` and the (diagonal) mass.

    Entry ``[i, j]`` is the form evaluated at trial function ``j`` and test
    function ``i``.

    Returns
    -------
    B, K : scipy.sparse.csr_matrix
    M : scipy.sparse.dia_matrix
    """
    p, nb = space.p, space.nb
    eps, gamma = float(data.eps), float(data.gamma)
    nc = space.ncells
    cells = np.arange(nc)
    rowsB, colsB, blkB = [], [], []
    rowsK, colsK, blkK = [], [], []

    # volume: eps grad u . grad v (exact for rectangles)
    Sx, Sy = _ref_stiffness(p)
    h = space.half
    fx = (eps * h[:, 1] / h[:, 0])[:, None, None]
    fy = (eps * h[:, 0] / h[:, 1])[:, None, None]
    vol = fx * Sx + fy * Sy
    if data.has_convection:
        n = p + 2
        tb = _volume_tables(p, n)
        X, Y, W = space.quad_points(n)
        ax, ay = data.a(X, Y, t)
        # - int a u . grad v
        gvx = tb["Vx"][None] / h[:, 0, None, None]
        gvy = tb["Vy"][None] / h[:, 1, None, None]
        adv = (ax * W)[:, :, None] * gvx + (ay * W)[:, :, None] * gvy  # (nc, nq, nb_test)
        vol = vol - np.einsum("cqi,qj->cij", adv, tb["V"])
    rowsB.append(cells), colsB.append(cells), blkB.append(vol)

    et = space.edge_traces()
    e = space.mesh.edges
    if len(e):
        interior = et.interior
        m, pl = e.minus, e.plus
        w = et.w
        pen = gamma * eps / e.length
        Vm, Vp, Dm, Dp = et.Vm, et.Vp, et.Dm, et.Dp
        # penalty: (u- - u+)(v- - v+)
        pw = (pen[:, None] * w)[:, :, None]
        Pmm = np.einsum("eqi,eqj->eij", Vm * pw, Vm)
        rowsB.append(m), colsB.append(m), blkB.append(Pmm)
        ii = np.nonzero(interior)[0]
        if ii.size:
            Pmp = -np.einsum("eqi,eqj->eij", (Vm * pw)[ii], Vp[ii])
            Ppp = np.einsum("eqi,eqj->eij", (Vp * pw)[ii], Vp[ii])
            rowsB += [m[ii], pl[ii], pl[ii]]
            colsB += [pl[ii], m[ii], pl[ii]]
            blkB += [Pmp, np.transpose(Pmp, (0, 2, 1)), Ppp]
        # consistency / symmetry: -{eps d_n u}(v- - v+) - {eps d_n v}(u- - u+)
        fac = np.where(interior, 0.5, 1.0) * eps
        ew = (fac[:, None] * w)[:, :, None]
        # T[test, trial] = - int avg(D u) jump(v)
        Tmm = -np.einsum("eqi,eqj->eij", Vm * ew, Dm)
        rowsK.append(m), colsK.append(m), blkK.append(Tmm + np.transpose(Tmm, (0, 2, 1)))
        if ii.size:
            Tmp = -np.einsum("eqi,eqj->eij", (Vm * ew)[ii], Dp[ii])    # test m, trial p
            Tpm = np.einsum("eqi,eqj->eij", (Vp * ew)[ii], Dm[ii])     # test p, trial m
            Tpp = np.einsum("eqi,eqj->eij", (Vp * ew)[ii], Dp[ii])
            # add transposes: (test m, trial p) gets Tpm^T, etc.
            rowsK += [m[ii], pl[ii], pl[ii]]
            colsK += [pl[ii], m[ii], pl[ii]]
            blkK += [Tmp + np.transpose(Tpm, (0, 2, 1)),
                     Tpm + np.transpose(Tmp, (0, 2, 1)),
                     Tpp + np.transpose(Tpp, (0, 2, 1))]
        if data.has_convection:
            ax, ay = data.a(et.x, et.y, t)
            an = ax * e.normal[:, 0, None] + ay * e.normal[:, 1, None]
            out_m = np.where(an >= 0, an, 0.0) * w        # minus side outflow
            out_p = np.where(an < 0, -an, 0.0) * w        # plus side outflow
            Umm = np.einsum("eqi,eqj->eij", Vm * out_m[:, :, None], Vm)
            rowsB.append(m), colsB.append(m), blkB.append(Umm)
            if ii.size:
                # minus outflow: an U- (v- - v+)
                Upm = -np.einsum("eqi,eqj->eij", (Vp * out_m[:, :, None])[ii], Vm[ii])
                # plus outflow: |an| U+ (v+ - v-)
                Upp = np.einsum("eqi,eqj->eij", (Vp * out_p[:, :, None])[ii], Vp[ii])
                Ump = -np.einsum("eqi,eqj->eij", (Vm * out_p[:, :, None])[ii], Vp[ii])
                rowsB += [pl[ii], pl[ii], m[ii]]
                colsB += [m[ii], pl[ii], pl[ii]]
                blkB += [Upm, Upp, Ump]
    B = _block_matrix(space, rowsB, colsB, blkB)
    K = _block_matrix(space, rowsK, colsK, blkK)
    return B, K, assemble_mass(space)


# ------------------------------------------------------------ edge data

def edge_jumps(space: DgSpace, coeffs: np.ndarray):
    """Per-edge jump data of a field with the given coefficients.

    Returns
    -------
    l2sq : ndarray
        ``||[u]||_E**2`` (boundary edges use the one-sided trace).
    linf : ndarray
        Sampled ``max |[u]|`` on each edge.
    """
    et = space.edge_traces()
    C = np.asarray(coeffs).reshape(space.ncells, space.nb)
    e = space.mesh.edges
    if len(e) == 0:
        return np.zeros(0), np.zeros(0)
    pl = np.where(et.interior, e.plus, e.minus)
    jq = np.einsum("eqb,eb->eq", et.Vm, C[e.minus]) - np.einsum("eqb,eb->eq", et.Vp, C[pl])
    l2sq = np.sum(et.w * jq ** 2, axis=1)
    Lm, Lp = space.edge_lattice()
    jl = np.einsum("eqb,eb->eq", Lm, C[e.minus]) - np.einsum("eqb,eb->eq", Lp, C[pl])
    return l2sq, np.abs(jl).max(axis=1)


# ------------------------------------------------------------------- io

def dump_field_csv(field: DgField, path) -> None:
    """Write ``x, y, value`` on the sampling lattice of every cell."""
    s, V = _lattice(field.space.p)
    X = np.repeat(s, s.size)
    Y = np.tile(s, s.size)
    c, h = field.space.centers, field.space.half
    px = c[:, 0, None] + h[:, 0, None] * X
    py = c[:, 1, None] + h[:, 1, None] * Y
    vals = field.coeffs @ V.T
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        for a, b, v in zip(px.ravel(), py.ravel(), vals.ravel()):
            w.writerow([f"{a:.17g}", f"{b:.17g}", f"{v:.17g}"])
