"""Quadtree forest of axis-aligned quadrilaterals with 1-irregular hanging nodes.

A cell is the key ``(level, ix, iy)``: the ``ix``-th column and ``iy``-th row
of the uniform ``m 2**level x n 2**level`` grid over the domain box.  The
level-0 cells are the roots of the forest.  Geometry is tracked on an
integer lattice of the finest admissible level so that every adjacency and
incidence test is exact.

Meshes are immutable; :meth:`MeshForest.refine` and
:meth:`MeshForest.coarsen` return new meshes sharing the same forest.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable

import numpy as np
import scipy.sparse as sp

__all__ = ["MeshForest", "EdgeSet", "CommonRefinement", "common_refinement",
           "MAX_LEVEL"]

MAX_LEVEL = 24
_SCALE = 1 << MAX_LEVEL

# side index -> (dx, dy); 0: -x, 1: +x, 2: -y, 3: +y
_DIRS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _parent(key):
    lev, i, j = key
    return (lev - 1, i >> 1, j >> 1)


def _children(key):
    lev, i, j = key
    return [(lev + 1, 2 * i + a, 2 * j + b) for b in (0, 1) for a in (0, 1)]


def _is_ancestor(anc, key):
    """True if ``anc`` is ``key`` or one of its ancestors."""
    d = key[0] - anc[0]
    return d >= 0 and (key[1] >> d) == anc[1] and (key[2] >> d) == anc[2]


@dataclass(frozen=True)
class EdgeSet:
    """Edges of an active mesh, one entry per geometric interface.

    Long edges carrying a hanging node are split into the sub-edges shared
    with the finer neighbours.  For boundary edges ``plus`` is ``-1``.

    Attributes
    ----------
    minus, plus : ndarray of int
        Adjacent cell indices; the normal points from ``minus`` to ``plus``.
    axis : ndarray of int
        0 for edges on lines ``x = const`` (normal along x), 1 otherwise.
    normal : ndarray, shape (n, 2)
        Unit normal, outward from ``minus``.
    a, b : ndarray, shape (n, 2)
        Endpoints (integer lattice units).
    length : ndarray
        ``h_E`` in physical units.
    """

    minus: np.ndarray
    plus: np.ndarray
    axis: np.ndarray
    normal: np.ndarray
    a: np.ndarray
    b: np.ndarray
    length: np.ndarray

    def __len__(self):
        return len(self.minus)

    @property
    def interior(self) -> np.ndarray:
        return self.plus >= 0

    @property
    def boundary(self) -> np.ndarray:
        return self.plus < 0


class MeshForest:
    """Active cells of a quadtree forest over ``[x0, x1] x [y0, y1]``.

    Parameters
    ----------
    box : tuple of float
        ``(x0, x1, y0, y1)``.
    m, n : int
        Number of root cells in x and y.
    cells : iterable of tuple, optional
        Active cell keys; defaults to the root grid.
    max_level : int, optional
        Refinement cap; marked cells at this level are left alone.
    """

    def __init__(self, box, m: int, n: int, cells: Iterable | None = None,
                 max_level: int = 12):
        self.box = tuple(float(v) for v in box)
        self.m, self.n = int(m), int(n)
        if not (self.box[1] > self.box[0] and self.box[3] > self.box[2]):
            raise ValueError("empty domain box")
        if self.m < 1 or self.n < 1:
            raise ValueError("need at least one root cell per direction")
        self.max_level = min(int(max_level), MAX_LEVEL)
        if cells is None:
            cells = [(0, i, j) for j in range(self.n) for i in range(self.m)]
        self.cells = tuple(sorted(set(cells)))
        self._index = {c: k for k, c in enumerate(self.cells)}

    # ------------------------------------------------------------ basics
    @classmethod
    def uniform(cls, box, m: int, n: int | None = None, level: int = 0,
                max_level: int = 12) -> "MeshForest":
        n = m if n is None else n
        cells = [(level, i, j) for j in range(n << level) for i in range(m << level)]
        return cls(box, m, n, cells, max_level=max_level)

    def __len__(self):
        return len(self.cells)

    def __eq__(self, other):
        return (isinstance(other, MeshForest) and self.box == other.box
                and (self.m, self.n) == (other.m, other.n)
                and self.cells == other.cells)

    def __hash__(self):
        return hash((self.box, self.m, self.n, self.cells))

    def same_forest(self, other: "MeshForest") -> bool:
        return self.box == other.box and (self.m, self.n) == (other.m, other.n)

    def with_cells(self, cells) -> "MeshForest":
        return MeshForest(self.box, self.m, self.n, cells, self.max_level)

    def index(self, key) -> int:
        return self._index[key]

    def __contains__(self, key):
        return key in self._index

    @property
    def root_size(self):
        return ((self.box[1] - self.box[0]) / self.m, (self.box[3] - self.box[2]) / self.n)

    @cached_property
    def levels(self) -> np.ndarray:
        return np.array([c[0] for c in self.cells], dtype=np.int64)

    @cached_property
    def lattice_boxes(self) -> np.ndarray:
        """``(ncells, 4)`` integer boxes ``(i0, i1, j0, j1)`` on the finest lattice."""
        c = np.array(self.cells, dtype=np.int64).reshape(-1, 3)
        s = _SCALE >> c[:, 0]
        return np.stack([c[:, 1] * s, (c[:, 1] + 1) * s, c[:, 2] * s, (c[:, 2] + 1) * s], axis=1)

    def to_physical(self, lattice_x, lattice_y):
        hx, hy = self.root_size
        return (self.box[0] + np.asarray(lattice_x) * (hx / _SCALE),
                self.box[2] + np.asarray(lattice_y) * (hy / _SCALE))

    @cached_property
    def boxes(self) -> np.ndarray:
        """``(ncells, 4)`` physical boxes ``(x0, x1, y0, y1)``."""
        lb = self.lattice_boxes
        x0, y0 = self.to_physical(lb[:, 0], lb[:, 2])
        x1, y1 = self.to_physical(lb[:, 1], lb[:, 3])
        return np.stack([x0, x1, y0, y1], axis=1)

    @cached_property
    def sizes(self) -> np.ndarray:
        """``(ncells, 2)`` side lengths ``(hx, hy)``."""
        b = self.boxes
        return np.stack([b[:, 1] - b[:, 0], b[:, 3] - b[:, 2]], axis=1)

    @cached_property
    def diameters(self) -> np.ndarray:
        return np.hypot(self.sizes[:, 0], self.sizes[:, 1])

    @cached_property
    def areas(self) -> np.ndarray:
        return self.sizes[:, 0] * self.sizes[:, 1]

    @property
    def centers(self) -> np.ndarray:
        b = self.boxes
        return np.stack([(b[:, 0] + b[:, 1]) / 2, (b[:, 2] + b[:, 3]) / 2], axis=1)

    def _in_domain(self, key) -> bool:
        lev, i, j = key
        return 0 <= i < (self.m << lev) and 0 <= j < (self.n << lev)

    def active_cover(self, key):
        """Active cell equal to or containing ``key``, or ``None``."""
        k = key
        while k[0] >= 0:
            if k in self._index:
                return k
            if k[0] == 0:
                return None
            k = _parent(k)
        return None

    def locate(self, x, y) -> np.ndarray:
        """Indices of the active cells containing the points (x, y)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        hx, hy = self.root_size
        lx = np.clip(((x - self.box[0]) / hx * _SCALE).astype(np.int64), 0, self.m * _SCALE - 1)
        ly = np.clip(((y - self.box[2]) / hy * _SCALE).astype(np.int64), 0, self.n * _SCALE - 1)
        out = np.empty(x.shape, dtype=np.int64)
        for q in range(x.size):
            for lev in range(MAX_LEVEL + 1):
                key = (lev, int(lx.flat[q] >> (MAX_LEVEL - lev)), int(ly.flat[q] >> (MAX_LEVEL - lev)))
                if key in self._index:
                    out.flat[q] = self._index[key]
                    break
            else:  # pragma: no cover - partition property guarantees a hit
                raise RuntimeError("point not covered by the mesh")
        return out

    # ------------------------------------------------------- neighbours
    def neighbours(self, key, side: int):
        """Active cells across ``side`` of active cell ``key``.

        Returns ``[]`` on the domain boundary, ``[coarser_or_equal]`` or the
        list of finer cells touching that side.
        """
        lev, i, j = key
        dx, dy = _DIRS[side]
        nb = (lev, i + dx, j + dy)
        if not self._in_domain(nb):
            return []
        cover = self.active_cover(nb)
        if cover is not None:
            return [cover]
        # finer: descend along the shared side
        out = []
        stack = [nb]
        while stack:
            k = stack.pop()
            if k in self._index:
                out.append(k)
                continue
            for c in _children(k):
                # keep children adjacent to the shared side
                if side == 0 and (c[1] & 1) == 0:
                    continue
                if side == 1 and (c[1] & 1) == 1:
                    continue
                if side == 2 and (c[2] & 1) == 0:
                    continue
                if side == 3 and (c[2] & 1) == 1:
                    continue
                stack.append(c)
        return sorted(out)

    def is_one_irregular(self) -> bool:
        """Edge-adjacent active cells differ by at most one level."""
        for key in self.cells:
            for side in range(4):
                for nb in self.neighbours(key, side):
                    if abs(nb[0] - key[0]) > 1:
                        return False
        return True

    def covers_domain(self, rtol: float = 1e-12) -> bool:
        """Partition check: total area matches the box and no overlaps."""
        area = (self.box[1] - self.box[0]) * (self.box[3] - self.box[2])
        if abs(self.areas.sum() - area) > rtol * area:
            return False
        for key in self.cells:
            k = key
            while k[0] > 0:
                k = _parent(k)
                if k in self._index:
                    return False
        return True

    # ------------------------------------------------------- adaptation
    def refine(self, cells) -> "MeshForest":
        """Split the given active cells, adding closure refinements.

        Cells at ``max_level`` are skipped.  Neighbours that would become
        two levels coarser than a new child are refined first, recursively.
        """
        active = set(self.cells)
        todo = sorted(set(self._as_keys(cells)))

        def split(key):
            if key not in active:
                return
            lev, i, j = key
            for side in range(4):
                dx, dy = _DIRS[side]
                nb = (lev, i + dx, j + dy)
                if not (0 <= nb[1] < (self.m << lev) and 0 <= nb[2] < (self.n << lev)):
                    continue
                k = nb
                while k not in active and k[0] > 0:
                    k = _parent(k)
                if k in active and k[0] < lev:
                    split(k)
            active.remove(key)
            active.update(_children(key))

        for key in todo:
            if key in active and key[0] < self.max_level:
                split(key)
        return self.with_cells(active)

    def coarsen(self, cells) -> "MeshForest":
        """Merge sibling quadruples that are all marked.

        A merge is skipped when it would put the parent next to a cell two
        levels finer.
        """
        marked = set(self._as_keys(cells)) & set(self.cells)
        parents = sorted({_parent(c) for c in marked if c[0] > 0})
        active = set(self.cells)
        for par in parents:
            kids = _children(par)
            if not all(k in marked and k in active for k in kids):
                continue
            if not self._can_merge(par, active):
                continue
            active.difference_update(kids)
            active.add(par)
        return self.with_cells(active)

    def _can_merge(self, par, active) -> bool:
        lev, i, j = par
        # cells across each side of the parent at the children's level must
        # be active or covered by a coarser active cell
        for side in range(4):
            dx, dy = _DIRS[side]
            nb = (lev, i + dx, j + dy)
            if not (0 <= nb[1] < (self.m << lev) and 0 <= nb[2] < (self.n << lev)):
                continue
            for c in _children(nb):
                if side == 0 and (c[1] & 1) == 0:
                    continue
                if side == 1 and (c[1] & 1) == 1:
                    continue
                if side == 2 and (c[2] & 1) == 0:
                    continue
                if side == 3 and (c[2] & 1) == 1:
                    continue
                k = c
                while k not in active and k[0] > 0:
                    k = _parent(k)
                if k not in active:
                    # c is subdivided further
                    return False
        return True

    def adapt(self, refine_cells, coarsen_cells) -> "MeshForest":
        """Coarsen then refine; cells marked for both are refined."""
        refine_keys = set(self._as_keys(refine_cells))
        coarse_keys = set(self._as_keys(coarsen_cells)) - refine_keys
        # never coarsen a quadruple that has a sibling marked for refinement
        out = self.coarsen(coarse_keys) if coarse_keys else self
        refine_keys = {k for k in refine_keys if k in out}
        return out.refine(refine_keys) if refine_keys else out

    def _as_keys(self, cells):
        out = []
        for c in cells:
            if isinstance(c, tuple):
                out.append(c)
            else:
                out.append(self.cells[int(c)])
        return out

    # ------------------------------------------------------------ edges
    @cached_property
    def edges(self) -> EdgeSet:
        minus, plus, axis, a, b = [], [], [], [], []
        lb = self.lattice_boxes
        for k, key in enumerate(self.cells):
            i0, i1, j0, j1 = lb[k]
            for side in range(4):
                nbs = self.neighbours(key, side)
                ax = 0 if side < 2 else 1
                if side == 0:
                    seg = ((i0, j0), (i0, j1))
                elif side == 1:
                    seg = ((i1, j0), (i1, j1))
                elif side == 2:
                    seg = ((i0, j0), (i1, j0))
                else:
                    seg = ((i0, j1), (i1, j1))
                if not nbs:
                    minus.append(k), plus.append(-1), axis.append(ax)
                    a.append(seg[0]), b.append(seg[1])
                    continue
                if len(nbs) > 1:
                    continue  # recorded from the finer side
                nb = nbs[0]
                if nb[0] == key[0]:
                    if side in (0, 2):
                        continue  # record same-level faces once, from the -x/-y cell
                    minus.append(k), plus.append(self._index[nb]), axis.append(ax)
                else:
                    # nb is coarser: orient from the fine cell outward
                    minus.append(k), plus.append(self._index[nb]), axis.append(ax)
                a.append(seg[0]), b.append(seg[1])
        minus = np.array(minus, dtype=np.int64)
        plus = np.array(plus, dtype=np.int64)
        axis = np.array(axis, dtype=np.int64)
        a = np.array(a, dtype=np.int64).reshape(-1, 2)
        b = np.array(b, dtype=np.int64).reshape(-1, 2)
        # outward normal from the minus cell
        cmid = (lb[minus, 0] + lb[minus, 1], lb[minus, 2] + lb[minus, 3])
        emid = (a[:, 0] + b[:, 0], a[:, 1] + b[:, 1])
        normal = np.zeros((len(minus), 2))
        normal[axis == 0, 0] = np.sign(emid[0] - cmid[0])[axis == 0]
        normal[axis == 1, 1] = np.sign(emid[1] - cmid[1])[axis == 1]
        pa = np.stack(self.to_physical(a[:, 0], a[:, 1]), axis=1)
        pb = np.stack(self.to_physical(b[:, 0], b[:, 1]), axis=1)
        length = np.hypot(*(pb - pa).T)
        order = np.lexsort((a[:, 1], a[:, 0], axis))
        return EdgeSet(minus[order], plus[order], axis[order], normal[order],
                       a[order], b[order], length[order])

    @cached_property
    def patch_incidence(self) -> sp.csr_matrix:
        """Sparse ``(ncells, nedges)`` 0/1 matrix: edge closure meets cell closure."""
        e = self.edges
        lb = self.lattice_boxes
        ex0 = np.minimum(e.a[:, 0], e.b[:, 0])
        ex1 = np.maximum(e.a[:, 0], e.b[:, 0])
        ey0 = np.minimum(e.a[:, 1], e.b[:, 1])
        ey1 = np.maximum(e.a[:, 1], e.b[:, 1])
        rows, cols = [], []
        # bucket edges by coarse lattice position to keep this near-linear
        order = np.argsort(ex0, kind="stable")
        sx0 = ex0[order]
        maxlen = int((ex1 - ex0).max()) if len(e) else 0
        for k in range(len(self.cells)):
            i0, i1, j0, j1 = lb[k]
            lo = np.searchsorted(sx0, i0 - maxlen, side="left")
            hi = np.searchsorted(sx0, i1, side="right")
            cand = order[lo:hi]
            hit = cand[(ex1[cand] >= i0) & (ey0[cand] <= j1) & (ey1[cand] >= j0)]
            rows.append(np.full(hit.size, k)), cols.append(hit)
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        data = np.ones(rows.size)
        return sp.csr_matrix((data, (rows, cols)), shape=(len(self.cells), len(e)))

    def edge_patch(self, cell) -> np.ndarray:
        """Indices of the edges whose closure meets the closure of ``cell``."""
        k = cell if not isinstance(cell, tuple) else self._index[cell]
        m = self.patch_incidence
        return np.sort(m.indices[m.indptr[k]:m.indptr[k + 1]])

    # ---------------------------------------------------------------- io
    def to_text(self) -> str:
        """Plain-text cell list: ``level ix iy x0 x1 y0 y1`` per line."""
        lines = [f"# box {' '.join(repr(v) for v in self.box)} grid {self.m} {self.n}"]
        for key, bx in zip(self.cells, self.boxes):
            lines.append(f"{key[0]} {key[1]} {key[2]} " + " ".join(f"{v:.17g}" for v in bx))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, max_level: int = 12) -> "MeshForest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0].split()
        if head[:2] != ["#", "box"] or head[6] != "grid":
            raise ValueError("missing mesh header")
        box = tuple(float(v) for v in head[2:6])
        m, n = int(head[7]), int(head[8])
        cells = [tuple(int(v) for v in ln.split()[:3]) for ln in lines[1:]]
        return cls(box, m, n, cells, max_level=max_level)

    def __repr__(self):
        return f"MeshForest(box={self.box}, grid={self.m}x{self.n}, cells={len(self)})"


@dataclass(frozen=True)
class CommonRefinement:
    """Coarsest common refinement of two meshes of the same forest.

    ``anc_a[i]`` / ``anc_b[i]`` index the cell of ``mesh_a`` / ``mesh_b``
    that contains overlay cell ``i``.
    """

    mesh: MeshForest
    mesh_a: MeshForest
    mesh_b: MeshForest
    anc_a: np.ndarray
    anc_b: np.ndarray

    @property
    def edges(self) -> EdgeSet:
        return self.mesh.edges


def _ancestor_map(overlay: MeshForest, coarse: MeshForest) -> np.ndarray:
    out = np.empty(len(overlay), dtype=np.int64)
    for k, key in enumerate(overlay.cells):
        cover = coarse.active_cover(key)
        out[k] = coarse.index(cover)
    return out


def common_refinement(mesh_a: MeshForest, mesh_b: MeshForest) -> CommonRefinement:
    """Overlay taking, at every position, the finer of the two meshes."""
    if not mesh_a.same_forest(mesh_b):
        raise ValueError("meshes belong to different forests")
    if mesh_a.cells == mesh_b.cells:
        idx = np.arange(len(mesh_a))
        return CommonRefinement(mesh_a, mesh_a, mesh_b, idx, idx.copy())
    cells = [c for c in mesh_a.cells if mesh_b.active_cover(c) is not None]
    cells += [c for c in mesh_b.cells
              if c not in mesh_a and mesh_a.active_cover(c) is not None]
    overlay = MeshForest(mesh_a.box, mesh_a.m, mesh_a.n, cells,
                         max(mesh_a.max_level, mesh_b.max_level))
    return CommonRefinement(overlay, mesh_a, mesh_b,
                            _ancestor_map(overlay, mesh_a), _ancestor_map(overlay, mesh_b))
