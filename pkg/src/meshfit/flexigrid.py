"""Differentiable dual iso-surface extraction on a deformable lattice.

The lattice spans [-1,1]^3 with n vertices per axis.  Each lattice
vertex carries an SDF value, a bounded deformation (in cell units), and
a positive crossing weight; each cell carries 12 positive blend weights,
one per cube edge.  Extraction finds sign-crossing edges, places one
dual vertex per crossing cell as the blend-weighted mean of its edge
crossings, and emits a quad (two triangles) per interior crossing edge,
wound so triangle normals point from negative SDF toward positive.

Everything geometric stays on the autodiff tape: mesh vertex positions
are differentiable in the SDF values, deformations, and both weight
families.  Topology (which edges cross) is discrete and treated as
constant, as usual for this family of extractors.

A cell with several surface sheets still gets a single dual vertex; the
full case-table disambiguation is out of scope here.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .triplane import query_values_grid

DEFAULT_GRID_SIZE = 128
DEGENERATE_AREA = 1e-12
CELL_EDGE_SLOTS = 12


@dataclass
class Mesh:
    """Triangle mesh; `vertex_tensor` is set when extraction ran on tape."""

    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None
    vertex_tensor: Tensor | None = None
    color_tensor: Tensor | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.intp).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle indices out of range")
        for name in ("colors", "normals"):
            chan = getattr(self, name)
            if chan is not None and np.asarray(chan).shape != self.vertices.shape:
                raise ValueError(f"{name} must be one rgb/xyz row per vertex")


@dataclass
class ExtractionGrid:
    """Lattice state feeding extraction; tensors keep the tape alive.

    Grids built from a field (build_grid) materialize deformation and
    weight rows only on the crossing support, with neutral fillers
    elsewhere; extraction and the regularizer never read the fillers.
    Grids built via from_values carry whatever dense arrays were given.
    """

    n: int
    positions: np.ndarray
    sdf: Tensor
    deformation: Tensor
    alpha: Tensor
    beta: Tensor

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("grid needs at least 2 vertices per axis")
        nv, nc = self.n**3, (self.n - 1) ** 3
        if self.positions.shape != (nv, 3):
            raise ValueError("positions must be (n^3, 3)")
        if self.sdf.data.shape != (nv,) or self.alpha.data.shape != (nv,):
            raise ValueError("sdf/alpha must hold one value per lattice vertex")
        if self.deformation.data.shape != (nv, 3):
            raise ValueError("deformation must be (n^3, 3)")
        if self.beta.data.shape != (nc, CELL_EDGE_SLOTS):
            raise ValueError("beta must be (cells, 12)")
        if np.any(np.abs(self.deformation.data) >= 0.5):
            raise ValueError("deformation must stay inside half a cell")
        if np.any(self.alpha.data <= 0.0) or np.any(self.beta.data <= 0.0):
            raise ValueError("alpha and beta must be strictly positive")

    @property
    def h(self) -> float:
        return 2.0 / (self.n - 1)

    @classmethod
    def from_values(cls, n, sdf, deformation=None, alpha=None, beta=None):
        """Grid from plain arrays (neutral weights unless given)."""
        nv, nc = n**3, (n - 1) ** 3
        sdf = np.asarray(sdf, dtype=np.float64).reshape(nv)
        if deformation is None:
            deformation = np.zeros((nv, 3))
        if alpha is None:
            alpha = np.ones(nv)
        if beta is None:
            beta = np.ones((nc, CELL_EDGE_SLOTS))
        return cls(
            n=n,
            positions=lattice_points(n),
            sdf=ad.parameter(sdf),
            deformation=ad.parameter(np.asarray(deformation, dtype=np.float64)),
            alpha=ad.parameter(np.asarray(alpha, dtype=np.float64)),
            beta=ad.parameter(np.asarray(beta, dtype=np.float64)),
        )


def lattice_points(n: int) -> np.ndarray:
    """(n^3, 3) lattice vertex positions, x-major flattening."""
    axis = np.linspace(-1.0, 1.0, n)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def _flat(i, j, k, n):
    return (i * n + j) * n + k


@lru_cache(maxsize=8)
def _edge_topology(n: int):
    """Endpoint ids, adjacent-cell ring, and per-cell edge slot for every
    lattice edge.  The ring lists the 4 cells around an edge in
    counterclockwise order as seen from the edge axis' positive end
    (-1 where the neighbor falls outside the lattice).  Slots 0-3 are
    x-edges, 4-7 y-edges, 8-11 z-edges of a cell.
    """
    nc = n - 1
    ends_a, ends_b, rings, slots = [], [], [], []
    for axis in range(3):
        dims = [n, n, n]
        dims[axis] = n - 1
        ii, jj, kk = np.meshgrid(
            np.arange(dims[0]), np.arange(dims[1]), np.arange(dims[2]), indexing="ij"
        )
        coords = [ii.ravel(), jj.ravel(), kk.ravel()]
        step = [int(ax == axis) for ax in range(3)]
        ends_a.append(_flat(coords[0], coords[1], coords[2], n))
        ends_b.append(
            _flat(coords[0] + step[0], coords[1] + step[1], coords[2] + step[2], n)
        )
        u_axis, v_axis = (axis + 1) % 3, (axis + 2) % 3
        ring_cells, ring_slots = [], []
        for du, dv in ((-1, -1), (0, -1), (0, 0), (-1, 0)):
            cell = [c.copy() for c in coords]
            cell[u_axis] = coords[u_axis] + du
            cell[v_axis] = coords[v_axis] + dv
            valid = (
                (cell[u_axis] >= 0)
                & (cell[u_axis] < nc)
                & (cell[v_axis] >= 0)
                & (cell[v_axis] < nc)
            )
            ring_cells.append(
                np.where(valid, _flat(cell[0], cell[1], cell[2], nc), -1)
            )
            ring_slots.append(axis * 4 + (-du) * 2 + (-dv))
        rings.append(np.stack(ring_cells, axis=1))
        slots.append(np.broadcast_to(np.array(ring_slots), rings[-1].shape))
    return (
        np.concatenate(ends_a),
        np.concatenate(ends_b),
        np.concatenate(rings, axis=0),
        np.concatenate(slots, axis=0),
    )


def crossing_support(sdf_values: np.ndarray, n: int):
    """Lattice vertices and cells that extraction reads for this sign field.

    Returns (vertex_ids, cell_ids): the endpoints of sign-crossing edges
    and every in-lattice cell adjacent to such an edge.
    """
    inside = np.asarray(sdf_values).reshape(-1) < 0.0
    ends_a, ends_b, rings, _ = _edge_topology(n)
    cross = inside[ends_a] != inside[ends_b]
    if not cross.any():
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    vertex_ids = np.unique(np.concatenate([ends_a[cross], ends_b[cross]]))
    ring = rings[cross]
    cell_ids = np.unique(ring[ring >= 0])
    return vertex_ids, cell_ids


def _sdf_sweep(field, n: int) -> np.ndarray:
    axis = np.linspace(-1.0, 1.0, n)
    if hasattr(field, "planes") and hasattr(field, "heads"):
        return query_values_grid(field, axis, axis, axis, ("sdf",))["sdf"]
    return np.asarray(field.query_sdf(lattice_points(n)).data, dtype=np.float64)


def build_grid(field, n: int = DEFAULT_GRID_SIZE) -> ExtractionGrid:
    """Populate a lattice from the field's sdf/deformation/weights heads.

    SDF values cover the whole lattice (signs decide the topology) via a
    gradient-free sweep; the taped head queries are then restricted to
    the rows extraction actually consumes — sign-crossing edge endpoints
    for sdf/deformation/alpha and cells adjacent to a crossing edge for
    the 12 per-cell blend weights (queried at those cells' centers).
    Rows outside that support hold neutral fillers (deformation 0,
    weights 1); neither extraction nor the regularizer reads them, and
    their gradients are identically zero, so the restriction is exact.
    """
    if n < 2:
        raise ValueError("grid needs at least 2 vertices per axis")
    pts = lattice_points(n)
    nv, nc = n**3, (n - 1) ** 3
    sdf_values = _sdf_sweep(field, n)
    need_v, need_c = crossing_support(sdf_values, n)

    sdf = ad.astensor(sdf_values)
    deformation = ad.astensor(np.zeros((nv, 3)))
    alpha = ad.astensor(np.ones(nv))
    beta = ad.astensor(np.ones((nc, CELL_EDGE_SLOTS)))
    if need_v.size:
        vpts = pts[need_v]
        sdf = ad.scatter_set(sdf, need_v, field.query_sdf(vpts))
        deformation = ad.scatter_set(deformation, need_v, field.query_deformation(vpts))
        alpha = ad.scatter_set(alpha, need_v, field.query_weights(vpts)[:, 0])
    if need_c.size:
        half = 1.0 / (n - 1)
        centers = lattice_points(n - 1) * (1.0 - half) if n > 2 else np.zeros((1, 3))
        beta = ad.scatter_set(
            beta, need_c, field.query_weights(centers[need_c])[:, 1:]
        )
    return ExtractionGrid(
        n=n,
        positions=pts,
        sdf=sdf,
        deformation=deformation,
        alpha=alpha,
        beta=beta,
    )


def _empty_mesh() -> Mesh:
    return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.intp))


def extract_mesh(grid: ExtractionGrid) -> Mesh:
    """Dual extraction of the zero level set; empty when no edge crosses."""
    inside = grid.sdf.data < 0.0
    ends_a, ends_b, rings, slots = _edge_topology(grid.n)
    cross = inside[ends_a] != inside[ends_b]
    if not cross.any():
        return _empty_mesh()
    a, b = ends_a[cross], ends_b[cross]
    ring, slot = rings[cross], slots[cross]
    n_cross = a.size

    # weighted crossing point per edge; the weight blend reduces to
    # plain linear interpolation when both alphas agree
    pos = ad.add(grid.positions, ad.mul(grid.deformation, grid.h))
    wa = ad.take(grid.alpha, a) * ad.take(grid.sdf, b)
    wb = ad.take(grid.alpha, b) * ad.take(grid.sdf, a)
    crossings = (
        wa.reshape(-1, 1) * ad.take(pos, a) - wb.reshape(-1, 1) * ad.take(pos, b)
    ) / (wa - wb).reshape(-1, 1)

    # one dual vertex per crossing cell: beta-weighted mean of the
    # crossing points on that cell's crossing edges
    pair_cell = ring.ravel()
    pair_slot = slot.ravel()
    pair_edge = np.repeat(np.arange(n_cross), 4)
    keep = pair_cell >= 0
    pair_cell, pair_slot, pair_edge = pair_cell[keep], pair_slot[keep], pair_edge[keep]
    cell_ids = np.unique(pair_cell)
    rank = np.searchsorted(cell_ids, pair_cell)
    blend = ad.take(ad.reshape(grid.beta, (-1,)), pair_cell * CELL_EDGE_SLOTS + pair_slot)
    summed = ad.segment_sum(
        blend.reshape(-1, 1) * ad.take(crossings, pair_edge), rank, cell_ids.size
    )
    verts = summed / ad.segment_sum(blend, rank, cell_ids.size).reshape(-1, 1)

    # a quad per crossing edge with all 4 ring cells in the lattice;
    # the ring is counterclockwise from +axis, which faces outward when
    # the lower endpoint is inside (negative)
    full = (ring >= 0).all(axis=1)
    quad = np.searchsorted(cell_ids, ring[full])
    flip = ~inside[a[full]]
    quad[flip] = quad[flip][:, [0, 3, 2, 1]]
    tris = np.stack([quad[:, [0, 1, 2]], quad[:, [0, 2, 3]]], axis=1).reshape(-1, 3)
    if tris.size == 0:
        return _empty_mesh()

    # cleanup: drop zero-area slivers, then compact vertex numbering
    v = verts.data
    area = 0.5 * np.linalg.norm(
        np.cross(v[tris[:, 1]] - v[tris[:, 0]], v[tris[:, 2]] - v[tris[:, 0]]), axis=1
    )
    tris = tris[area > DEGENERATE_AREA]
    if tris.size == 0:
        return _empty_mesh()
    used = np.unique(tris)
    remap = np.zeros(cell_ids.size, dtype=np.intp)
    remap[used] = np.arange(used.size)
    verts = ad.take(verts, used)
    return Mesh(
        vertices=verts.data,
        triangles=remap[tris],
        vertex_tensor=verts,
    )


def reg_loss(grid: ExtractionGrid, mesh: Mesh | None = None) -> Tensor:
    """Pull weights toward neutral (alpha, beta = 1) and deformations to 0.

    All terms live on the extraction support: alpha and deformation are
    averaged over the endpoints of sign-crossing edges, beta over cells
    adjacent to a crossing edge (each summing its crossing-edge
    weights).  Grids without any crossing fall back to averaging the
    deformation over the whole lattice so the pull toward neutral never
    vanishes.  Zero exactly at the neutral parameterization.  The mesh
    argument is accepted for call-site symmetry; the crossing topology
    is recomputed from the grid.
    """
    del mesh
    inside = grid.sdf.data < 0.0
    ends_a, ends_b, rings, slots = _edge_topology(grid.n)
    cross = inside[ends_a] != inside[ends_b]
    if not cross.any():
        return ad.tmean(ad.tsum(grid.deformation**2.0, axis=1))
    endpoints = np.unique(np.concatenate([ends_a[cross], ends_b[cross]]))
    delta_term = ad.tmean(ad.tsum(ad.take(grid.deformation, endpoints) ** 2.0, axis=1))
    alpha_a = ad.take(grid.alpha, ends_a[cross])
    alpha_b = ad.take(grid.alpha, ends_b[cross])
    alpha_term = ad.tmean((alpha_a - 1.0) ** 2.0 + (alpha_b - 1.0) ** 2.0)

    pair_cell = rings[cross].ravel()
    pair_slot = slots[cross].ravel()
    keep = pair_cell >= 0
    pair_cell, pair_slot = pair_cell[keep], pair_slot[keep]
    cell_ids = np.unique(pair_cell)
    rank = np.searchsorted(cell_ids, pair_cell)
    blend = ad.take(ad.reshape(grid.beta, (-1,)), pair_cell * CELL_EDGE_SLOTS + pair_slot)
    per_cell = ad.segment_sum((blend - 1.0) ** 2.0, rank, cell_ids.size)
    return alpha_term + ad.tmean(per_cell) + delta_term
