"""Structured simplicial meshes of axis-aligned boxes.

Triangulations are fully deterministic: in 2D every grid square is split
along its lower-left-to-upper-right diagonal, in 3D every grid cube is cut
into the six path simplices sharing the main diagonal.  Cells are oriented
so their signed volume is positive; the "plus" side of a facet is the
adjacent cell with the lower index.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MeshIntegrityError, ParameterError


@dataclass(frozen=True)
class AffineMap:
    """Reference-to-physical map ``x = origin + jacobian @ xi``."""

    jacobian: np.ndarray
    det: float
    inv_transpose: np.ndarray
    origin: np.ndarray


@dataclass(eq=False)
class Mesh:
    """Simplicial mesh with cell, facet and boundary connectivity.

    ``facets`` holds each facet's vertex indices sorted ascending;
    ``facet_cells[f]`` is ``(plus_cell, minus_cell)`` with ``-1`` standing
    in for the missing cell of a boundary facet.  ``cell_facets[c, i]`` is
    the facet opposite local vertex ``i`` of cell ``c``.
    """

    dim: int
    vertices: np.ndarray
    cells: np.ndarray
    facets: np.ndarray
    facet_cells: np.ndarray
    boundary_flag: np.ndarray
    extent: np.ndarray
    cell_facets: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    @property
    def h(self) -> float:
        """Largest cell diameter."""
        return float(geometry_tables(self)["cell_diameter"].max())

    def box_volume(self) -> float:
        return float(np.prod(self.extent[:, 1] - self.extent[:, 0]))


def _normalize_extent(dim, extent):
    if extent is None:
        extent = [(0.0, 1.0)] * dim
    ext = np.asarray(extent, dtype=float)
    if ext.shape != (dim, 2):
        raise ParameterError(f"extent must have shape ({dim}, 2), got {ext.shape}")
    if np.any(ext[:, 1] <= ext[:, 0]):
        raise ParameterError("degenerate extent: upper bounds must exceed lower bounds")
    return ext


def _grid_vertices(n, extent):
    axes = [np.linspace(lo, hi, n + 1) for lo, hi in extent]
    # index (i, j[, k]) -> ((k*(n+1) + j)*(n+1) + i, x fastest
    grids = np.meshgrid(*axes, indexing="ij")
    order = tuple(reversed(range(len(axes))))  # ravel with the last axis slowest
    return np.column_stack([g.transpose(order).ravel() for g in grids])


def _cells_2d(n):
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i, j = i.ravel(), j.ravel()
    v00 = j * (n + 1) + i
    v10 = v00 + 1
    v01 = v00 + (n + 1)
    v11 = v01 + 1
    cells = np.empty((2 * n * n, 3), dtype=np.int64)
    cells[0::2] = np.column_stack([v00, v10, v11])
    cells[1::2] = np.column_stack([v00, v11, v01])
    return cells


def _perm_parity(perm):
    return sum(perm[a] > perm[b] for a in range(len(perm)) for b in range(a + 1, len(perm))) % 2


def _cells_3d(n):
    idx = np.arange(n)
    i, j, k = (g.ravel() for g in np.meshgrid(idx, idx, idx, indexing="ij"))

    def vid(di, dj, dk):
        return ((k + dk) * (n + 1) + (j + dj)) * (n + 1) + (i + di)

    unit = np.eye(3, dtype=np.int64)
    blocks = []
    for perm in itertools.permutations(range(3)):
        steps = np.zeros((4, 3), dtype=np.int64)
        steps[1] = unit[perm[0]]
        steps[2] = unit[perm[0]] + unit[perm[1]]
        steps[3] = (1, 1, 1)
        tet = np.column_stack([vid(*s) for s in steps])
        if _perm_parity(perm):
            tet[:, [2, 3]] = tet[:, [3, 2]]
        blocks.append(tet)
    return np.concatenate(blocks, axis=0)


def _build_facets(cells, dim):
    nc = len(cells)
    local = np.stack([np.delete(cells, i, axis=1) for i in range(dim + 1)], axis=1)
    flat = np.sort(local.reshape(-1, dim), axis=1)
    facets, inv = np.unique(flat, axis=0, return_inverse=True)
    inv = inv.ravel()
    cell_facets = inv.reshape(nc, dim + 1)

    owner = np.repeat(np.arange(nc), dim + 1)
    order = np.argsort(inv, kind="stable")  # stable keeps cells ascending per facet
    grouped = owner[order]
    counts = np.bincount(inv, minlength=len(facets))
    if counts.max() > 2:
        raise MeshIntegrityError("facet shared by more than two cells")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    facet_cells = np.full((len(facets), 2), -1, dtype=np.int64)
    facet_cells[:, 0] = grouped[starts]
    two = counts == 2
    facet_cells[two, 1] = grouped[starts[two] + 1]
    return facets, facet_cells, cell_facets


def build_structured_mesh(dim: int, n: int, extent=None) -> Mesh:
    """Uniform simplicial mesh of an axis-aligned box.

    2D squares are split into two triangles each, 3D cubes into six
    tetrahedra, giving 2*n^2 respectively 6*n^3 cells.
    """
    if dim not in (2, 3):
        raise ParameterError(f"dim must be 2 or 3, got {dim}")
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 1:
        raise ParameterError(f"n must be a positive integer, got {n!r}")
    ext = _normalize_extent(dim, extent)
    vertices = _grid_vertices(n, ext)
    cells = _cells_2d(n) if dim == 2 else _cells_3d(n)
    facets, facet_cells, cell_facets = _build_facets(cells, dim)
    mesh = Mesh(
        dim=dim,
        vertices=vertices,
        cells=cells,
        facets=facets,
        facet_cells=facet_cells,
        boundary_flag=facet_cells[:, 1] < 0,
        extent=ext,
        cell_facets=cell_facets,
    )
    geometry_tables(mesh)  # validates orientation eagerly
    return mesh


def geometry_tables(mesh: Mesh) -> dict:
    """Per-cell affine data and per-facet normal/measure tables (cached)."""
    cached = mesh._cache.get("geom")
    if cached is not None:
        return cached

    d = mesh.dim
    v = mesh.vertices
    x0 = v[mesh.cells[:, 0]]
    jac = np.stack([v[mesh.cells[:, i]] - x0 for i in range(1, d + 1)], axis=2)
    det = np.linalg.det(jac)
    bad = np.flatnonzero(det <= 0)
    if bad.size:
        raise MeshIntegrityError(f"cell {bad[0]} has non-positive volume")
    inv = np.linalg.inv(jac)
    cell_pts = v[mesh.cells]
    centroids = cell_pts.mean(axis=1)
    diffs = cell_pts[:, :, None, :] - cell_pts[:, None, :, :]
    cell_diam = np.sqrt((diffs**2).sum(-1).max(axis=(1, 2)))

    fv = v[mesh.facets]
    if d == 2:
        t = fv[:, 1] - fv[:, 0]
        measure = np.linalg.norm(t, axis=1)
        normal = np.column_stack([t[:, 1], -t[:, 0]]) / measure[:, None]
        facet_diam = measure.copy()
    else:
        cr = np.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0])
        doubled = np.linalg.norm(cr, axis=1)
        measure = 0.5 * doubled
        normal = cr / doubled[:, None]
        fd = fv[:, :, None, :] - fv[:, None, :, :]
        facet_diam = np.sqrt((fd**2).sum(-1).max(axis=(1, 2)))
    midpoint = fv.mean(axis=1)
    # orient normals outward from the plus cell
    plus = mesh.facet_cells[:, 0]
    flip = np.einsum("fd,fd->f", normal, midpoint - centroids[plus]) < 0
    normal[flip] *= -1.0

    tables = {
        "jac": jac,
        "det": det,
        "inv_jac": inv,
        "inv_T": np.transpose(inv, (0, 2, 1)),
        "origin": x0,
        "volume": det / math.factorial(d),
        "centroid": centroids,
        "cell_diameter": cell_diam,
        "facet_normal": normal,
        "facet_measure": measure,
        "facet_midpoint": midpoint,
        "facet_diameter": facet_diam,
    }
    mesh._cache["geom"] = tables
    return tables


def facet_geometry(mesh: Mesh, facet: int):
    """Unit normal (outward from the plus cell), measure and midpoint."""
    g = geometry_tables(mesh)
    return g["facet_normal"][facet].copy(), float(g["facet_measure"][facet]), g["facet_midpoint"][facet].copy()


def cell_affine_map(mesh: Mesh, cell: int) -> AffineMap:
    """Affine map taking the reference simplex onto the given cell."""
    g = geometry_tables(mesh)
    return AffineMap(
        jacobian=g["jac"][cell].copy(),
        det=float(g["det"][cell]),
        inv_transpose=g["inv_T"][cell].copy(),
        origin=g["origin"][cell].copy(),
    )
