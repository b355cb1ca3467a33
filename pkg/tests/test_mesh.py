import math

import numpy as np
import pytest

from gbhfem.errors import MeshIntegrityError, ParameterError
from gbhfem.mesh import (
    AffineMap,
    Mesh,
    build_structured_mesh,
    cell_affine_map,
    facet_geometry,
    geometry_tables,
)


def reference_triangle_mesh():
    """Single reference-shaped cell, built by hand."""
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    cells = np.array([[0, 1, 2]])
    facets = np.array([[1, 2], [0, 2], [0, 1]])
    facet_cells = np.array([[0, -1], [0, -1], [0, -1]])
    return Mesh(
        dim=2,
        vertices=vertices,
        cells=cells,
        facets=facets,
        facet_cells=facet_cells,
        boundary_flag=np.array([True, True, True]),
        extent=np.array([[0.0, 1.0], [0.0, 1.0]]),
        cell_facets=np.array([[0, 1, 2]]),
    )


class TestCounts:
    def test_2d_n4(self):
        mesh = build_structured_mesh(2, 4)
        assert mesh.n_vertices == 25
        assert mesh.n_cells == 32
        assert mesh.n_facets == 56
        assert int(mesh.boundary_flag.sum()) == 16

    def test_2d_n1(self):
        mesh = build_structured_mesh(2, 1)
        assert mesh.n_vertices == 4
        assert mesh.n_cells == 2
        assert mesh.n_facets == 5
        total_area = geometry_tables(mesh)["volume"].sum()
        assert total_area == pytest.approx(1.0, rel=1e-14)

    def test_3d_n4(self):
        mesh = build_structured_mesh(3, 4)
        assert mesh.n_vertices == 125
        assert mesh.n_cells == 6 * 4**3

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_euler_relation_2d(self, n):
        mesh = build_structured_mesh(2, n)
        assert mesh.n_vertices - mesh.n_facets + mesh.n_cells == 1


class TestGeometry:
    @pytest.mark.parametrize("dim,n", [(2, 3), (2, 4), (3, 2), (3, 3)])
    def test_volumes_fill_box(self, dim, n):
        extent = [(0.0, 2.0)] * dim if dim == 2 else [(0.0, 1.0), (0.0, 2.0), (0.0, 3.0)]
        mesh = build_structured_mesh(dim, n, extent=extent)
        vols = geometry_tables(mesh)["volume"]
        assert np.all(vols > 0)
        assert vols.sum() == pytest.approx(mesh.box_volume(), rel=1e-12)

    @pytest.mark.parametrize("dim,n,surface", [(2, 4, 4.0), (3, 3, 6.0)])
    def test_boundary_measure(self, dim, n, surface):
        mesh = build_structured_mesh(dim, n)
        measures = geometry_tables(mesh)["facet_measure"]
        assert measures[mesh.boundary_flag].sum() == pytest.approx(surface, rel=1e-12)

    def test_h_is_max_diameter(self):
        mesh = build_structured_mesh(2, 4)
        assert mesh.h == pytest.approx(math.sqrt(2) / 4, rel=1e-14)
        mesh3 = build_structured_mesh(3, 2)
        assert mesh3.h == pytest.approx(math.sqrt(3) / 2, rel=1e-14)

    def test_interior_facets_have_two_cells_sharing_vertices(self):
        mesh = build_structured_mesh(2, 3)
        for f in np.flatnonzero(~mesh.boundary_flag):
            c0, c1 = mesh.facet_cells[f]
            assert c0 >= 0 and c1 >= 0 and c0 < c1
            shared = set(mesh.cells[c0]) & set(mesh.cells[c1])
            assert shared == set(mesh.facets[f])
        for f in np.flatnonzero(mesh.boundary_flag):
            assert mesh.facet_cells[f, 1] == -1

    @pytest.mark.parametrize("dim", [2, 3])
    def test_refinement_nesting(self, dim):
        coarse = build_structured_mesh(dim, 2)
        fine = build_structured_mesh(dim, 4)
        fine_set = {tuple(np.round(v, 12)) for v in fine.vertices}
        for v in coarse.vertices:
            assert tuple(np.round(v, 12)) in fine_set


class TestFacetGeometry:
    def test_bottom_edge_normal(self):
        mesh = build_structured_mesh(2, 1)
        bottom = next(
            f
            for f in range(mesh.n_facets)
            if mesh.boundary_flag[f] and np.allclose(mesh.vertices[mesh.facets[f]][:, 1], 0.0)
        )
        normal, measure, midpoint = facet_geometry(mesh, bottom)
        assert np.allclose(normal, [0.0, -1.0], atol=1e-14)
        assert measure == pytest.approx(1.0)
        assert midpoint[1] == pytest.approx(0.0)

    def test_diagonal_edge_measure(self):
        mesh = build_structured_mesh(2, 1)
        diag = next(f for f in range(mesh.n_facets) if not mesh.boundary_flag[f])
        _, measure, _ = facet_geometry(mesh, diag)
        assert measure == pytest.approx(math.sqrt(2.0), rel=1e-14)

    @pytest.mark.parametrize("dim", [2, 3])
    def test_normals_unit_and_oriented_plus_to_minus(self, dim):
        mesh = build_structured_mesh(dim, 2)
        geom = geometry_tables(mesh)
        norms = np.linalg.norm(geom["facet_normal"], axis=1)
        assert np.allclose(norms, 1.0, atol=1e-14)
        cent = geom["centroid"]
        for f in np.flatnonzero(~mesh.boundary_flag):
            c0, c1 = mesh.facet_cells[f]
            d = cent[c1] - cent[c0]
            assert np.dot(geom["facet_normal"][f], d) > 0


class TestAffineMap:
    def test_reference_cell_identity(self):
        mesh = reference_triangle_mesh()
        amap = cell_affine_map(mesh, 0)
        assert isinstance(amap, AffineMap)
        assert np.allclose(amap.jacobian, np.eye(2), atol=1e-15)
        assert amap.det == pytest.approx(1.0)
        assert np.allclose(amap.jacobian @ np.linalg.inv(amap.jacobian), np.eye(2), atol=1e-12)

    @pytest.mark.parametrize("dim,n", [(2, 4), (3, 2)])
    def test_scaling_and_volume_partition(self, dim, n):
        mesh = build_structured_mesh(dim, n)
        total = 0.0
        for c in range(mesh.n_cells):
            amap = cell_affine_map(mesh, c)
            assert amap.det == pytest.approx((1.0 / n) ** dim, rel=1e-12)
            total += amap.det / math.factorial(dim)
        assert total == pytest.approx(1.0, rel=1e-12)

    def test_inverted_cell_rejected(self):
        mesh = reference_triangle_mesh()
        mesh.cells = np.array([[0, 2, 1]])  # clockwise
        mesh._cache.clear()
        with pytest.raises(MeshIntegrityError, match="cell 0"):
            cell_affine_map(mesh, 0)


class TestErrors:
    @pytest.mark.parametrize("bad_n", [0, -1, 2.5])
    def test_invalid_n(self, bad_n):
        with pytest.raises(ParameterError):
            build_structured_mesh(2, bad_n)

    def test_invalid_dim(self):
        with pytest.raises(ParameterError):
            build_structured_mesh(1, 4)

    def test_degenerate_extent(self):
        with pytest.raises(ParameterError):
            build_structured_mesh(2, 2, extent=[(0.0, 1.0), (1.0, 1.0)])
