import math

import numpy as np
import pytest

from snpp import mesh
from snpp.errors import (
    InclusionTouchesBoundary,
    ResolutionTooCoarse,
    ValidationError,
)


def disk_geometry(h, radius=0.25, center=(0.5, 0.5)):
    return mesh.UnitCellGeometry(mesh.DiskInclusion(center, radius), h)


def test_full_square_has_unit_porosity_and_no_interface():
    m = mesh.generate_unit_cell_mesh(mesh.UnitCellGeometry(None, 0.1))
    assert mesh.mesh_area(m) == pytest.approx(1.0, abs=1e-12)
    assert all(tag != mesh.GAMMA_INTERIOR for _, tag in m.boundary_edges)


def test_structured_square_min_angle_is_45_degrees():
    m = mesh.generate_unit_cell_mesh(mesh.UnitCellGeometry(None, 0.1))
    report = mesh.mesh_quality_report(m)
    assert report["min_angle_deg"] == pytest.approx(45.0, abs=1e-9)
    assert report["h_max"] >= report["h_min"] > 0


def test_disk_cell_porosity_close_to_analytic():
    m = mesh.generate_unit_cell_mesh(disk_geometry(0.05))
    assert mesh.mesh_area(m) == pytest.approx(1 - math.pi * 0.25 ** 2,
                                              abs=5e-3)


def test_disk_cell_porosity_converges_quadratically():
    exact = 1 - math.pi * 0.25 ** 2
    errors = [abs(mesh.mesh_area(mesh.generate_unit_cell_mesh(
        disk_geometry(h))) - exact) for h in (0.1, 0.05, 0.025)]
    orders = [math.log2(errors[i] / errors[i + 1]) for i in range(2)]
    assert min(orders) >= 1.8


def test_large_disk_touches_boundary():
    with pytest.raises(InclusionTouchesBoundary):
        mesh.generate_unit_cell_mesh(disk_geometry(0.05, radius=0.55))


def test_mesh_size_must_resolve_interface():
    with pytest.raises(ValidationError):
        mesh.generate_unit_cell_mesh(disk_geometry(0.2, radius=0.25))


def test_all_four_faces_carry_periodic_pairs():
    m = mesh.generate_unit_cell_mesh(disk_geometry(0.05))
    deltas = m.nodes[m.periodic_pairs[:, 1]] - m.nodes[m.periodic_pairs[:, 0]]
    lattice = np.round(deltas)
    assert np.max(np.abs(deltas - lattice)) <= 1e-12
    directions = {tuple(v) for v in lattice}
    assert (1.0, 0.0) in directions and (0.0, 1.0) in directions


def test_periodic_canonical_map_is_idempotent():
    m = mesh.generate_unit_cell_mesh(disk_geometry(0.05))
    canon = mesh.periodic_canonical_map(m)
    assert np.array_equal(canon[canon], canon)


def test_interface_edges_form_closed_curve():
    m = mesh.generate_unit_cell_mesh(disk_geometry(0.05))
    assert mesh.count_interior_loops(m) == 1
    degree = {}
    for (a, b), tag in m.boundary_edges:
        if tag == mesh.GAMMA_INTERIOR:
            degree[a] = degree.get(a, 0) + 1
            degree[b] = degree.get(b, 0) + 1
    assert degree and all(d == 2 for d in degree.values())


def test_mesh_is_conforming():
    m = mesh.generate_unit_cell_mesh(disk_geometry(0.05))
    count = {}
    for tri in m.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            count[(min(a, b), max(a, b))] = count.get((min(a, b), max(a, b)), 0) + 1
    boundary = {k for k, c in count.items() if c == 1}
    interior = {k for k, c in count.items() if c == 2}
    assert len(boundary) + len(interior) == len(count)


def test_perforated_mesh_has_one_hole_per_cell():
    dom = mesh.PerforatedDomain(0.5, disk_geometry(0.05))
    m = mesh.generate_perforated_mesh(dom, 0.03125)
    assert mesh.count_interior_loops(m) == 4
    assert mesh.mesh_area(m) == pytest.approx(1 - math.pi * 0.25 ** 2,
                                              abs=5e-3)
    assert len(m.periodic_pairs) == 0


def test_perforated_hole_count_matches_cell_tiling():
    for k in (2, 3):
        dom = mesh.PerforatedDomain(1.0 / k, disk_geometry(0.05))
        m = mesh.generate_perforated_mesh(dom, 1.0 / (8 * k))
        assert mesh.count_interior_loops(m) == k * k


def test_perforated_single_full_cell():
    dom = mesh.PerforatedDomain(1.0, mesh.UnitCellGeometry(None, 0.1))
    m = mesh.generate_perforated_mesh(dom, 0.25)
    assert mesh.count_interior_loops(m) == 0
    assert mesh.mesh_area(m) == pytest.approx(1.0, abs=1e-12)


def test_perforated_resolution_guard():
    dom = mesh.PerforatedDomain(1.0 / 3, disk_geometry(0.05))
    with pytest.raises(ResolutionTooCoarse):
        mesh.generate_perforated_mesh(dom, 0.2)


def test_perforated_outer_and_interface_tags_are_disjoint():
    dom = mesh.PerforatedDomain(0.5, disk_geometry(0.05))
    m = mesh.generate_perforated_mesh(dom, 0.0625)
    for (a, b), tag in m.boundary_edges:
        xa, ya = m.nodes[a]
        xb, yb = m.nodes[b]
        on_outer = all(min(abs(v), abs(v - 1.0)) < 1e-9
                       for v in (xa, ya)) or min(abs(xa), abs(xa - 1), abs(ya), abs(ya - 1)) < 1e-9
        if tag == mesh.OUTER_BOUNDARY:
            assert min(abs(xa), abs(xa - 1), abs(ya), abs(ya - 1)) < 1e-9
            assert min(abs(xb), abs(xb - 1), abs(yb), abs(yb - 1)) < 1e-9


def test_tiled_mesh_triangles_never_straddle_cells():
    dom = mesh.PerforatedDomain(0.25, disk_geometry(0.05))
    m = mesh.generate_perforated_mesh(dom, 1.0 / 32)
    centroids = m.nodes[m.triangles].mean(axis=1)
    cell_x = np.floor(centroids[:, 0] / 0.25).astype(int)
    cell_y = np.floor(centroids[:, 1] / 0.25).astype(int)
    assert np.array_equal(m.triangle_cell, cell_y * 4 + cell_x)
    corners = m.nodes[m.triangles]
    for tri_corner_x in (corners[:, :, 0] / 0.25,):
        lo = np.floor(tri_corner_x.min(axis=1) + 1e-12)
        hi = np.ceil(tri_corner_x.max(axis=1) - 1e-12)
        assert np.all(hi - lo <= 1.0 + 1e-12)


def test_inverted_triangle_rejected():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    tris = np.array([[0, 2, 1]])
    m = mesh.TriMesh(nodes, tris, [((0, 1), mesh.OUTER_BOUNDARY),
                                   ((1, 2), mesh.OUTER_BOUNDARY),
                                   ((0, 2), mesh.OUTER_BOUNDARY)],
                     np.empty((0, 2), dtype=int))
    with pytest.raises(ValidationError):
        m.validate()


def test_centered_disk_mesh_is_mirror_symmetric():
    m = mesh.generate_unit_cell_mesh(disk_geometry(0.05))
    keys = {(round(x, 12), round(y, 12)) for x, y in m.nodes}
    mirrored = {(round(1.0 - x, 12), round(y, 12)) for x, y in m.nodes}
    assert keys == mirrored
