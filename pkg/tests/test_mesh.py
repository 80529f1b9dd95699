import numpy as np
import pytest

from percell.errors import GeometryError
from percell.meshing import (CellGeometry, CellMesh, build_cell_mesh,
                             build_perforated_mesh, load_mesh, save_mesh,
                             save_vtk, validate_mesh)


def test_no_hole_two_divisions_counts():
    mesh = build_cell_mesh(CellGeometry(hole_radius=0.0, divisions=2))
    assert len(mesh.vertices) == 9
    assert len(mesh.triangles) == 8
    assert len(mesh.gamma_edges) == 0


def test_hole_cell_area_is_exact_polygon_complement():
    geom = CellGeometry(hole_radius=0.25, hole_segments=32, divisions=16)
    mesh = build_cell_mesh(geom)
    poly_area = 0.5 * 32 * 0.25 ** 2 * np.sin(2 * np.pi / 32)
    assert mesh.areas.sum() == pytest.approx(1.0 - poly_area, abs=1e-12)


def test_hole_leaving_cell_raises():
    with pytest.raises(GeometryError):
        CellGeometry(hole_radius=0.6, divisions=16)


def test_polygon_area_converges_to_disk():
    geom = CellGeometry(hole_radius=0.25, hole_segments=32, divisions=16)
    exact = np.pi * 0.25 ** 2
    assert abs(geom.polygon_area() - exact) / exact < 0.01
    ratio = [abs(CellGeometry(hole_radius=0.25, hole_segments=m,
                              divisions=16).polygon_area() - exact)
             for m in (16, 32)]
    assert ratio[0] / ratio[1] > 3.0  # second order in the segment count


def test_generated_meshes_validate_clean():
    for geom in (CellGeometry(hole_radius=0.0, divisions=4),
                 CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8),
                 CellGeometry(hole_radius=0.1, hole_segments=8, divisions=8)):
        assert validate_mesh(build_cell_mesh(geom)).ok
    geom = CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8)
    assert validate_mesh(build_perforated_mesh(geom, 1.0 / 2.0)).ok


def test_validation_flags_flipped_triangle():
    mesh = build_cell_mesh(CellGeometry(hole_radius=0.0, divisions=2))
    tris = mesh.triangles.copy()
    tris[3] = tris[3][::-1]
    bad = CellMesh(mesh.vertices, tris, mesh.gamma_edges,
                   mesh.periodic_pairs)
    rep = validate_mesh(bad)
    assert any(kind == "orientation" and where == 3
               for kind, where, _ in rep.violations)


def test_validation_flags_perturbed_periodic_pair():
    mesh = build_cell_mesh(CellGeometry(hole_radius=0.0, divisions=4))
    verts = mesh.vertices.copy()
    s = mesh.periodic_pairs[0][0]
    verts[s] = verts[s] + 1e-6
    bad = CellMesh(verts, mesh.triangles, mesh.gamma_edges,
                   mesh.periodic_pairs)
    rep = validate_mesh(bad)
    named = [where for kind, where, _ in rep.violations if kind == "periodic"]
    assert (int(mesh.periodic_pairs[0][0]),
            int(mesh.periodic_pairs[0][1])) in named


def test_periodic_pairs_are_unit_translations():
    mesh = build_cell_mesh(CellGeometry(hole_radius=0.25, hole_segments=16,
                                        divisions=8))
    for s, m in mesh.periodic_pairs:
        d = np.abs(mesh.vertices[s] - mesh.vertices[m])
        for comp in d:
            assert min(abs(comp), abs(comp - 1.0)) < 1e-12


def test_perforated_hole_count_and_boundary_length():
    geom = CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8)
    mesh = build_perforated_mesh(geom, 0.5)
    cells = {tuple(c) for c in mesh.cell_index.tolist()}
    assert len(cells) == 4
    length = sum(np.hypot(*(mesh.vertices[a] - mesh.vertices[b]))
                 for a, b in mesh.gamma_edges)
    assert length == pytest.approx(4 * 0.5 * geom.polygon_perimeter(),
                                   rel=1e-12)
    # 4 closed loops of hole_segments edges each
    assert len(mesh.gamma_edges) == 4 * geom.hole_segments


def test_perforated_area_epsilon_third():
    geom = CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8)
    mesh = build_perforated_mesh(geom, 1.0 / 3.0)
    want = 1.0 - 9.0 * (1.0 / 9.0) * geom.polygon_area()
    assert mesh.areas.sum() == pytest.approx(want, abs=1e-12)


def test_perforated_epsilon_one_matches_cell():
    geom = CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8)
    cell = build_cell_mesh(geom)
    perf = build_perforated_mesh(geom, 1.0)
    assert len(perf.vertices) == len(cell.vertices)
    assert len(perf.triangles) == len(cell.triangles)
    assert perf.areas.sum() == pytest.approx(cell.areas.sum(), abs=1e-14)


def test_nonconforming_epsilon_raises():
    geom = CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8)
    with pytest.raises(GeometryError):
        build_perforated_mesh(geom, 0.4)


def test_no_vertex_inside_any_hole():
    geom = CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8)
    mesh = build_perforated_mesh(geom, 0.25)
    eps = mesh.epsilon
    local = np.mod(mesh.vertices / eps, 1.0)
    d = np.hypot(local[:, 0] - 0.5, local[:, 1] - 0.5)
    inradius = 0.25 * np.cos(np.pi / geom.hole_segments)
    assert np.all(d > inradius - 1e-12)


def test_mesh_file_round_trip_bit_exact(tmp_path):
    geom = CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8)
    mesh = build_perforated_mesh(geom, 0.5)
    path = tmp_path / "mesh.txt"
    save_mesh(mesh, path)
    back = load_mesh(path, epsilon=0.5)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.array_equal(np.sort(back.gamma_edges, axis=None),
                          np.sort(mesh.gamma_edges, axis=None))
    assert np.array_equal(np.sort(back.outer_edges, axis=None),
                          np.sort(mesh.outer_edges, axis=None))
    save_mesh(back, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_text() == path.read_text()


def test_vtk_export_writes_legacy_header(tmp_path):
    mesh = build_cell_mesh(CellGeometry(hole_radius=0.0, divisions=2))
    path = tmp_path / "mesh.vtk"
    save_vtk(mesh, path, fields={"u": np.zeros(len(mesh.vertices))})
    text = path.read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    assert "DATASET UNSTRUCTURED_GRID" in text
    assert "POINT_DATA 9" in text


def test_outer_edges_trace_unit_square():
    geom = CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8)
    mesh = build_perforated_mesh(geom, 0.5)
    length = sum(np.hypot(*(mesh.vertices[a] - mesh.vertices[b]))
                 for a, b in mesh.outer_edges)
    assert length == pytest.approx(4.0, abs=1e-12)
    for a, b in mesh.outer_edges:
        for v in (a, b):
            x, y = mesh.vertices[v]
            assert min(x, y, 1 - x, 1 - y) < 1e-12
