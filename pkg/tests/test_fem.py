import numpy as np
import pytest
import sympy

from percell.errors import DimensionError, MeshError, SolverError
from percell.fem import (assemble_boundary_mass, assemble_mass,
                         assemble_stiffness, compute_norms, extend_into_holes,
                         solve_dense, solve_spd, tagged_vertices)
from percell.meshing import CellGeometry, CellMesh, build_cell_mesh, \
    build_perforated_mesh


def reference_triangle():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2]])
    mesh = CellMesh(verts, tris, np.zeros((0, 2), int), np.zeros((0, 2), int))
    return mesh


def test_reference_mass_weight_one():
    M = assemble_mass(reference_triangle(), 1.0).toarray()
    want = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24.0
    assert np.allclose(M, want, atol=1e-15)


def test_mass_weight_zero_is_zero():
    M = assemble_mass(reference_triangle(), 0.0).toarray()
    assert np.all(M == 0.0)


def test_mass_with_linear_weight_matches_symbolic_oracle():
    # oracle first: integrate x * phi_i * phi_j over the reference triangle
    x, y = sympy.symbols("x y")
    phis = [1 - x - y, x, y]
    oracle = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            inner = sympy.integrate(x * phis[i] * phis[j],
                                    (y, 0, 1 - x))
            oracle[i, j] = float(sympy.integrate(inner, (x, 0, 1)))
    weight = np.array([0.0, 1.0, 0.0])  # nodal interpolation of x
    M = assemble_mass(reference_triangle(), weight).toarray()
    assert np.allclose(M, oracle, atol=1e-15)


def test_reference_stiffness():
    K = assemble_stiffness(reference_triangle(), 1.0).toarray()
    want = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]])
    assert np.allclose(K, want, atol=1e-15)
    K2 = assemble_stiffness(reference_triangle(), 2.0).toarray()
    assert np.allclose(K2, 2.0 * K, atol=1e-15)


def test_stiffness_kernel_contains_constants():
    mesh = build_cell_mesh(CellGeometry(hole_radius=0.0, divisions=2))
    K = assemble_stiffness(mesh, 1.0)
    ones = np.ones(len(mesh.vertices))
    assert np.max(np.abs(K @ ones)) < 1e-14


def test_assembled_forms_symmetric_and_psd():
    mesh = build_cell_mesh(CellGeometry(hole_radius=0.25, hole_segments=16,
                                        divisions=8))
    rng = np.random.default_rng(0)
    for A in (assemble_mass(mesh), assemble_stiffness(mesh),
              assemble_mass(mesh, rng.random(len(mesh.vertices)))):
        diff = (A - A.T)
        scale = np.max(np.abs(A.data)) if A.nnz else 1.0
        assert np.max(np.abs(diff.data)) if diff.nnz else 0.0 <= 1e-14 * scale
        for _ in range(5):
            v = rng.standard_normal(A.shape[0])
            assert v @ (A @ v) >= -1e-12 * (v @ v)


def test_mass_quadratic_form_equals_area():
    geom = CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8)
    mesh = build_cell_mesh(geom)
    M = assemble_mass(mesh)
    ones = np.ones(len(mesh.vertices))
    assert ones @ (M @ ones) == pytest.approx(mesh.areas.sum(), abs=1e-12)


def test_boundary_mass_single_edge():
    verts = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 1.0]])
    mesh = CellMesh(verts, np.array([[0, 1, 2]]),
                    np.array([[0, 1]]), np.zeros((0, 2), int))
    B = assemble_boundary_mass(mesh, "gamma").toarray()
    want = np.zeros((3, 3))
    want[:2, :2] = 3.0 / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
    assert np.allclose(B, want, atol=1e-14)
    assert np.all(assemble_boundary_mass(mesh, "gamma", 0.0).toarray() == 0)


def test_boundary_mass_closed_loop_measures_length():
    geom = CellGeometry(hole_radius=0.25, hole_segments=32, divisions=16)
    mesh = build_cell_mesh(geom)
    B = assemble_boundary_mass(mesh, "gamma")
    ones = np.ones(len(mesh.vertices))
    # oracle: sum of the tagged edge lengths
    length = sum(np.hypot(*(mesh.vertices[a] - mesh.vertices[b]))
                 for a, b in mesh.gamma_edges)
    assert ones @ (B @ ones) == pytest.approx(length, rel=1e-13)


def test_boundary_mass_includes_epsilon_on_micro_mesh():
    geom = CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8)
    mesh = build_perforated_mesh(geom, 0.5)
    B = assemble_boundary_mass(mesh, "gamma")
    ones = np.ones(len(mesh.vertices))
    length = sum(np.hypot(*(mesh.vertices[a] - mesh.vertices[b]))
                 for a, b in mesh.gamma_edges)
    assert ones @ (B @ ones) == pytest.approx(0.5 * length, rel=1e-13)


def test_solve_spd_trivial_cases():
    import scipy.sparse as sp
    I = sp.identity(4, format="csr")
    r = np.array([1.0, -2.0, 3.0, 0.5])
    assert np.allclose(solve_spd(I, r), r, atol=1e-14)
    A = sp.csr_matrix(np.diag([2.0, 4.0]))
    assert np.allclose(solve_spd(A, np.array([2.0, 4.0])), [1.0, 1.0])


def test_solve_spd_matches_dense_oracle():
    mesh = build_cell_mesh(CellGeometry(hole_radius=0.0, divisions=8))
    xy = mesh.vertices
    u_m = xy[:, 0] * xy[:, 1]
    A = (assemble_stiffness(mesh) + assemble_mass(mesh)).tocsr()
    rhs = A @ u_m
    x = solve_spd(A, rhs, tol=1e-13)
    oracle = solve_dense(A, rhs)
    assert np.max(np.abs(x - oracle)) < 1e-10


def test_solve_spd_reports_breakdown():
    import scipy.sparse as sp
    A = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(SolverError):
        solve_spd(A, np.array([1.0, 1.0]))


def test_norms_of_simple_fields():
    mesh = build_cell_mesh(CellGeometry(hole_radius=0.0, divisions=8))
    c = 3.0 * np.ones(len(mesh.vertices))
    rep = compute_norms(c, mesh)
    assert rep.l2 == pytest.approx(3.0, abs=1e-12)
    assert rep.h1_semi == pytest.approx(0.0, abs=1e-12)
    x = mesh.vertices[:, 0]
    rep = compute_norms(x, mesh, p=1.5)
    assert rep.h1_semi == pytest.approx(1.0, abs=1e-12)
    assert rep.lp_grad == pytest.approx(1.0, abs=1e-12)


def test_norms_dimension_error():
    mesh = build_cell_mesh(CellGeometry(hole_radius=0.0, divisions=2))
    with pytest.raises(DimensionError):
        compute_norms(np.zeros(5), mesh)


def test_extension_constant_and_linear_exact():
    geom = CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8)
    mesh = build_perforated_mesh(geom, 0.5)
    kappa = 0.7 * np.ones(len(mesh.vertices))
    ext = extend_into_holes(kappa, mesh)
    assert np.allclose(ext, 0.7, atol=1e-12)
    x = mesh.vertices[:, 0]
    ext = extend_into_holes(x, mesh)
    fill_x = mesh.hole_fill.vertices[:, 0]
    assert np.max(np.abs(ext - fill_x)) < 1e-10


def test_extension_matches_dense_laplace_oracle():
    geom = CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8)
    mesh = build_perforated_mesh(geom, 1.0)
    rng = np.random.default_rng(3)
    u = rng.standard_normal(len(mesh.vertices))
    ext = extend_into_holes(u, mesh)
    fill = mesh.hole_fill
    S = assemble_stiffness(fill).toarray()
    inner = np.arange(fill.n_host, len(fill.vertices))
    oracle = np.linalg.solve(S[np.ix_(inner, inner)],
                             -S[np.ix_(inner, np.arange(fill.n_host))] @ u)
    assert np.max(np.abs(ext[inner] - oracle)) < 1e-10


def test_extension_is_linear_and_idempotent():
    geom = CellGeometry(hole_radius=0.25, hole_segments=16, divisions=8)
    mesh = build_perforated_mesh(geom, 1.0)
    rng = np.random.default_rng(4)
    u, v = rng.standard_normal((2, len(mesh.vertices)))
    lhs = extend_into_holes(2.0 * u - 3.0 * v, mesh)
    rhs = 2.0 * extend_into_holes(u, mesh) - 3.0 * extend_into_holes(v, mesh)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_extension_requires_companion():
    mesh = build_cell_mesh(CellGeometry(hole_radius=0.0, divisions=2))
    with pytest.raises(MeshError):
        extend_into_holes(np.zeros(9), mesh)


def test_manufactured_convergence_rates():
    # -lap(u) + u = f with u = x y (1-x)(1-y), zero on the boundary
    def solve(n):
        mesh = build_perforated_mesh(
            CellGeometry(hole_radius=0.0, divisions=n), 1.0)
        xy = mesh.vertices
        x, y = xy[:, 0], xy[:, 1]
        exact = x * y * (1 - x) * (1 - y)
        f = exact + 2 * y * (1 - y) + 2 * x * (1 - x)
        A = (assemble_stiffness(mesh) + assemble_mass(mesh)).tocsr()
        rhs = assemble_mass(mesh) @ f
        dirichlet = tagged_vertices(mesh, "outer")
        free = np.setdiff1d(np.arange(len(xy)), dirichlet)
        u = np.zeros(len(xy))
        u[free] = solve_spd(A[free][:, free].tocsr(), rhs[free], tol=1e-13)
        err = u - exact
        M = assemble_mass(mesh)
        S = assemble_stiffness(mesh)
        return np.sqrt(err @ (M @ err)), np.sqrt(err @ (S @ err))

    l2_8, h1_8 = solve(8)
    l2_16, h1_16 = solve(16)
    assert l2_8 / l2_16 >= 3.5
    assert h1_8 / h1_16 >= 1.8
