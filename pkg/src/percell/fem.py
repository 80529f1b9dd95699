"""P1 finite-element infrastructure on the workbench meshes.

Assembly of weighted mass, stiffness and boundary-mass forms, a deterministic
preconditioned conjugate-gradient solver with a dense oracle, norm reports,
and the discrete-harmonic extension into hole interiors.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionError, MeshError, SolverError, TagError

# exact integrals of products of three barycentric coordinates, divided by
# the triangle area: same index 1/10, two equal 1/30, all distinct 1/60
_M3 = np.empty((3, 3, 3))
for _a in range(3):
    for _b in range(3):
        for _c in range(3):
            n_eq = len({_a, _b, _c})
            _M3[_a, _b, _c] = {1: 1.0 / 10.0, 2: 1.0 / 30.0,
                               3: 1.0 / 60.0}[n_eq]

_M2 = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


@dataclass
class NodalField:
    """Per-vertex values bound to the identity of their mesh."""

    values: np.ndarray
    mesh_id: str = ""

    def check(self, mesh):
        if len(self.values) != len(mesh.vertices):
            raise DimensionError("field of length %d on a mesh with %d "
                                 "vertices" % (len(self.values),
                                               len(mesh.vertices)))
        return self


@dataclass
class NormReport:
    """L2, H1-seminorm, Lp gradient norm and tagged-boundary L2 form."""

    l2: float
    h1_semi: float
    lp_grad: float
    lp_exponent: float
    boundary_l2_gamma: float


def triangle_gradients(mesh):
    """Gradients of the three hat functions on every triangle, (nt, 3, 2)."""
    p = mesh.vertices[mesh.triangles]
    area2 = 2.0 * mesh.areas
    g = np.empty((len(mesh.triangles), 3, 2))
    for a in range(3):
        q1 = p[:, (a + 1) % 3]
        q2 = p[:, (a + 2) % 3]
        g[:, a, 0] = (q1[:, 1] - q2[:, 1]) / area2
        g[:, a, 1] = (q2[:, 0] - q1[:, 0]) / area2
    return g


def _as_weight(mesh, weight):
    """Split a weight into per-triangle values or per-vertex values."""
    nt, nv = len(mesh.triangles), len(mesh.vertices)
    if np.isscalar(weight):
        return np.full(nt, float(weight)), None
    w = np.asarray(weight, dtype=float)
    if w.shape == (nt,) and nt != nv:
        return w, None
    if w.shape == (nv,):
        return None, w
    if w.shape == (nt,):
        return w, None
    raise DimensionError("weight of shape %s fits neither %d triangles nor "
                         "%d vertices" % (w.shape, nt, nv))


def _scatter(mesh, local):
    """Assemble per-triangle 3x3 blocks into a CSR matrix."""
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    nv = len(mesh.vertices)
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(nv, nv))
    return A.tocsr()


def assemble_mass(mesh, weight=1.0):
    """Consistent P1 mass matrix with an interpolated weight.

    Per-vertex weights are integrated exactly against the cubic products
    of hat functions; per-triangle weights scale the standard local mass.

    Parameters
    ----------
        mesh : CellMesh, PerforatedMesh or HoleFill
        weight : scalar, per-triangle array or per-vertex array, >= 0
    """
    wt, wv = _as_weight(mesh, weight)
    if wt is not None:
        local = wt[:, None, None] * mesh.areas[:, None, None] * _M2[None]
    else:
        wloc = wv[mesh.triangles]
        local = np.einsum("ta,abc->tbc", wloc, _M3) \
            * mesh.areas[:, None, None]
    return _scatter(mesh, local)


def assemble_stiffness(mesh, coeff=1.0, tensor=None):
    """P1 stiffness with midpoint evaluation of nodal coefficients.

    An optional constant 2x2 tensor multiplies the gradients, for effective
    models; coeff stays a scalar field evaluated at triangle centroids.
    """
    ct, cv = _as_weight(mesh, coeff)
    if cv is not None:
        ct = cv[mesh.triangles].mean(axis=1)
    g = triangle_gradients(mesh)
    if tensor is not None:
        tg = np.einsum("ij,taj->tai", np.asarray(tensor, dtype=float), g)
    else:
        tg = g
    local = np.einsum("tai,tbi->tab", tg, g) \
        * (ct * mesh.areas)[:, None, None]
    return _scatter(mesh, local)


def assemble_boundary_mass(mesh, tag, weight=1.0):
    """1-D P1 mass on tagged edges, exact for linear weights.

    On a perforated mesh the gamma form already carries the microstructure
    scale epsilon.
    """
    tags = mesh.edge_tags
    if tag not in tags:
        raise TagError("mesh has no %r edges (tags: %s)"
                       % (tag, sorted(tags)))
    edges = tags[tag]
    nv = len(mesh.vertices)
    scale = 1.0
    if tag == "gamma" and hasattr(mesh, "epsilon"):
        scale = mesh.epsilon
    if len(edges) == 0:
        return sp.csr_matrix((nv, nv))
    if np.isscalar(weight):
        wv = np.full(nv, float(weight))
    else:
        wv = np.asarray(weight, dtype=float)
        if wv.shape != (nv,):
            raise DimensionError("boundary weight must be per-vertex")
    p = mesh.vertices[edges]
    L = np.hypot(p[:, 1, 0] - p[:, 0, 0], p[:, 1, 1] - p[:, 0, 1]) * scale
    w0 = wv[edges[:, 0]]
    w1 = wv[edges[:, 1]]
    loc = np.empty((len(edges), 2, 2))
    loc[:, 0, 0] = L * (w0 / 4.0 + w1 / 12.0)
    loc[:, 1, 1] = L * (w0 / 12.0 + w1 / 4.0)
    loc[:, 0, 1] = loc[:, 1, 0] = L * (w0 + w1) / 12.0
    rows = np.repeat(edges, 2, axis=1).ravel()
    cols = np.tile(edges, (1, 2)).ravel()
    return sp.coo_matrix((loc.ravel(), (rows, cols)),
                         shape=(nv, nv)).tocsr()


def solve_spd(matrix, rhs, tol=1e-12, x0=None, max_iter=None):
    """Jacobi-preconditioned conjugate gradients, fixed iteration order.

    The residual is driven below tol times the right-hand-side norm; a
    SolverError reports breakdown or hitting the 10 * dimension cap.
    """
    n = matrix.shape[0]
    b = np.asarray(rhs, dtype=float)
    if b.shape != (n,):
        raise DimensionError("rhs of length %d for a %d-dim system"
                             % (len(b), n))
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    if max_iter is None:
        max_iter = 10 * n
    d = matrix.diagonal()
    if np.any(d <= 0.0):
        raise SolverError("matrix diagonal is not positive")
    dinv = 1.0 / d
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - matrix @ x
    if np.linalg.norm(r) <= tol * bnorm:
        return x
    z = dinv * r
    p = z.copy()
    rz = float(r @ z)
    for _ in range(max_iter):
        Ap = matrix @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise SolverError("conjugate gradient breakdown: p'Ap <= 0")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        z = dinv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError("conjugate gradients did not converge in %d iterations"
                      % max_iter)


def solve_dense(matrix, rhs):
    """Dense direct factorization, the test oracle for solve_spd."""
    A = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix)
    return np.linalg.solve(A, np.asarray(rhs, dtype=float))


def compute_norms(field, mesh, p=1.5, dt_field=None):
    """Quadrature norms of a nodal field (and optionally of its rate).

    The Lp gradient norm is taken from dt_field when one is supplied, since
    that is the quantity the monitoring estimates track.
    """
    u = np.asarray(field, dtype=float)
    if len(u) != len(mesh.vertices):
        raise DimensionError("field does not match the mesh")
    if not 1.0 < p <= 2.0:
        raise DimensionError("gradient exponent must lie in (1, 2]")
    M = assemble_mass(mesh)
    S = assemble_stiffness(mesh)
    l2 = float(np.sqrt(max(u @ (M @ u), 0.0)))
    h1 = float(np.sqrt(max(u @ (S @ u), 0.0)))
    gsrc = u if dt_field is None else np.asarray(dt_field, dtype=float)
    g = triangle_gradients(mesh)
    gv = np.einsum("tai,ta->ti", g, gsrc[mesh.triangles])
    mag = np.hypot(gv[:, 0], gv[:, 1])
    lp = float(np.sum(mag ** p * mesh.areas) ** (1.0 / p))
    try:
        Mb = assemble_boundary_mass(mesh, "gamma")
        bl2 = float(u @ (Mb @ u))
    except TagError:
        bl2 = 0.0
    return NormReport(l2=l2, h1_semi=h1, lp_grad=lp, lp_exponent=p,
                      boundary_l2_gamma=bl2)


def lumped_mass(mesh):
    """Row sums of the unweighted mass matrix."""
    M = assemble_mass(mesh)
    return np.asarray(M.sum(axis=1)).ravel()


def tagged_vertices(mesh, tag):
    edges = mesh.edge_tags.get(tag)
    if edges is None:
        raise TagError("unknown tag %r" % tag)
    if len(edges) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.asarray(edges).ravel())


def extend_into_holes(field, mesh):
    """Discrete-harmonic extension of a field into the hole interiors.

    Returns the field on the hole-filled companion mesh: unchanged on the
    perforated part, Laplace-extended from each hole-boundary trace.
    """
    fill = getattr(mesh, "hole_fill", None)
    if fill is None:
        raise MeshError("mesh was built without its hole-filled companion")
    u = np.asarray(field, dtype=float)
    if len(u) != len(mesh.vertices):
        raise DimensionError("field does not match the mesh")
    S = assemble_stiffness(fill)
    nh = fill.n_host
    out = np.empty(len(fill.vertices))
    out[:nh] = u
    inner = np.arange(nh, len(fill.vertices))
    Sii = S[inner][:, inner].tocsc()
    rhs = -S[inner][:, :nh] @ u
    if len(inner) == 1:
        out[inner] = rhs / Sii.toarray()[0, 0]
    elif len(inner):
        out[inner] = solve_spd(Sii.tocsr(), rhs, tol=1e-13)
    return out


class PeriodicMap:
    """Reduction of cell-mesh unknowns by slave-to-master identification."""

    def __init__(self, mesh, pin_one=False):
        nv = len(mesh.vertices)
        master = np.arange(nv)
        for s, m in mesh.periodic_pairs:
            master[s] = m
        # resolve chains (corner slaves point at the origin directly)
        for _ in range(2):
            master = master[master]
        keep = np.nonzero(master == np.arange(nv))[0]
        self.index_of = {int(k): i for i, k in enumerate(keep)}
        self.full_to_red = np.array([self.index_of[int(m)] for m in master])
        self.keep = keep
        P = sp.coo_matrix((np.ones(nv), (np.arange(nv), self.full_to_red)),
                          shape=(nv, len(keep)))
        self.P = P.tocsr()
        self.pinned = 0 if pin_one else None

    def reduce(self, A):
        return (self.P.T @ A @ self.P).tocsr()

    def reduce_vec(self, v):
        return self.P.T @ v

    def restrict(self, v):
        return np.asarray(v)[self.keep]

    def expand(self, x):
        return x[self.full_to_red]


def solve_periodic(mesh, A_full, rhs_full, pmap=None, tol=1e-12, x0=None):
    """SPD solve on the periodic quotient space with one pinned unknown.

    The pinned-node artifact is removed afterwards by shifting to zero
    weighted mean; callers that need a specific mean shift again.
    """
    if pmap is None:
        pmap = PeriodicMap(mesh)
    A = pmap.reduce(A_full)
    b = pmap.reduce_vec(rhs_full)
    free = np.arange(1, A.shape[0])
    Aff = A[free][:, free].tocsr()
    xf = solve_spd(Aff, b[free], tol=tol,
                   x0=None if x0 is None else pmap.restrict(x0)[free])
    x = np.zeros(A.shape[0])
    x[free] = xf
    return pmap.expand(x), pmap
