"""Structured triangulations of the unit cell and of the perforated unit square.

The unit cell is meshed by an alternating-diagonal background grid; a circular
hole is approximated by a regular polygon and stitched to the grid by an
angular zipper ring, so triangle areas add up to the exact polygonal area.
Tiled copies of the cell produce the perforated macroscopic domain.
"""

import numpy as np

from .errors import GeometryError, MeshError

AREA_TOL = 1e-12
PAIR_TOL = 1e-12


class CellGeometry:
    """Geometry of one periodic cell with an optional polygonal hole.

    Parameters
    ----------
        hole_center : pair of floats
            center of the hole inside the open unit square
        hole_radius : float
            circumradius of the polygonal hole, in [0, 0.5); 0 means no hole
        hole_segments : int
            number of polygon edges, at least 8 and divisible by 4
        divisions : int
            background grid subdivisions per cell edge
    """

    def __init__(self, hole_center=(0.5, 0.5), hole_radius=0.25,
                 hole_segments=16, divisions=8):
        self.hole_center = (float(hole_center[0]), float(hole_center[1]))
        self.hole_radius = float(hole_radius)
        self.hole_segments = int(hole_segments)
        self.divisions = int(divisions)
        self._check()

    def _check(self):
        cx, cy = self.hole_center
        r = self.hole_radius
        if self.divisions < 1:
            raise GeometryError("divisions must be at least 1")
        if r < 0 or r >= 0.5:
            raise GeometryError("hole_radius must lie in [0, 0.5)")
        if r > 0:
            if self.hole_segments < 8 or self.hole_segments % 4 != 0:
                raise GeometryError(
                    "hole_segments must be >= 8 and divisible by 4")
            margin = min(cx, cy, 1.0 - cx, 1.0 - cy)
            if r >= margin:
                raise GeometryError(
                    "hole of radius %g around (%g, %g) touches the cell "
                    "boundary" % (r, cx, cy))

    def polygon(self):
        """Hole polygon vertices, counterclockwise, exactly 4-fold symmetric."""
        m = self.hole_segments
        r = self.hole_radius
        if r == 0.0:
            return np.zeros((0, 2))
        q = m // 4
        # first-quadrant offsets; the other quadrants are exact rotations so
        # the vertex set is invariant under quarter turns up to roundoff in
        # the final translation only
        ang = 2.0 * np.pi * (np.arange(q) + 0.5) / m
        base = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
        offs = [base]
        rot = base
        for _ in range(3):
            rot = np.column_stack([-rot[:, 1], rot[:, 0]])
            offs.append(rot)
        offs = np.vstack(offs)
        return offs + np.asarray(self.hole_center)

    def polygon_area(self):
        m, r = self.hole_segments, self.hole_radius
        if r == 0.0:
            return 0.0
        return 0.5 * m * r * r * np.sin(2.0 * np.pi / m)

    def polygon_perimeter(self):
        m, r = self.hole_segments, self.hole_radius
        if r == 0.0:
            return 0.0
        return 2.0 * m * r * np.sin(np.pi / m)


class CellMesh:
    """Conforming triangulation of the unit cell minus its hole.

    Fields
    ------
        vertices : (nv, 2) float array
        triangles : (nt, 3) int array, counterclockwise
        gamma_edges : (ne, 2) int array, hole-boundary edges
        periodic_pairs : (np, 2) int array, (slave, master) across faces
        areas : (nt,) float array
        hole_fill : HoleFill or None, companion triangulation of the hole
    """

    def __init__(self, vertices, triangles, gamma_edges, periodic_pairs,
                 geometry=None, hole_fill=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        self.gamma_edges = np.asarray(gamma_edges, dtype=np.int64).reshape(-1, 2)
        self.periodic_pairs = np.asarray(periodic_pairs, dtype=np.int64).reshape(-1, 2)
        self.geometry = geometry
        self.hole_fill = hole_fill
        self.areas = triangle_areas(self.vertices, self.triangles)

    @property
    def mesh_id(self):
        return "cell-%dv-%dt" % (len(self.vertices), len(self.triangles))

    @property
    def edge_tags(self):
        return {"gamma": self.gamma_edges}


class PerforatedMesh:
    """Triangulation of the unit square minus a periodic array of holes.

    Same layout as CellMesh plus the outer boundary tag, the microstructure
    scale and per-triangle cell indices.
    """

    def __init__(self, vertices, triangles, gamma_edges, outer_edges,
                 epsilon, cell_index, geometry=None, hole_fill=None,
                 cell_vertex=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        self.gamma_edges = np.asarray(gamma_edges, dtype=np.int64).reshape(-1, 2)
        self.outer_edges = np.asarray(outer_edges, dtype=np.int64).reshape(-1, 2)
        self.epsilon = float(epsilon)
        self.cell_index = np.asarray(cell_index, dtype=np.int64).reshape(-1, 2)
        self.geometry = geometry
        self.hole_fill = hole_fill
        # provenance: index of the generating cell-mesh vertex, used by the
        # corrector reconstruction; -1 when unknown (e.g. file round trip)
        if cell_vertex is None:
            cell_vertex = np.full(len(self.vertices), -1, dtype=np.int64)
        self.cell_vertex = np.asarray(cell_vertex, dtype=np.int64)
        self.areas = triangle_areas(self.vertices, self.triangles)

    @property
    def mesh_id(self):
        return "perf-%dv-%dt" % (len(self.vertices), len(self.triangles))

    @property
    def edge_tags(self):
        return {"gamma": self.gamma_edges, "outer": self.outer_edges}


class HoleFill:
    """Companion triangulation of the hole interiors.

    Vertices 0..nv-1 coincide with the host mesh; fan centers are appended.
    """

    def __init__(self, vertices, triangles, n_host):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        self.n_host = int(n_host)
        self.areas = triangle_areas(self.vertices, self.triangles)

    @property
    def mesh_id(self):
        return "fill-%dv-%dt" % (len(self.vertices), len(self.triangles))


def triangle_areas(vertices, triangles):
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _grid(n):
    """Alternating-diagonal triangulation of the unit square, n x n squares."""
    xs = np.arange(n + 1) / n
    xv, yv = np.meshgrid(xs, xs, indexing="xy")
    verts = np.column_stack([xv.ravel(), yv.ravel()])

    def g(i, j):
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            bl, br = g(i, j), g(i + 1, j)
            tr, tl = g(i + 1, j + 1), g(i, j + 1)
            if (i + j) % 2 == 0:
                tris.append((bl, br, tr))
                tris.append((bl, tr, tl))
            else:
                tris.append((bl, br, tl))
                tris.append((br, tr, tl))
    return verts, np.asarray(tris, dtype=np.int64)


def _point_tri_dist(pt, a, b, c):
    """Euclidean distance from pt to the closed triangle abc."""
    v = np.array([b - a, c - b, a - c])
    w = np.array([pt - a, pt - b, pt - c])
    cross = v[:, 0] * w[:, 1] - v[:, 1] * w[:, 0]
    if np.all(cross >= 0) or np.all(cross <= 0):
        return 0.0
    d = np.inf
    for base, seg in ((a, b - a), (b, c - b), (c, a - c)):
        t = np.dot(pt - base, seg) / np.dot(seg, seg)
        t = min(1.0, max(0.0, t))
        d = min(d, np.hypot(*(pt - (base + t * seg))))
    return d


def _cavity_loop(verts, tris, cavity_mask):
    """Boundary cycle of the cavity triangle set, counterclockwise around it."""
    edge_owner = {}
    for t in np.nonzero(cavity_mask)[0]:
        i, j, k = tris[t]
        for a, b in ((i, j), (j, k), (k, i)):
            edge_owner[(a, b)] = t
    nxt = {}
    for (a, b) in edge_owner:
        if (b, a) not in edge_owner:
            if a in nxt:
                raise MeshError("cavity boundary is not a simple cycle")
            nxt[a] = b
    if not nxt:
        raise MeshError("empty cavity boundary")
    start = min(nxt)
    loop = [start]
    cur = nxt[start]
    while cur != start:
        loop.append(cur)
        if len(loop) > len(nxt):
            raise MeshError("cavity boundary does not close")
        cur = nxt[cur]
    if len(loop) != len(nxt):
        raise MeshError("cavity boundary has more than one component")
    return loop


def _unwrap_ccw(angles):
    out = np.empty_like(angles)
    prev = angles[0]
    out[0] = prev
    for i in range(1, len(angles)):
        a = angles[i]
        while a < prev:
            a += 2.0 * np.pi
        # clamp tiny backtracks from staircase corners
        out[i] = a
        prev = a
    return out


def _zipper(inner_pts_idx, outer_idx, verts, center):
    """Triangulate the ring between two star-shaped loops around center.

    Both loops are counterclockwise; the outer loop strictly encloses the
    inner one. Returns (ring_triangles,).
    """
    c = np.asarray(center)
    vin = verts[inner_pts_idx] - c
    vout = verts[outer_idx] - c
    ain = np.arctan2(vin[:, 1], vin[:, 0])
    aout = np.arctan2(vout[:, 1], vout[:, 0])
    # rotate the outer loop so it starts just at/after the first inner angle
    rel = np.mod(aout - ain[0], 2.0 * np.pi)
    shift = int(np.argmin(rel))
    outer = list(outer_idx[shift:]) + list(outer_idx[:shift])
    aout = np.concatenate([aout[shift:], aout[:shift]])
    ain_u = _unwrap_ccw(ain - ain[0])
    aout_u = _unwrap_ccw(aout - ain[0])

    m, L = len(inner_pts_idx), len(outer)

    def area(t):
        a, b2, c2 = verts[t[0]], verts[t[1]], verts[t[2]]
        return 0.5 * ((b2[0] - a[0]) * (c2[1] - a[1])
                      - (b2[1] - a[1]) * (c2[0] - a[0]))

    tris = []
    i = o = 0
    # advance the loop with the smaller next-event angle; when the curves
    # run close together that choice can fold, so fall back to the other
    # advance whenever the preferred triangle is not positively oriented
    while i < m or o < L:
        nin = ain_u[(i + 1) % m] + (2.0 * np.pi if i + 1 >= m else 0.0)
        nou = aout_u[(o + 1) % L] + (2.0 * np.pi if o + 1 >= L else 0.0)
        tri_in = (inner_pts_idx[i % m], outer[o % L],
                  inner_pts_idx[(i + 1) % m])
        tri_out = (outer[o % L], outer[(o + 1) % L],
                   inner_pts_idx[i % m])
        prefer_inner = o >= L or (i < m and nin <= nou)
        cands = [(tri_in, True), (tri_out, False)] if prefer_inner \
            else [(tri_out, False), (tri_in, True)]
        placed = False
        for tri, is_inner in cands:
            if (is_inner and i >= m) or (not is_inner and o >= L):
                continue
            if area(tri) > 0.0:
                tris.append(tri)
                if is_inner:
                    i += 1
                else:
                    o += 1
                placed = True
                break
        if not placed:
            raise MeshError("ring stitching failed between the hole polygon "
                            "and the grid cavity")
    return np.asarray(tris, dtype=np.int64)


def build_cell_mesh(geom):
    """Mesh the unit cell for the given geometry.

    Returns a CellMesh whose triangle areas sum to 1 minus the polygon area
    (within roundoff) and whose hole boundary carries gamma tags. Raises
    GeometryError when the hole does not fit, MeshError on a degenerate
    triangulation.
    """
    n = geom.divisions
    verts, tris = _grid(n)
    c = np.asarray(geom.hole_center)
    r = geom.hole_radius

    if r == 0.0:
        mesh = CellMesh(verts, tris, np.zeros((0, 2), dtype=np.int64),
                        _periodic_pairs(verts, n), geometry=geom)
        _assert_positive(mesh)
        return mesh

    # clearance ring keeps the zipper triangles away from zero thickness;
    # on coarse grids retry with a thinner ring before giving up
    h = 1.0 / n
    dist = np.array([_point_tri_dist(c, *verts[t]) for t in tris])
    loop = None
    for factor in (0.45, 0.35):
        r_clear = r + factor * h
        cavity = dist < r_clear
        if not cavity.any():
            raise MeshError("hole smaller than resolvable by the grid")
        trial = _cavity_loop(verts, tris, cavity)
        b = verts[trial]
        if b.min() > 0.0 + 1e-14 and b.max() < 1.0 - 1e-14:
            loop = trial
            break
    if loop is None:
        raise GeometryError(
            "hole plus clearance reaches the cell boundary; increase "
            "divisions or shrink the hole")

    # refine polygon edges toward the grid spacing so the angular pace of
    # the two zipper loops stays matched on fine grids; the subdivision
    # points lie on the polygon, so the exact hole area is unchanged
    poly = _subdivide_polygon(geom.polygon(), 0.8 * h)
    nv0 = len(verts)
    verts = np.vstack([verts, poly])
    inner_idx = np.arange(nv0, nv0 + len(poly))
    ring = _zipper(inner_idx, np.asarray(loop), verts, c)

    kept = tris[~cavity]
    all_tris = np.vstack([kept, ring])

    # drop unreferenced grid vertices, keep a stable order
    used = np.zeros(len(verts), dtype=bool)
    used[all_tris.ravel()] = True
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(used.sum())
    verts2 = verts[used]
    tris2 = remap[all_tris]
    inner2 = remap[inner_idx]
    m = len(poly)
    gamma = np.column_stack([inner2, inner2[(np.arange(m) + 1) % m]])

    fill = _fan_fill(verts2, inner2, c)
    mesh = CellMesh(verts2, tris2, gamma, _periodic_pairs(verts2, n),
                    geometry=geom, hole_fill=fill)
    _assert_positive(mesh)
    want = 1.0 - geom.polygon_area()
    got = float(mesh.areas.sum())
    if abs(got - want) > 1e-10 * max(1.0, want):
        raise MeshError("ring triangulation does not tile the cell: area "
                        "%.17g vs %.17g" % (got, want))
    return mesh


def _subdivide_polygon(poly, target):
    """Insert equally spaced points on each edge; identical split count per
    edge keeps the refined loop exactly as symmetric as the polygon."""
    m = len(poly)
    edge = np.hypot(*(poly[1] - poly[0]))
    nsub = max(1, int(np.ceil(edge / target - 1e-9)))
    if nsub == 1:
        return poly
    out = []
    for k in range(m):
        a, b = poly[k], poly[(k + 1) % m]
        out.append(a)
        for s in range(1, nsub):
            t = s / nsub
            out.append((1.0 - t) * a + t * b)
    return np.asarray(out)


def _fan_fill(verts, ring_idx, center):
    nv = len(verts)
    fill_verts = np.vstack([verts, np.asarray(center)[None, :]])
    m = len(ring_idx)
    fan = np.column_stack([
        np.full(m, nv, dtype=np.int64),
        ring_idx,
        ring_idx[(np.arange(m) + 1) % m]])
    return HoleFill(fill_verts, fan, nv)


def _assert_positive(mesh):
    bad = np.nonzero(mesh.areas <= 0.0)[0]
    if len(bad):
        raise MeshError("degenerate or flipped triangles: %s"
                        % bad[:8].tolist())


def _periodic_pairs(verts, n):
    """(slave, master) pairs: right->left, top->bottom, corners->origin."""
    tol = PAIR_TOL
    left = {}
    bottom = {}
    origin = None
    pairs = []
    for i, (x, y) in enumerate(verts):
        if abs(x) <= tol and abs(y) <= tol:
            origin = i
        if abs(x) <= tol and tol < y < 1.0 - tol:
            left[round(y * n)] = i
        if abs(y) <= tol and tol < x < 1.0 - tol:
            bottom[round(x * n)] = i
    for i, (x, y) in enumerate(verts):
        if abs(x - 1.0) <= tol and tol < y < 1.0 - tol:
            pairs.append((i, left[round(y * n)]))
        elif abs(y - 1.0) <= tol and tol < x < 1.0 - tol:
            pairs.append((i, bottom[round(x * n)]))
        elif (abs(x - 1.0) <= tol or abs(x) <= tol) and \
                (abs(y - 1.0) <= tol or abs(y) <= tol):
            if i != origin:
                pairs.append((i, origin))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def build_perforated_mesh(geom, epsilon):
    """Tile scaled cell meshes over the unit square.

    1/epsilon must be an integer so the tiling is exact; every cell carries
    a hole because the hole closure lies strictly inside the open cell.
    """
    inv = 1.0 / float(epsilon)
    m_cells = int(round(inv))
    if abs(inv - m_cells) > 1e-9 or m_cells < 1:
        raise GeometryError("1/epsilon must be a positive integer, got %r"
                            % (epsilon,))
    eps = 1.0 / m_cells

    cell = build_cell_mesh(geom)
    cv, ct = cell.vertices, cell.triangles
    n = geom.divisions

    def key(x, y):
        return (round(x, 12), round(y, 12))

    verts = []
    vmap = {}
    tris = []
    gamma = []
    outer = []
    cell_index = []
    cell_vertex = []

    gamma_local = cell.gamma_edges
    faces = _local_face_edges(cv, n)
    for b in range(m_cells):
        for a in range(m_cells):
            loc2glob = np.empty(len(cv), dtype=np.int64)
            for li, (x, y) in enumerate(cv):
                gx, gy = (x + a) * eps, (y + b) * eps
                k = key(gx, gy)
                gi = vmap.get(k)
                if gi is None:
                    gi = len(verts)
                    vmap[k] = gi
                    verts.append((gx, gy))
                    cell_vertex.append(li)
                loc2glob[li] = gi
            tris.append(loc2glob[ct])
            cell_index.append(np.repeat([[a, b]], len(ct), axis=0))
            if len(gamma_local):
                gamma.append(loc2glob[gamma_local])
            # outer tags: local face edges of boundary cells
            for side, active in (("left", a == 0), ("right", a == m_cells - 1),
                                 ("bottom", b == 0), ("top", b == m_cells - 1)):
                if active:
                    for li0, li1 in faces[side]:
                        outer.append((loc2glob[li0], loc2glob[li1]))

    verts = np.asarray(verts)
    tris = np.vstack(tris)
    gamma = np.vstack(gamma) if gamma else np.zeros((0, 2), dtype=np.int64)
    outer = np.asarray(outer, dtype=np.int64)
    cell_index = np.vstack(cell_index)
    cell_vertex = np.asarray(cell_vertex, dtype=np.int64)

    fill = None
    if cell.hole_fill is not None:
        fill = _tiled_fill(cell, verts, vmap, m_cells, eps, key)

    mesh = PerforatedMesh(verts, tris, gamma, outer, eps, cell_index,
                          geometry=geom, hole_fill=fill,
                          cell_vertex=cell_vertex)
    _assert_positive(mesh)
    return mesh


def _local_face_edges(cell_verts, n):
    """Consecutive vertex pairs along each cell face, by coordinates."""
    tol = PAIR_TOL
    sides = {"left": [], "right": [], "bottom": [], "top": []}
    for i, (x, y) in enumerate(cell_verts):
        if abs(x) <= tol:
            sides["left"].append((round(y * n), i))
        if abs(x - 1.0) <= tol:
            sides["right"].append((round(y * n), i))
        if abs(y) <= tol:
            sides["bottom"].append((round(x * n), i))
        if abs(y - 1.0) <= tol:
            sides["top"].append((round(x * n), i))
    out = {}
    for side, lst in sides.items():
        lst.sort()
        out[side] = [(lst[k][1], lst[k + 1][1]) for k in range(len(lst) - 1)]
    return out


def _tiled_fill(cell, verts, vmap, m_cells, eps, key):
    fans = []
    centers = []
    ring = cell.hole_fill.triangles[:, 1:]  # (m, 2) local ring edges
    cfill = cell.hole_fill.vertices[cell.hole_fill.n_host]
    nv = len(verts)
    all_verts = [verts]
    for b in range(m_cells):
        for a in range(m_cells):
            cidx = nv + len(centers)
            centers.append(((cfill[0] + a) * eps, (cfill[1] + b) * eps))
            glob = np.empty(ring.shape, dtype=np.int64)
            for r in range(ring.shape[0]):
                for s in range(2):
                    x, y = cell.vertices[ring[r, s]]
                    glob[r, s] = vmap[key((x + a) * eps, (y + b) * eps)]
            fans.append(np.column_stack([
                np.full(len(ring), cidx, dtype=np.int64), glob]))
    all_verts.append(np.asarray(centers))
    return HoleFill(np.vstack(all_verts), np.vstack(fans), nv)


class ValidationReport:
    """List of invariant violations found by validate_mesh."""

    def __init__(self):
        self.violations = []

    def add(self, kind, where, detail):
        self.violations.append((kind, where, detail))

    @property
    def ok(self):
        return not self.violations

    def __str__(self):
        if self.ok:
            return "mesh valid"
        return "\n".join("%s at %s: %s" % v for v in self.violations)


def validate_mesh(mesh):
    """Check orientation, conformity, tag closure and periodic pairing."""
    rep = ValidationReport()
    areas = triangle_areas(mesh.vertices, mesh.triangles)
    for t in np.nonzero(areas <= 0.0)[0]:
        rep.add("orientation", int(t), "non-positive area %.3e" % areas[t])

    edge_count = {}
    for t, (i, j, k) in enumerate(mesh.triangles):
        for a, b in ((i, j), (j, k), (k, i)):
            e = (min(a, b), max(a, b))
            edge_count[e] = edge_count.get(e, 0) + 1
    for e, cnt in edge_count.items():
        if cnt > 2:
            rep.add("conformity", e, "edge shared by %d triangles" % cnt)

    for tag, edges in mesh.edge_tags.items():
        deg = {}
        for a, b in edges:
            e = (min(a, b), max(a, b))
            if e not in edge_count:
                rep.add("tags", e, "%s edge not in mesh" % tag)
            elif edge_count[e] != 1:
                rep.add("tags", e, "%s edge is interior" % tag)
            for v in (a, b):
                deg[v] = deg.get(v, 0) + 1
        if tag == "gamma":
            for v, d in deg.items():
                if d != 2:
                    rep.add("gamma-closure", int(v),
                            "gamma vertex degree %d" % d)

    pairs = getattr(mesh, "periodic_pairs", None)
    if pairs is not None and len(pairs):
        V = mesh.vertices
        for idx, (s, m) in enumerate(pairs):
            d = V[s] - V[m]
            err = min(abs(abs(d[0]) - 1.0), abs(d[0])) + \
                min(abs(abs(d[1]) - 1.0), abs(d[1]))
            if err > PAIR_TOL:
                rep.add("periodic", (int(s), int(m)),
                        "offset (%.3e, %.3e) is not a unit translation"
                        % (d[0], d[1]))
    return rep


# mesh file format: line oriented, 17 significant digits, 0-based indices
def save_mesh(mesh, path):
    edges = []
    for tag, es in mesh.edge_tags.items():
        for a, b in es:
            edges.append((int(a), int(b), tag))
    lines = ["mesh2d %d %d %d" % (len(mesh.vertices), len(mesh.triangles),
                                  len(edges))]
    for x, y in mesh.vertices:
        lines.append("v %.17g %.17g" % (x, y))
    for i, j, k in mesh.triangles:
        lines.append("t %d %d %d" % (i, j, k))
    for a, b, tag in edges:
        lines.append("e %d %d %s" % (a, b, tag))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path, epsilon=None):
    """Read a mesh file; with epsilon it reloads as a PerforatedMesh."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "mesh2d":
            raise MeshError("not a mesh2d file: %s" % path)
        nv, nt, ne = (int(x) for x in header[1:])
        verts = np.empty((nv, 2))
        tris = np.empty((nt, 3), dtype=np.int64)
        tags = {"gamma": [], "outer": []}
        for r in range(nv):
            parts = fh.readline().split()
            verts[r] = (float(parts[1]), float(parts[2]))
        for r in range(nt):
            parts = fh.readline().split()
            tris[r] = (int(parts[1]), int(parts[2]), int(parts[3]))
        for _ in range(ne):
            parts = fh.readline().split()
            tags[parts[3]].append((int(parts[1]), int(parts[2])))
    gamma = np.asarray(tags["gamma"], dtype=np.int64).reshape(-1, 2)
    outer = np.asarray(tags["outer"], dtype=np.int64).reshape(-1, 2)
    if epsilon is None and len(outer) == 0:
        n = int(round(1.0 / _min_spacing(verts)))
        return CellMesh(verts, tris, gamma, _periodic_pairs(verts, n))
    eps = 1.0 if epsilon is None else float(epsilon)
    cells = np.zeros((nt, 2), dtype=np.int64)
    cent = verts[tris].mean(axis=1)
    cells[:, 0] = np.minimum((cent[:, 0] / eps).astype(np.int64),
                             int(round(1 / eps)) - 1)
    cells[:, 1] = np.minimum((cent[:, 1] / eps).astype(np.int64),
                             int(round(1 / eps)) - 1)
    return PerforatedMesh(verts, tris, gamma, outer, eps, cells)


def _min_spacing(verts):
    xs = np.unique(np.round(verts[:, 0], 12))
    return np.min(np.diff(xs)) if len(xs) > 1 else 1.0


def save_vtk(mesh, path, fields=None):
    """Legacy-VTK ASCII export for external visualization."""
    nv, nt = len(mesh.vertices), len(mesh.triangles)
    lines = ["# vtk DataFile Version 3.0", "percell mesh", "ASCII",
             "DATASET UNSTRUCTURED_GRID", "POINTS %d double" % nv]
    for x, y in mesh.vertices:
        lines.append("%.17g %.17g 0" % (x, y))
    lines.append("CELLS %d %d" % (nt, 4 * nt))
    for i, j, k in mesh.triangles:
        lines.append("3 %d %d %d" % (i, j, k))
    lines.append("CELL_TYPES %d" % nt)
    lines.extend(["5"] * nt)
    if fields:
        lines.append("POINT_DATA %d" % nv)
        for name, values in fields.items():
            lines.append("SCALARS %s double 1" % name)
            lines.append("LOOKUP_TABLE default")
            lines.extend("%.17g" % v for v in values)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
