"""Unit-cell corrector problems and the effective macroscopic model.

Elliptic correctors feed the effective tensors; when the pseudoparabolic and
elliptic terms carry different cell coefficients, time-dependent correctors
generate a convolution kernel sampled on the shared time grid.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (CoercivityError, DimensionError, DomainError,
                     InterpolationError)
from .fem import (PeriodicMap, assemble_mass, assemble_stiffness, solve_spd,
                  triangle_gradients)


def coeff_on_triangles(mesh, coeff):
    """Per-triangle coefficient values from a scalar, array or callable."""
    nt = len(mesh.triangles)
    if coeff is None:
        return np.ones(nt)
    if np.isscalar(coeff):
        return np.full(nt, float(coeff))
    if callable(coeff):
        cent = mesh.vertices[mesh.triangles].mean(axis=1)
        return np.asarray(coeff(cent[:, 0], cent[:, 1]), dtype=float)
    arr = np.asarray(coeff, dtype=float)
    if arr.shape != (nt,):
        raise DimensionError("coefficient must be one value per triangle")
    return arr


@dataclass
class CorrectorSet:
    """Periodic zero-mean correctors for both coordinate directions."""

    omega: np.ndarray  # (2, nv)
    coefficient_id: str
    mesh_id: str
    zero_mean: bool = True


@dataclass
class EffectiveTensor:
    entries: np.ndarray  # (2, 2)
    coefficient_id: str


@dataclass
class MemoryKernel:
    """Sampled convolution kernel at one macroscopic point."""

    times: np.ndarray
    matrices: np.ndarray  # (N+1, 2, 2)

    def max_abs(self):
        return float(np.max(np.abs(self.matrices)))


@dataclass
class HomogenizedSources:
    """Coefficients of the effective convective and uptake terms."""

    mean_q: np.ndarray
    g: np.ndarray
    c_gamma: float
    f0_mean: float

    @property
    def f_coeff(self):
        return self.c_gamma * self.f0_mean


@dataclass
class EffectiveModel:
    """Everything the macroscale solver needs from the cell scale."""

    a_hom: np.ndarray
    b_hom: np.ndarray
    sources: HomogenizedSources
    correctors: CorrectorSet = None
    correctors_b: CorrectorSet = None
    cell_mesh: object = None
    coeff_a: object = None
    coeff_b: object = None

    @property
    def two_coefficient(self):
        if self.coeff_a is None or self.coeff_b is None:
            return False
        return not np.array_equal(self.coeff_a, self.coeff_b)


def _cell_mean_ops(mesh):
    M = assemble_mass(mesh)
    ones = np.ones(len(mesh.vertices))
    wts = M @ ones
    area = float(ones @ wts)
    return wts, area


def solve_cell_elliptic(mesh, coeff, tol=1e-12):
    """Periodic correctors of the coefficient field, one per direction.

    Solves div(c (grad w + e_j)) = 0 on the cell with natural conditions at
    the hole, periodic faces and zero mean.
    """
    c = coeff_on_triangles(mesh, coeff)
    if np.any(c <= 0.0):
        raise CoercivityError("cell coefficient must be strictly positive")
    S = assemble_stiffness(mesh, c)
    grads = triangle_gradients(mesh)
    pmap = PeriodicMap(mesh)
    wts, area = _cell_mean_ops(mesh)
    out = np.empty((2, len(mesh.vertices)))
    for j in range(2):
        contrib = -(c * mesh.areas)[:, None] * grads[:, :, j]
        rhs = np.zeros(len(mesh.vertices))
        np.add.at(rhs, mesh.triangles.ravel(), contrib.ravel())
        w, _ = _periodic_pinned_solve(S, rhs, pmap, tol)
        w -= (wts @ w) / area
        out[j] = w
    cid = "coeff-%s" % np.round(float(c.mean()), 12)
    return CorrectorSet(omega=out, coefficient_id=cid, mesh_id=mesh.mesh_id)


def _periodic_pinned_solve(A_full, rhs_full, pmap, tol, x0=None):
    A = pmap.reduce(A_full)
    b = pmap.reduce_vec(rhs_full)
    free = np.arange(1, A.shape[0])
    Aff = A[free][:, free].tocsr()
    x0f = None if x0 is None else pmap.restrict(x0)[free]
    xf = solve_spd(Aff, b[free], tol=tol, x0=x0f)
    x = np.zeros(A.shape[0])
    x[free] = xf
    return pmap.expand(x), pmap


def corrector_gradients(mesh, field):
    g = triangle_gradients(mesh)
    return np.einsum("tai,ta->ti", g, np.asarray(field)[mesh.triangles])


def effective_tensor(correctors, coeff, mesh):
    """Mean flux of the corrected unit gradients over the fluid part."""
    c = coeff_on_triangles(mesh, coeff)
    if correctors.omega.shape[1] != len(mesh.vertices):
        raise DimensionError("correctors do not match the mesh")
    area = float(mesh.areas.sum())
    ent = np.empty((2, 2))
    for j in range(2):
        gw = corrector_gradients(mesh, correctors.omega[j])
        for i in range(2):
            flux = c * ((1.0 if i == j else 0.0) + gw[:, i])
            ent[i, j] = float(np.sum(flux * mesh.areas)) / area
    return EffectiveTensor(entries=ent, coefficient_id=correctors.coefficient_id)


def corrector_energy(correctors, coeff, mesh, j):
    """Weighted energy of the corrected direction, for the exactness check."""
    c = coeff_on_triangles(mesh, coeff)
    gw = corrector_gradients(mesh, correctors.omega[j])
    gw = gw.copy()
    gw[:, j] += 1.0
    return float(np.sum(c * (gw[:, 0] ** 2 + gw[:, 1] ** 2) * mesh.areas))


def solve_cell_memory(mesh, coeff_a, coeff_b, u_history, params, delta,
                      times, omega_set=None, theta_set=None, shift=0,
                      tol=1e-12):
    """Rothe evolution of the mismatch correctors, one per direction.

    The initial state is the difference of the two elliptic correctors;
    each step solves a periodic cell system with the history-frozen scalar
    coefficients. Returns an array of shape (2, N+1, nv).
    """
    u = np.asarray(u_history, dtype=float)
    if np.any(u < 0.0):
        raise DomainError("history of the macroscopic state must be "
                          "nonnegative")
    if delta <= 0:
        raise DomainError("memory cell problem needs a positive delta")
    times = np.asarray(times, dtype=float)
    if len(times) != len(u):
        raise DimensionError("history and time grid differ in length")
    ca = coeff_on_triangles(mesh, coeff_a)
    cb = coeff_on_triangles(mesh, coeff_b)
    if omega_set is None:
        omega_set = solve_cell_elliptic(mesh, ca, tol=tol)
    if theta_set is None:
        theta_set = solve_cell_elliptic(mesh, cb, tol=tol)
    S_a = assemble_stiffness(mesh, ca)
    S_b = assemble_stiffness(mesh, cb)
    pmap = PeriodicMap(mesh)
    wts, area = _cell_mean_ops(mesh)
    n_steps = len(times) - 1
    h = (times[-1] - times[0]) / max(n_steps, 1)
    nv = len(mesh.vertices)
    chi = np.zeros((2, n_steps + 1, nv))
    for j in range(2):
        chi[j, 0] = omega_set.omega[j] - theta_set.omega[j]
    for m in range(1, n_steps + 1):
        idx = min(m + shift, n_steps)
        z = max(u[idx], 0.0) + delta
        k_m = float(params.k(z))
        pc_m = float(params.P_c(z)) if not params.constant_mode else 1.0
        A_full = (k_m / h) * S_a + (k_m * pc_m) * S_b
        for j in range(2):
            rhs = (k_m / h) * (S_a @ chi[j, m - 1])
            w, _ = _periodic_pinned_solve(A_full.tocsr(), rhs, pmap, tol,
                                          x0=chi[j, m - 1])
            w -= (wts @ w) / area
            chi[j, m] = w
    return chi


def memory_kernel(chi, coeff_a, coeff_b, u_history, params, mesh,
                  times, delta, shift=0):
    """Sample the convolution kernel from the mismatch-corrector rates."""
    ca = coeff_on_triangles(mesh, coeff_a)
    cb = coeff_on_triangles(mesh, coeff_b)
    u = np.asarray(u_history, dtype=float)
    times = np.asarray(times, dtype=float)
    n_steps = len(times) - 1
    if chi.shape[1] != n_steps + 1:
        raise DimensionError("corrector history and time grid differ")
    h = (times[-1] - times[0]) / max(n_steps, 1)
    area = float(mesh.areas.sum())
    mats = np.zeros((n_steps + 1, 2, 2))
    grads = [[corrector_gradients(mesh, chi[j, m]) for m in range(n_steps + 1)]
             for j in range(2)]
    for m in range(n_steps + 1):
        m_rate = max(m, 1)  # one-sided rate at the initial time
        idx = min(m + shift, n_steps)
        z = max(u[idx], 0.0) + delta
        k_m = float(params.k(z))
        pc_m = float(params.P_c(z)) if not params.constant_mode else 1.0
        for j in range(2):
            g_now = grads[j][m]
            rate = (grads[j][m_rate] - grads[j][m_rate - 1]) / h
            flux = k_m * (ca[:, None] * rate + cb[:, None] * pc_m * g_now)
            mats[m, :, j] = (flux * mesh.areas[:, None]).sum(axis=0) / area
    return MemoryKernel(times=times, matrices=mats)


def homogenized_sources(mesh, velocity, source, params):
    """Cell means entering the effective convective and uptake terms."""
    wts_area = float(mesh.areas.sum())
    gamma_len = sum(np.hypot(*(mesh.vertices[a] - mesh.vertices[b]))
                    for a, b in mesh.gamma_edges)
    c_gamma = gamma_len / wts_area
    if velocity is None or velocity.mode == "zero":
        mean_q = np.zeros(2)
    else:
        q = velocity.on_triangles(mesh)
        mean_q = (q * mesh.areas[:, None]).sum(axis=0) / wts_area
    return HomogenizedSources(mean_q=mean_q, g=np.asarray(params.g),
                              c_gamma=c_gamma, f0_mean=source.f0_mean())


def build_effective_model(cell_mesh, params, source, velocity=None,
                          coeff_a=None, coeff_b=None, tol=1e-12):
    """Solve both cell problems and collect the effective model."""
    ca = coeff_on_triangles(cell_mesh, coeff_a)
    cb = ca if coeff_b is None else coeff_on_triangles(cell_mesh, coeff_b)
    omega = solve_cell_elliptic(cell_mesh, ca, tol=tol)
    if coeff_b is None or np.array_equal(ca, cb):
        theta = omega
    else:
        theta = solve_cell_elliptic(cell_mesh, cb, tol=tol)
    a_hom = effective_tensor(omega, ca, cell_mesh).entries
    b_hom = effective_tensor(theta, cb, cell_mesh).entries
    sources = homogenized_sources(cell_mesh, velocity, source, params)
    return EffectiveModel(a_hom=a_hom, b_hom=b_hom, sources=sources,
                          correctors=omega, correctors_b=theta,
                          cell_mesh=cell_mesh, coeff_a=ca, coeff_b=cb)


class StructuredInterpolator:
    """P1 evaluation on the solid alternating-diagonal unit-square mesh."""

    def __init__(self, divisions):
        self.n = int(divisions)

    def _locate(self, x, y):
        n = self.n
        if not (-1e-12 <= x <= 1.0 + 1e-12 and -1e-12 <= y <= 1.0 + 1e-12):
            raise InterpolationError("point (%g, %g) outside the unit square"
                                     % (x, y))
        i = min(max(int(np.floor(x * n)), 0), n - 1)
        j = min(max(int(np.floor(y * n)), 0), n - 1)
        lx = x * n - i
        ly = y * n - j
        return i, j, lx, ly

    def _corners(self, values, i, j):
        n = self.n
        g = lambda a, b: values[b * (n + 1) + a]
        return g(i, j), g(i + 1, j), g(i + 1, j + 1), g(i, j + 1)

    def value(self, values, x, y):
        i, j, lx, ly = self._locate(x, y)
        bl, br, tr, tl = self._corners(values, i, j)
        if (i + j) % 2 == 0:
            if ly <= lx:  # (bl, br, tr)
                return bl + (br - bl) * lx + (tr - br) * ly
            return bl + (tr - tl) * lx + (tl - bl) * ly
        if lx + ly <= 1.0:  # (bl, br, tl)
            return bl + (br - bl) * lx + (tl - bl) * ly
        return tr + (tr - tl) * (lx - 1.0) + (tr - br) * (ly - 1.0)

    def gradient(self, values, x, y):
        i, j, lx, ly = self._locate(x, y)
        bl, br, tr, tl = self._corners(values, i, j)
        n = self.n
        if (i + j) % 2 == 0:
            if ly <= lx:
                return np.array([(br - bl) * n, (tr - br) * n])
            return np.array([(tr - tl) * n, (tl - bl) * n])
        if lx + ly <= 1.0:
            return np.array([(br - bl) * n, (tl - bl) * n])
        return np.array([(tr - tl) * n, (tr - br) * n])

    def values(self, values, points):
        return np.array([self.value(values, p[0], p[1]) for p in points])


def reconstruct_corrector(macro_values, macro_divisions, correctors,
                          perf_mesh, epsilon):
    """First-order corrected field at the perforated-mesh vertices.

    Adds the scaled cell corrector, contracted with the macroscopic
    gradient, to the interpolated macroscopic field.
    """
    interp = StructuredInterpolator(macro_divisions)
    if np.any(perf_mesh.cell_vertex < 0):
        raise InterpolationError("perforated mesh lacks cell provenance")
    omega_at = correctors.omega[:, perf_mesh.cell_vertex]  # (2, nv)
    out = np.empty(len(perf_mesh.vertices))
    for v, (x, y) in enumerate(perf_mesh.vertices):
        val = interp.value(macro_values, x, y)
        grad = interp.gradient(macro_values, x, y)
        out[v] = val + epsilon * (grad[0] * omega_at[0, v]
                                  + grad[1] * omega_at[1, v])
    return out
