"""Homogenized obstacle problem on the solid unit square.

Same implicit penalized stepping as the microscale solver, with effective
tensors in the fluxes, the uptake term turned into a volume reaction, a
volumetric obstacle at every node, and an optional convolution term fed by
cell-scale memory kernels.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, GridMismatchError, PicardDivergence
from .fem import (assemble_mass, assemble_stiffness, solve_spd,
                  tagged_vertices, triangle_gradients)
from .homogenize import (EffectiveModel, memory_kernel, solve_cell_memory)
from .meshing import CellGeometry, build_perforated_mesh
from .micro import (AprioriReport, MicroConfig, MicroOperators,
                    StepDiagnostics, Trajectory, apriori_monitor,
                    project_K, _nodal_coefficients)
from .model import BoundarySource, ModelParams, VelocityField


def build_macro_mesh(divisions):
    """Solid unit-square mesh with outer tags and no holes."""
    return build_perforated_mesh(CellGeometry(hole_radius=0.0,
                                              divisions=divisions), 1.0)


@dataclass
class MacroConfig:
    """Homogenized run: obstacle at every node, effective coefficients."""

    divisions: int = 32
    T: float = 0.5
    N: int = 50
    mu: float = 1e-3
    delta: float = 1e-2
    projection_mode: str = "exact_J"
    picard_tol: float = 1e-10
    picard_max: int = 50
    params: ModelParams = field(default_factory=ModelParams)
    source: BoundarySource = field(default_factory=BoundarySource)
    velocity: VelocityField = field(default_factory=VelocityField)
    effective: EffectiveModel = None
    memory_mode: str = "off"
    outer_iters: int = 2
    u0_mode: str = "constant_kappaD"
    u0_values: object = None

    def __post_init__(self):
        if self.T <= 0 or self.N < 1 or self.mu <= 0:
            raise DimensionError("need T > 0, N >= 1, mu > 0")
        if self.effective is None:
            raise DimensionError("macro run needs an assembled effective "
                                 "model")
        self.source.resolve(self.params)

    @property
    def h(self):
        return self.T / self.N


class MacroOperators(MicroOperators):
    """Macro cache: every non-Dirichlet node carries the obstacle."""

    def __init__(self, mesh, config):
        shim = MicroConfig(epsilon=1.0, T=config.T, N=config.N,
                           mu=config.mu, delta=max(config.delta, 1e-3),
                           params=config.params, source=config.source)
        super().__init__(mesh, shim)
        # volumetric constraint: all free nodes, not just tagged ones
        self._constrained = np.arange(len(self.free))
        self.obstacle_nodes = self.free
        self.clamp_nodes = self.free
        self._projector = None


def _apply_kernel(K, dg):
    if np.asarray(K).ndim == 2:
        return dg @ np.asarray(K).T
    return np.einsum("tij,tj->ti", K, dg)


def convolution_term(kernel_matrices, grad_states, mesh, j,
                     areas=None, grads=None):
    """Trapezoidal discrete convolution of the kernel with gradient rates.

    grad_states[m] holds the per-triangle gradient of the state at step m;
    kernels may be shared (2, 2) or per-triangle (nt, 2, 2) samples. The
    result is a load vector over the vertices.
    """
    if j >= len(kernel_matrices):
        raise GridMismatchError("kernel grid shorter than the run")
    if j >= len(grad_states):
        raise GridMismatchError("gradient history shorter than the run")
    if areas is None:
        areas = mesh.areas
    if grads is None:
        grads = triangle_gradients(mesh)
    nt = len(mesh.triangles)
    acc = np.zeros((nt, 2))
    for m in range(1, j + 1):
        dg = grad_states[m] - grad_states[m - 1]
        K_hi = kernel_matrices[min(j - m + 1, len(kernel_matrices) - 1)]
        K_lo = kernel_matrices[j - m]
        acc += 0.5 * (_apply_kernel(K_hi, dg) + _apply_kernel(K_lo, dg))
    contrib = np.einsum("tai,ti->ta", grads, acc) * areas[:, None]
    out = np.zeros(len(mesh.vertices))
    np.add.at(out, mesh.triangles.ravel(), contrib.ravel())
    return out


def _macro_step(prev, t_j, config, mesh, ops, grad_hist, kernels,
                active_set=None):
    params = config.params
    em = config.effective
    h = config.h
    delta = config.delta
    kappa = params.kappa_D
    free = ops.free
    inv_mu = 0.0 if np.isinf(config.mu) else 1.0 / config.mu

    cent_prev = prev[mesh.triangles].mean(axis=1)
    z_prev = np.maximum(cent_prev, 0.0) + delta
    k_prev = params.k(z_prev)
    F_tri = em.sources.mean_q[None, :] \
        * config.velocity.H(cent_prev)[:, None] \
        + k_prev[:, None] * em.sources.g[None, :]
    load_F = ops.grad_load(F_tri)
    f_nodal = em.sources.f_coeff * config.source.f1(prev, params)
    load_f = ops.M1 @ f_nodal

    conv_load = None
    if kernels is not None and grad_hist is not None:
        # past part of the convolution: pad with a zero increment so the
        # implicit newest term is handled inside the sweep instead
        j = len(grad_hist)
        conv_load = convolution_term(kernels, grad_hist + [grad_hist[-1]],
                                     mesh, j, areas=mesh.areas,
                                     grads=ops.grads)

    dir_vec = np.zeros(len(prev))
    dir_vec[ops.dirichlet] = kappa
    two_coeff = em.two_coefficient or config.memory_mode == "on"

    w = prev.copy()
    act = list(active_set) if active_set is not None else []
    iters = 0
    inc = np.inf
    nfree = len(free)
    for sweep in range(config.picard_max):
        iters = sweep + 1
        k_n, kpc_n, bp_n = _nodal_coefficients(params, delta, w)
        Mb = assemble_mass(mesh, bp_n)
        kt = k_n[mesh.triangles].mean(axis=1)
        kpct = kpc_n[mesh.triangles].mean(axis=1)
        S_k = assemble_stiffness(mesh, kt, tensor=em.a_hom)
        S_pc = assemble_stiffness(mesh, kpct,
                                  tensor=em.b_hom if two_coeff else em.a_hom)
        K = (Mb / h + S_pc + S_k / h).tocsr()
        rhs = (Mb @ prev) / h + (S_k @ prev) / h + load_F - load_f
        if conv_load is not None:
            dg_now = np.einsum("tai,ta->ti", ops.grads,
                               (w - prev)[mesh.triangles])
            head = 0.5 * (_apply_kernel(kernels[0], dg_now)
                          + _apply_kernel(kernels[min(1, len(kernels) - 1)],
                                          dg_now))
            head = np.einsum("tai,ti->ta", ops.grads, head) \
                * mesh.areas[:, None]
            head_load = np.zeros(len(prev))
            np.add.at(head_load, mesh.triangles.ravel(), head.ravel())
            rhs = rhs - conv_load - head_load
        pen_block = None
        if inv_mu:
            if config.projection_mode == "exact_J":
                proj = ops.projector(kappa)
                _, act = proj.project((w - kappa)[free], active=act)
                if act:
                    S_A, _ = proj.schur(act)
                    block = inv_mu * np.linalg.inv(S_A)
                    ii = np.repeat(act, len(act))
                    jj = np.tile(act, len(act))
                    pen_block = sp.coo_matrix(
                        (block.ravel(), (ii, jj)),
                        shape=(nfree, nfree)).tocsr()
            else:
                act = [int(i) for i in ops.obstacle_nodes if w[i] < 0.0]
                if act:
                    dpen = np.zeros(len(w))
                    dpen[act] = inv_mu * ops.MS.diagonal()[act]
                    K = (K + sp.diags(dpen)).tocsr()
                    ea = np.zeros(len(w))
                    ea[act] = w[act]
                    rhs = rhs + dpen * ea - inv_mu * (ops.MS @ ea)
        lift = K @ dir_vec
        Kff = K[free][:, free].tocsr()
        if pen_block is not None:
            Kff = (Kff + pen_block).tocsr()
        u = dir_vec.copy()
        u[free] = solve_spd(Kff, rhs[free] - lift[free], tol=1e-12,
                            x0=w[free])
        d = u - w
        inc = float(np.sqrt(max(d @ (ops.MS @ d), 0.0)))
        w = u
        if inc <= config.picard_tol:
            break
    else:
        raise PicardDivergence(
            "macro picard stalled at %.3e after %d sweeps"
            % (inc, config.picard_max))
    if active_set is not None and config.projection_mode == "exact_J":
        active_set[:] = act

    v = w - kappa
    pw = project_K(v, mesh, config.projection_mode, operators=ops)
    violation = float((ops.MS @ (v - pw)) @ v)
    min_all = float(w.min())
    diag = StepDiagnostics(step=-1, time=t_j, picard_iters=iters,
                           picard_residual=inc, violation=violation,
                           min_gamma=min_all)
    return w, diag


def solve_macro(config, mesh, kernels=None):
    """Run the homogenized time loop; kernels switch on the memory term."""
    ops = MacroOperators(mesh, config)
    kappa = config.params.kappa_D
    if config.u0_mode == "constant_kappaD":
        u0 = np.full(len(mesh.vertices), kappa)
    else:
        u0 = np.asarray(config.u0_values, dtype=float).copy()
        if len(u0) != len(mesh.vertices):
            raise DimensionError("u0 does not match the mesh")
        u0[ops.dirichlet] = kappa
    h = config.h

    v0 = u0 - kappa
    pw0 = project_K(v0, mesh, config.projection_mode, operators=ops)
    states = [u0]
    diags = [StepDiagnostics(step=0, time=0.0, picard_iters=0,
                             picard_residual=0.0,
                             violation=float((ops.MS @ (v0 - pw0)) @ v0),
                             min_gamma=float(u0.min()))]
    grad_hist = None
    kernel_mats = None
    if kernels is not None:
        kernel_mats = kernels
        g0 = np.einsum("tai,ta->ti", ops.grads, u0[mesh.triangles])
        grad_hist = [g0]

    active = []
    u = u0
    for j in range(1, config.N + 1):
        t_j = j * h
        u, diag = _macro_step(u, t_j, config, mesh, ops,
                              grad_hist, kernel_mats, active_set=active)
        diag.step = j
        states.append(u)
        diags.append(diag)
        if grad_hist is not None:
            grad_hist.append(np.einsum("tai,ta->ti", ops.grads,
                                       u[mesh.triangles]))

    times = np.array([j * h for j in range(config.N + 1)])
    traj = Trajectory(times, states, diags, mesh.mesh_id,
                      meta={"delta": config.delta, "mu": config.mu,
                            "macro": True})
    shim = MicroConfig(epsilon=1.0, T=config.T, N=config.N, mu=config.mu,
                       delta=config.delta, params=config.params,
                       source=config.source)
    report = apriori_monitor(traj, shim, mesh, operators=ops,
                             delta=config.delta)
    return traj, report


def _node_kernels(config, mesh, u_trajectory):
    """Memory kernels per macro node from that node's state history."""
    em = config.effective
    times = u_trajectory.times
    hist = np.array([s for s in u_trajectory.states])  # (N+1, nv)
    kernels = []
    for v in range(len(mesh.vertices)):
        u_hist = np.maximum(hist[:, v], 0.0)
        chi = solve_cell_memory(em.cell_mesh, em.coeff_a, em.coeff_b,
                                u_hist, config.params, config.delta, times,
                                omega_set=em.correctors,
                                theta_set=em.correctors_b)
        kern = memory_kernel(chi, em.coeff_a, em.coeff_b, u_hist,
                             config.params, em.cell_mesh, times,
                             config.delta)
        kernels.append(kern.matrices)
    return kernels


def _vertex_kernels_to_triangles(mesh, kernels):
    """Average the three vertex kernels of each triangle, per time step."""
    stack = np.stack(kernels)  # (nv, N+1, 2, 2)
    tri = stack[mesh.triangles]  # (nt, 3, N+1, 2, 2)
    return tri.mean(axis=1)  # (nt, N+1, 2, 2)


def solve_macro_memory(config, mesh):
    """Outer coupling between the macro solve and its memory kernels.

    Starts from the constant-history kernel, then alternates macro solves
    with kernel recomputation; reports the inter-sweep trajectory drift in
    Trajectory.meta["outer_drift"].
    """
    if config.memory_mode != "on":
        raise DimensionError("memory coupling requires memory_mode='on'")
    em = config.effective
    kappa = config.params.kappa_D
    times = np.arange(config.N + 1) * config.h

    # initial kernel from the constant initial history
    u_hist0 = np.full(config.N + 1, kappa)
    chi0 = solve_cell_memory(em.cell_mesh, em.coeff_a, em.coeff_b, u_hist0,
                             config.params, config.delta, times,
                             omega_set=em.correctors,
                             theta_set=em.correctors_b)
    kern0 = memory_kernel(chi0, em.coeff_a, em.coeff_b, u_hist0,
                          config.params, em.cell_mesh, times, config.delta)
    nt = len(mesh.triangles)
    kernels_tri = np.broadcast_to(
        kern0.matrices[None], (nt,) + kern0.matrices.shape).copy()
    kernels_list = [kernels_tri[:, m] for m in range(config.N + 1)]

    M1 = assemble_mass(mesh)
    drift = []
    traj = None
    for it in range(max(config.outer_iters, 1)):
        new_traj, report = solve_macro(config, mesh, kernels=kernels_list)
        if traj is not None:
            acc = 0.0
            for ua, ub in zip(traj.states[1:], new_traj.states[1:]):
                d = ua - ub
                acc += config.h * float(d @ (M1 @ d))
            drift.append(float(np.sqrt(acc)))
        traj = new_traj
        if it < config.outer_iters - 1:
            node_k = _node_kernels(config, mesh, traj)
            tri_k = _vertex_kernels_to_triangles(mesh, node_k)
            kernels_list = [tri_k[:, m] for m in range(config.N + 1)]
    traj.meta["outer_drift"] = drift
    return traj, report
