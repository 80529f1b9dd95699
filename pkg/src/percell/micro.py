"""Penalized microscale solver on the perforated domain.

Implicit time stepping with lagged convective and uptake data, per-step
Picard resolution of the nonlinear coefficients, and a penalty operator
built from the H1-type dual map composed with the projection onto the
shifted constraint set (zero at the outer boundary, bounded below at the
hole boundaries).
"""

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, DimensionError, PicardDivergence
from .fem import (assemble_boundary_mass, assemble_mass, assemble_stiffness,
                  lumped_mass, solve_spd, tagged_vertices, triangle_gradients)
from .model import (BoundarySource, ModelParams, VelocityField,
                    eval_F, eval_boundary_f, exponent_p)


@dataclass
class MicroConfig:
    """One microscale run: scales, schedules, tolerances and data."""

    epsilon: float = 0.25
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
    u0_mode: str = "constant_kappaD"
    u0_values: object = None
    coeff_a: object = None  # callable of cell coordinates or None for 1

    def __post_init__(self):
        if self.T <= 0 or self.N < 1 or self.mu <= 0:
            raise DimensionError("need T > 0, N >= 1, mu > 0")
        if self.projection_mode not in ("exact_J", "nodal_clamp"):
            raise DimensionError("unknown projection mode %r"
                                 % self.projection_mode)
        self.source.resolve(self.params)

    @property
    def h(self):
        return self.T / self.N

    def delta_schedule(self):
        if self.delta > 0:
            return [self.delta]
        return [1e-1, 1e-2, 1e-3]


@dataclass
class StepDiagnostics:
    step: int
    time: float
    picard_iters: int
    picard_residual: float
    violation: float
    min_gamma: float


class Trajectory:
    """Nodal states on the shared time grid plus per-step diagnostics."""

    def __init__(self, times, states, diagnostics, mesh_id, meta=None):
        self.times = np.asarray(times, dtype=float)
        self.states = [np.asarray(s, dtype=float) for s in states]
        self.diagnostics = diagnostics
        self.mesh_id = mesh_id
        self.meta = meta or {}

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        lines = []
        for d in self.diagnostics:
            lines.append("step %d %.17g %d %.17g %.17g"
                         % (d.step, d.time, d.picard_iters, d.violation,
                            d.min_gamma))
        with open(os.path.join(directory, "manifest.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        for j, u in enumerate(self.states):
            path = os.path.join(directory, "step_%04d.field" % j)
            with open(path, "w") as fh:
                fh.write("field %d\n" % len(u))
                fh.write("\n".join("%.17g" % v for v in u) + "\n")

    @classmethod
    def load(cls, directory):
        diags = []
        with open(os.path.join(directory, "manifest.txt")) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                diags.append(StepDiagnostics(
                    step=int(parts[1]), time=float(parts[2]),
                    picard_iters=int(parts[3]), picard_residual=np.nan,
                    violation=float(parts[4]), min_gamma=float(parts[5])))
        states = []
        for d in diags:
            path = os.path.join(directory, "step_%04d.field" % d.step)
            with open(path) as fh:
                n = int(fh.readline().split()[1])
                vals = np.array([float(fh.readline()) for _ in range(n)])
            states.append(vals)
        times = np.array([d.time for d in diags])
        return cls(times, states, diags, mesh_id="", meta={})


@dataclass
class AprioriReport:
    """Monitored analogues of the uniform energy estimates."""

    sup_neg_power: float
    sup_grad_l2: float
    sup_b_l2: float
    int_pc_grad_sq: float
    int_k_dtgrad_sq: float
    int_bprime_dtu_sq: float
    int_dtgrad_lp: float
    lp_exponent: float
    min_nodal: float
    extension_grad_ratio: float = np.nan

    def as_dict(self):
        return {
            "sup_neg_power": self.sup_neg_power,
            "sup_grad_l2": self.sup_grad_l2,
            "sup_b_l2": self.sup_b_l2,
            "int_pc_grad_sq": self.int_pc_grad_sq,
            "int_k_dtgrad_sq": self.int_k_dtgrad_sq,
            "int_bprime_dtu_sq": self.int_bprime_dtu_sq,
            "int_dtgrad_lp": self.int_dtgrad_lp,
            "lp_exponent": self.lp_exponent,
            "min_nodal": self.min_nodal,
        }

    def entries(self):
        """Entries subject to the uniformity checks, in a fixed order."""
        return {
            "sup_neg_power": self.sup_neg_power,
            "sup_grad_l2": self.sup_grad_l2,
            "sup_b_l2": self.sup_b_l2,
            "int_pc_grad_sq": self.int_pc_grad_sq,
            "int_k_dtgrad_sq": self.int_k_dtgrad_sq,
            "int_bprime_dtu_sq": self.int_bprime_dtu_sq,
            "int_dtgrad_lp": self.int_dtgrad_lp,
        }


class JProjector:
    """Projection onto the shifted constraint set in the H1-type metric.

    Primal active-set iteration; the inner equality solves reuse one sparse
    factorization of the metric restricted to the free unknowns, so each
    sweep costs a handful of triangular back-solves.
    """

    def __init__(self, MS_ff, constrained_free_idx, bound):
        self.lu = spla.splu(MS_ff.tocsc())
        self.constrained = np.asarray(constrained_free_idx, dtype=np.int64)
        self.bound = float(bound)
        self._cols = {}
        self.n = MS_ff.shape[0]

    def _col(self, i):
        z = self._cols.get(i)
        if z is None:
            e = np.zeros(self.n)
            e[i] = 1.0
            z = self.lu.solve(e)
            self._cols[i] = z
        return z

    def schur(self, active):
        """Dense block of the metric inverse restricted to the active set."""
        cols = [self._col(i) for i in active]
        return np.array([[cols[q][active[p]] for q in range(len(active))]
                         for p in range(len(active))]), cols

    def project(self, v, active=None):
        """Return (w, active) with w the projection of v."""
        C = self.constrained
        b = self.bound
        if len(C) == 0:
            return v.copy(), []
        if active is None:
            active = [int(i) for i in C[v[C] < b]]
        active = sorted(set(active))
        tol = 1e-12 * max(1.0, abs(b))
        cset = set(int(i) for i in C)
        max_iters = self.n + 8
        for _ in range(max_iters):
            if not active:
                w = v.copy()
                lam = np.zeros(0)
            else:
                S, cols = self.schur(active)
                lam = np.linalg.solve(S, b - v[active])
                w = v.copy()
                for q, i in enumerate(active):
                    w += lam[q] * cols[q]
            inactive = [i for i in cset if i not in set(active)]
            viol = [i for i in inactive if w[i] < b - tol]
            if viol:
                active = sorted(set(active) | set(viol))
                continue
            if len(lam) and lam.min() < -tol:
                drop = active[int(np.argmin(lam))]
                active = [i for i in active if i != drop]
                continue
            return w, active
        raise ConvergenceError("active-set projection cycled past %d "
                               "iterations" % max_iters)


class MicroOperators:
    """Per-mesh cache of forms, index sets and the penalty projector."""

    def __init__(self, mesh, config):
        self.mesh = mesh
        self.params = config.params
        nv = len(mesh.vertices)
        self.dirichlet = tagged_vertices(mesh, "outer") \
            if "outer" in mesh.edge_tags else np.zeros(0, dtype=np.int64)
        self.gamma = tagged_vertices(mesh, "gamma") \
            if "gamma" in mesh.edge_tags else np.zeros(0, dtype=np.int64)
        self.free = np.setdiff1d(np.arange(nv), self.dirichlet)
        self.M1 = assemble_mass(mesh)
        self.S1 = assemble_stiffness(mesh)
        self.MS = (self.M1 + self.S1).tocsr()
        self.Mgamma = assemble_boundary_mass(mesh, "gamma") \
            if "gamma" in mesh.edge_tags else None
        self.grads = triangle_gradients(mesh)
        self.lumped = lumped_mass(mesh)
        pos = -np.ones(nv, dtype=np.int64)
        pos[self.free] = np.arange(len(self.free))
        self.free_pos = pos
        self.MS_ff = self.MS[self.free][:, self.free].tocsr()
        gamma_free = pos[np.intersect1d(self.gamma, self.free)]
        gamma_free = gamma_free[gamma_free >= 0]
        self._constrained = gamma_free
        self.clamp_nodes = self.gamma
        self._projector = None
        if config.coeff_a is None:
            self.A_tri = np.ones(len(mesh.triangles))
        elif callable(config.coeff_a):
            cent = mesh.vertices[mesh.triangles].mean(axis=1)
            eps = getattr(mesh, "epsilon", 1.0)
            y = np.mod(cent / eps, 1.0)
            self.A_tri = np.asarray(config.coeff_a(y[:, 0], y[:, 1]),
                                    dtype=float)
        else:
            self.A_tri = np.asarray(config.coeff_a, dtype=float)
        if np.any(self.A_tri <= 0):
            raise DimensionError("coefficient field must be positive")

    def projector(self, kappa_D):
        if self._projector is None:
            self._projector = JProjector(self.MS_ff, self._constrained,
                                         -kappa_D)
        return self._projector

    def grad_load(self, F_tri):
        """Load vector of a per-triangle vector field against gradients."""
        mesh = self.mesh
        contrib = np.einsum("tai,ti->ta", self.grads, F_tri) \
            * mesh.areas[:, None]
        out = np.zeros(len(mesh.vertices))
        np.add.at(out, mesh.triangles.ravel(), contrib.ravel())
        return out


def project_K(v, mesh, mode, operators=None, config=None, active=None):
    """Project the shifted field onto the discrete constraint set.

    nodal_clamp clamps hole-boundary nodes from below and zeroes the outer
    boundary; exact_J minimizes the H1-type metric by active sets.
    """
    if operators is None:
        operators = MicroOperators(mesh, config or MicroConfig(
            epsilon=getattr(mesh, "epsilon", 1.0)))
    kappa = operators.params.kappa_D
    v = np.asarray(v, dtype=float)
    if len(v) != len(mesh.vertices):
        raise DimensionError("field does not match the mesh")
    out = v.copy()
    out[operators.dirichlet] = 0.0
    if mode == "nodal_clamp":
        g = operators.clamp_nodes
        out[g] = np.maximum(out[g], -kappa)
        return out
    proj = operators.projector(kappa)
    w_free, act = proj.project(out[operators.free], active=active)
    out[operators.free] = w_free
    if active is not None:
        active[:] = act
    return out


def penalty_apply(v, mesh, mode, operators=None, config=None):
    """Dual-weighted residual of the constraint: (M + S)(v - P(v))."""
    if operators is None:
        operators = MicroOperators(mesh, config or MicroConfig(
            epsilon=getattr(mesh, "epsilon", 1.0)))
    w = project_K(v, mesh, mode, operators=operators)
    return operators.MS @ (np.asarray(v, dtype=float) - w)


def _nodal_coefficients(params, delta, u):
    z = np.maximum(u, 0.0) + delta
    if params.constant_mode:
        ones = np.ones_like(u)
        return ones, ones, ones
    k = params.k(z)
    kpc = params.k_P_c(z)
    bp = params.b_prime(z)
    return k, kpc, bp


def micro_step(prev, t_j, config, mesh, operators, active_set=None):
    """One implicit step of the penalized scheme.

    Convective and uptake data are frozen at the previous state; the
    remaining coefficients and the penalty projection are resolved by
    Picard sweeps, each one a symmetric positive definite solve.
    """
    params = config.params
    h = config.h
    if config.delta <= 0 and not params.constant_mode:
        raise DimensionError("micro_step needs a positive delta; limit mode "
                             "is handled by solve_micro")
    delta = config.delta
    kappa = params.kappa_D
    ops = operators
    mesh_nv = len(mesh.vertices)
    prev = np.asarray(prev, dtype=float)
    if len(prev) != mesh_nv:
        raise DimensionError("state does not match the mesh")

    inv_mu = 0.0 if np.isinf(config.mu) else 1.0 / config.mu

    # lagged data
    cent_prev = prev[mesh.triangles].mean(axis=1)
    F_tri = eval_F(config.velocity, params, delta, cent_prev, mesh=mesh)
    load_F = ops.grad_load(F_tri)
    if ops.Mgamma is not None and len(ops.gamma):
        f_nodal = np.zeros(mesh_nv)
        f_nodal[ops.gamma] = eval_boundary_f(config.source, params, t_j,
                                             prev[ops.gamma])
        load_f = ops.Mgamma @ f_nodal
    else:
        load_f = np.zeros(mesh_nv)

    dir_vec = np.zeros(mesh_nv)
    dir_vec[ops.dirichlet] = kappa
    free = ops.free

    import scipy.sparse as sp

    w = prev.copy()
    act = list(active_set) if active_set is not None else []
    iters = 0
    inc = np.inf
    nfree = len(free)
    for sweep in range(config.picard_max):
        iters = sweep + 1
        k_n, kpc_n, bp_n = _nodal_coefficients(params, delta, w)
        Mb = assemble_mass(mesh, bp_n)
        kt = ops.A_tri * k_n[mesh.triangles].mean(axis=1)
        kpct = ops.A_tri * kpc_n[mesh.triangles].mean(axis=1)
        S_pc = assemble_stiffness(mesh, kpct)
        S_k = assemble_stiffness(mesh, kt)
        K = (Mb / h + S_pc + S_k / h).tocsr()
        rhs = (Mb @ prev) / h + (S_k @ prev) / h + load_F - load_f
        # frozen-active-set penalty: exact and zero off the contact set,
        # so feasible sweeps carry no artificial damping
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
                act = [int(i) for i in ops.gamma if w[i] < 0.0]
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
        u[free] = solve_spd(Kff, rhs[free] - lift[free],
                            tol=1e-12, x0=w[free])
        d = u - w
        inc = float(np.sqrt(max(d @ (ops.MS @ d), 0.0)))
        w = u
        if inc <= config.picard_tol:
            break
    else:
        raise PicardDivergence(
            "picard iteration stalled at increment %.3e after %d sweeps"
            % (inc, config.picard_max))
    if active_set is not None and config.projection_mode == "exact_J":
        active_set[:] = act

    v = w - kappa
    pw = project_K(v, mesh, config.projection_mode, operators=ops)
    violation = float((ops.MS @ (v - pw)) @ v)
    min_gamma = float(w[ops.gamma].min()) if len(ops.gamma) else np.nan
    diag = StepDiagnostics(step=-1, time=t_j, picard_iters=iters,
                           picard_residual=inc, violation=violation,
                           min_gamma=min_gamma)
    return w, diag


def _initial_state(config, mesh, operators):
    kappa = config.params.kappa_D
    if config.u0_mode == "constant_kappaD":
        u0 = np.full(len(mesh.vertices), kappa)
    else:
        u0 = np.asarray(config.u0_values, dtype=float).copy()
        if len(u0) != len(mesh.vertices):
            raise DimensionError("u0 does not match the mesh")
    if len(operators.gamma) and np.any(u0[operators.gamma] < 0):
        raise DimensionError("u0 must be nonnegative at hole boundaries")
    if len(operators.dirichlet):
        if np.max(np.abs(u0[operators.dirichlet] - kappa)) > 1e-12:
            raise DimensionError("u0 must equal kappa_D on the outer "
                                 "boundary")
        u0[operators.dirichlet] = kappa
    return u0


def solve_micro(config, mesh):
    """Run the full time loop; in limit mode, run the delta schedule.

    Returns (Trajectory, AprioriReport). With delta == 0 the schedule
    {1e-1, 1e-2, 1e-3} is run and the successive trajectory differences
    are reported in Trajectory.meta["delta_cauchy"].
    """
    schedule = config.delta_schedule()
    if len(schedule) == 1:
        return _solve_micro_fixed(config, mesh, schedule[0])
    results = []
    for d in schedule:
        cfg = _with_delta(config, d)
        results.append(_solve_micro_fixed(cfg, mesh, d))
    cauchy = []
    M1 = assemble_mass(mesh)
    h = config.h
    for (ta, _), (tb, _) in zip(results[:-1], results[1:]):
        acc = 0.0
        for ua, ub in zip(ta.states[1:], tb.states[1:]):
            diff = ua - ub
            acc += h * float(diff @ (M1 @ diff))
        cauchy.append(np.sqrt(acc))
    traj, rep = results[-1]
    traj.meta["delta_schedule"] = schedule
    traj.meta["delta_cauchy"] = cauchy
    return traj, rep


def _with_delta(config, d):
    cfg = MicroConfig(
        epsilon=config.epsilon, T=config.T, N=config.N, mu=config.mu,
        delta=d, projection_mode=config.projection_mode,
        picard_tol=config.picard_tol, picard_max=config.picard_max,
        params=config.params, source=config.source,
        velocity=config.velocity, u0_mode=config.u0_mode,
        u0_values=config.u0_values, coeff_a=config.coeff_a)
    return cfg


def _solve_micro_fixed(config, mesh, delta):
    ops = MicroOperators(mesh, config)
    u0 = _initial_state(config, mesh, ops)
    h = config.h
    kappa = config.params.kappa_D

    v0 = u0 - kappa
    pw0 = project_K(v0, mesh, config.projection_mode, operators=ops)
    states = [u0]
    diags = [StepDiagnostics(
        step=0, time=0.0, picard_iters=0, picard_residual=0.0,
        violation=float((ops.MS @ (v0 - pw0)) @ v0),
        min_gamma=float(u0[ops.gamma].min()) if len(ops.gamma) else np.nan)]

    active = []
    u = u0
    for j in range(1, config.N + 1):
        t_j = j * h
        u, diag = micro_step(u, t_j, config, mesh, ops, active_set=active)
        diag.step = j
        states.append(u)
        diags.append(diag)

    times = np.array([j * h for j in range(config.N + 1)])
    traj = Trajectory(times, states, diags, mesh.mesh_id,
                      meta={"delta": delta, "mu": config.mu,
                            "epsilon": getattr(mesh, "epsilon", np.nan)})
    report = apriori_monitor(traj, config, mesh, operators=ops, delta=delta)
    return traj, report


def apriori_monitor(trajectory, config, mesh, operators=None, delta=None):
    """Quadrature versions of the monitored energy quantities."""
    params = config.params
    if delta is None:
        delta = config.delta if config.delta > 0 else 1e-3
    ops = operators or MicroOperators(mesh, config)
    h = config.h
    states = trajectory.states

    try:
        p_frac, _ = exponent_p(2, params.alpha, params.beta, params.lam,
                               params.q1)
        p = float(p_frac)
    except Exception:
        p = None

    sup_neg = 0.0
    sup_grad = 0.0
    sup_b = 0.0
    for u in states:
        z = np.maximum(u, 0.0) + delta
        if not params.constant_mode:
            sup_neg = max(sup_neg, float(
                ops.lumped @ np.power(z, 1.0 + params.alpha - params.beta)))
        sup_grad = max(sup_grad, float(np.sqrt(max(u @ (ops.S1 @ u), 0.0))))
        bvals = params.b(z) if not params.constant_mode else params.b(u)
        sup_b = max(sup_b, float(np.sqrt(max(bvals @ (ops.M1 @ bvals), 0.0))))

    int_pc = 0.0
    int_k = 0.0
    int_bp = 0.0
    int_lp = 0.0
    for j in range(1, len(states)):
        u = states[j]
        d = (states[j] - states[j - 1]) / h
        k_n, _, bp_n = _nodal_coefficients(params, delta, u)
        z = np.maximum(u, 0.0) + delta
        pc_n = params.P_c(z) if not params.constant_mode \
            else np.ones_like(u)
        S_pc = assemble_stiffness(
            mesh, ops.A_tri * pc_n[mesh.triangles].mean(axis=1))
        S_k = assemble_stiffness(
            mesh, ops.A_tri * k_n[mesh.triangles].mean(axis=1))
        Mb = assemble_mass(mesh, bp_n)
        int_pc += h * float(u @ (S_pc @ u))
        int_k += h * float(d @ (S_k @ d))
        int_bp += h * float(d @ (Mb @ d))
        if p is not None:
            gv = np.einsum("tai,ta->ti", ops.grads, d[mesh.triangles])
            mag = np.hypot(gv[:, 0], gv[:, 1])
            int_lp += h * float(np.sum(mag ** p * mesh.areas))

    min_nodal = min(float(u.min()) for u in states)
    return AprioriReport(
        sup_neg_power=sup_neg, sup_grad_l2=sup_grad, sup_b_l2=sup_b,
        int_pc_grad_sq=int_pc, int_k_dtgrad_sq=int_k,
        int_bprime_dtu_sq=int_bp,
        int_dtgrad_lp=int_lp if p is not None else np.nan,
        lp_exponent=p if p is not None else np.nan,
        min_nodal=min_nodal)
