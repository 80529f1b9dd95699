"""Experiment driver: scale sweeps, error tables and diagnostics.

Realizes the three limit passages (regularization, penalty, microstructure
scale) as finite schedules with tabulated evidence: violation decay against
the penalty parameter, Cauchy differences along the regularization schedule,
and micro-to-macro errors along the scale schedule.
"""

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, GridMismatchError
from .fem import (assemble_boundary_mass, assemble_mass, assemble_stiffness,
                  extend_into_holes)
from .homogenize import (StructuredInterpolator, build_effective_model,
                         reconstruct_corrector)
from .macro import MacroConfig, build_macro_mesh, solve_macro
from .meshing import CellGeometry, build_cell_mesh, build_perforated_mesh
from .micro import MicroConfig, solve_micro
from .model import BoundarySource, ModelParams, VelocityField


class ReportTable:
    """Rows keyed by sweep value, CSV-serializable with full precision."""

    def __init__(self, columns):
        self.columns = list(columns)
        self.rows = {}

    def add_row(self, key, **values):
        missing = [c for c in self.columns if c not in values]
        if missing:
            raise DimensionError("row %r missing columns %s" % (key, missing))
        self.rows[key] = {c: values[c] for c in self.columns}

    def to_csv(self, path):
        lines = [",".join(["key"] + self.columns)]
        for key, row in self.rows.items():
            cells = [str(key)]
            for c in self.columns:
                v = row[c]
                cells.append("%.17g" % v if isinstance(v, float) else str(v))
            lines.append(",".join(cells))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            table = cls(header[1:])
            for line in fh:
                cells = line.strip().split(",")
                if not cells or cells == [""]:
                    continue
                vals = {}
                for c, raw in zip(header[1:], cells[1:]):
                    try:
                        vals[c] = float(raw)
                    except ValueError:
                        vals[c] = raw
                table.rows[cells[0]] = vals
        return table


@dataclass
class SweepSpec:
    """Schedules plus the shared base configuration of a sweep campaign."""

    epsilons: tuple = (1.0 / 4.0, 1.0 / 8.0, 1.0 / 16.0)
    deltas: tuple = (1e-1, 1e-2, 1e-3)
    mus: tuple = (1e-1, 1e-2, 1e-3, 1e-4)
    geometry: CellGeometry = field(default_factory=lambda: CellGeometry(
        hole_radius=0.25, hole_segments=16, divisions=8))
    base: MicroConfig = field(default_factory=lambda: MicroConfig(
        source=BoundarySource(f0_level=1.0)))
    macro_divisions: int = 32
    cell_divisions: int = 32
    out_dir: str = None
    jobs: int = 1

    def __post_init__(self):
        for name, seq in (("epsilons", self.epsilons),
                          ("deltas", self.deltas), ("mus", self.mus)):
            seq = tuple(seq)
            if len(seq) == 0:
                raise DimensionError("%s must be nonempty" % name)
            if any(b >= a for a, b in zip(seq, seq[1:])):
                raise DimensionError("%s must be strictly decreasing" % name)
        self.epsilons = tuple(self.epsilons)
        self.deltas = tuple(self.deltas)
        self.mus = tuple(self.mus)


def _micro_config(spec, **overrides):
    base = spec.base
    kw = dict(epsilon=base.epsilon, T=base.T, N=base.N, mu=base.mu,
              delta=base.delta, projection_mode=base.projection_mode,
              picard_tol=base.picard_tol, picard_max=base.picard_max,
              params=base.params, source=base.source,
              velocity=base.velocity, u0_mode=base.u0_mode,
              u0_values=base.u0_values, coeff_a=base.coeff_a)
    kw.update(overrides)
    return MicroConfig(**kw)


def companion_forms(mesh):
    """Mass and stiffness over the hole-filled companion domain."""
    import scipy.sparse as sp
    fill = mesh.hole_fill
    n = len(fill.vertices)
    M = sp.lil_matrix((n, n))
    nv = len(mesh.vertices)
    Mp = assemble_mass(mesh)
    M[:nv, :nv] = Mp
    M = (M.tocsr() + assemble_mass(fill)).tocsr()
    S = sp.lil_matrix((n, n))
    S[:nv, :nv] = assemble_stiffness(mesh)
    S = (S.tocsr() + assemble_stiffness(fill)).tocsr()
    return M, S


def trajectory_l2_gt(states_a, states_b, M, h):
    """Time-discrete L2 norm of the difference of two state sequences."""
    if len(states_a) != len(states_b):
        raise GridMismatchError("state sequences differ in length")
    acc = 0.0
    for ua, ub in zip(states_a[1:], states_b[1:]):
        d = ua - ub
        acc += h * float(d @ (M @ d))
    return float(np.sqrt(acc))


def solve_macro_reference(spec):
    """Effective model and macro trajectory shared by the scale sweep."""
    cell_geom = CellGeometry(hole_center=spec.geometry.hole_center,
                             hole_radius=spec.geometry.hole_radius,
                             hole_segments=spec.geometry.hole_segments,
                             divisions=spec.cell_divisions)
    cell = build_cell_mesh(cell_geom)
    base = spec.base
    em = build_effective_model(cell, base.params, base.source,
                               velocity=base.velocity)
    macro_cfg = MacroConfig(divisions=spec.macro_divisions, T=base.T,
                            N=base.N, mu=base.mu, delta=base.delta,
                            projection_mode=base.projection_mode,
                            picard_tol=base.picard_tol,
                            picard_max=base.picard_max, params=base.params,
                            source=base.source, velocity=base.velocity,
                            effective=em)
    macro_mesh = build_macro_mesh(spec.macro_divisions)
    macro_traj, macro_rep = solve_macro(macro_cfg, macro_mesh)
    return em, macro_cfg, macro_mesh, macro_traj, macro_rep


def _one_epsilon_entry(spec, epsilon, em, macro_traj):
    t0 = time.time()
    mesh = build_perforated_mesh(spec.geometry, epsilon)
    cfg = _micro_config(spec, epsilon=epsilon)
    traj, rep = solve_micro(cfg, mesh)

    fill = mesh.hole_fill
    M_comp, _ = companion_forms(mesh)
    interp = StructuredInterpolator(spec.macro_divisions)
    pts = fill.vertices
    h = cfg.h

    acc = 0.0
    acc_h1 = 0.0
    S_perf = assemble_stiffness(mesh)
    for j in range(1, cfg.N + 1):
        ext = extend_into_holes(traj.states[j], mesh)
        mac = interp.values(macro_traj.states[j], pts)
        d = ext - mac
        acc += h * float(d @ (M_comp @ d))
        corrected = reconstruct_corrector(macro_traj.states[j],
                                          spec.macro_divisions,
                                          em.correctors, mesh, epsilon)
        dh = traj.states[j] - corrected
        acc_h1 += h * float(dh @ (S_perf @ dh))
    runtime = time.time() - t0
    return {
        "l2_gt_error": float(np.sqrt(acc)),
        "h1_corrector_error": float(np.sqrt(acc_h1)),
        "sup_grad_l2": rep.sup_grad_l2,
        "sup_neg_power": rep.sup_neg_power,
        "sup_b_l2": rep.sup_b_l2,
        "int_pc_grad_sq": rep.int_pc_grad_sq,
        "int_k_dtgrad_sq": rep.int_k_dtgrad_sq,
        "int_bprime_dtu_sq": rep.int_bprime_dtu_sq,
        "int_dtgrad_lp": rep.int_dtgrad_lp,
        "min_nodal": rep.min_nodal,
        "violation_sum": _violation_sum(traj, cfg.h),
        "runtime_s": runtime,
    }, traj, mesh


def run_convergence_sweep(spec, macro_ref=None):
    """Micro-to-macro error table over the scale schedule."""
    if macro_ref is None:
        macro_ref = solve_macro_reference(spec)
    em, macro_cfg, macro_mesh, macro_traj, _ = macro_ref
    cols = ["epsilon", "l2_gt_error", "h1_corrector_error", "sup_grad_l2",
            "sup_neg_power", "sup_b_l2", "int_pc_grad_sq",
            "int_k_dtgrad_sq", "int_bprime_dtu_sq", "int_dtgrad_lp",
            "min_nodal", "violation_sum", "runtime_s"]
    table = ReportTable(cols)
    for eps in spec.epsilons:
        entry, _, _ = _one_epsilon_entry(spec, eps, em, macro_traj)
        entry["epsilon"] = eps
        table.add_row("eps=%.6g" % eps, **entry)
    return table


def _violation_sum(traj, h):
    return h * float(sum(d.violation for d in traj.diagnostics[1:]))


def run_penalty_and_delta_sweeps(spec):
    """Violation against mu at fixed delta, then Cauchy runs along delta."""
    cols = ["sweep", "value", "violation_sum", "violation_over_mu",
            "cauchy_l2_gt", "sup_grad_l2", "sup_neg_power", "sup_b_l2",
            "int_pc_grad_sq", "int_k_dtgrad_sq", "int_bprime_dtu_sq",
            "int_dtgrad_lp", "min_nodal", "runtime_s"]
    table = ReportTable(cols)
    mesh = build_perforated_mesh(spec.geometry, spec.base.epsilon)
    M1 = assemble_mass(mesh)

    for mu in spec.mus:
        t0 = time.time()
        cfg = _micro_config(spec, mu=mu)
        traj, rep = solve_micro(cfg, mesh)
        v = _violation_sum(traj, cfg.h)
        table.add_row("mu=%.6g" % mu, sweep="mu", value=mu,
                      violation_sum=v, violation_over_mu=v / mu,
                      cauchy_l2_gt=np.nan, **_report_cols(rep),
                      runtime_s=time.time() - t0)

    prev_traj = None
    for d in spec.deltas:
        t0 = time.time()
        cfg = _micro_config(spec, delta=d)
        traj, rep = solve_micro(cfg, mesh)
        cauchy = np.nan
        if prev_traj is not None:
            cauchy = trajectory_l2_gt(prev_traj.states, traj.states, M1,
                                      cfg.h)
        v = _violation_sum(traj, cfg.h)
        table.add_row("delta=%.6g" % d, sweep="delta", value=d,
                      violation_sum=v, violation_over_mu=v / cfg.mu,
                      cauchy_l2_gt=cauchy, **_report_cols(rep),
                      runtime_s=time.time() - t0)
        prev_traj = traj
    return table


def _report_cols(rep):
    return {
        "sup_grad_l2": rep.sup_grad_l2, "sup_neg_power": rep.sup_neg_power,
        "sup_b_l2": rep.sup_b_l2, "int_pc_grad_sq": rep.int_pc_grad_sq,
        "int_k_dtgrad_sq": rep.int_k_dtgrad_sq,
        "int_bprime_dtu_sq": rep.int_bprime_dtu_sq,
        "int_dtgrad_lp": rep.int_dtgrad_lp, "min_nodal": rep.min_nodal,
    }


def boundary_two_scale_check(micro_traj, macro_traj, micro_mesh, macro_mesh,
                             geometry, h):
    """Hole-boundary mass of the micro run against its volumetric limit.

    Returns (lhs, rhs, relative gap): the scaled boundary integral of the
    squared micro state, and the cell-boundary density times the squared
    volumetric norm of the macro state.
    """
    if len(micro_traj.states) != len(macro_traj.states):
        raise GridMismatchError("trajectories live on different time grids")
    if not np.allclose(micro_traj.times, macro_traj.times):
        raise GridMismatchError("trajectories live on different time grids")
    Mg = assemble_boundary_mass(micro_mesh, "gamma")
    M_macro = assemble_mass(macro_mesh)
    lhs = 0.0
    rhs = 0.0
    gamma_len = geometry.polygon_perimeter()
    for j in range(1, len(micro_traj.states)):
        u = micro_traj.states[j]
        lhs += h * float(u @ (Mg @ u))
        um = macro_traj.states[j]
        rhs += h * gamma_len * float(um @ (M_macro @ um))
    gap = abs(lhs - rhs) / rhs if rhs else 0.0
    return lhs, rhs, gap


def penalty_stress_spec(epsilon=0.25, f0_level=8.0, out_dir=None):
    """Configuration whose uptake genuinely engages the obstacle.

    The mild exponents keep the uptake active near the constraint while the
    persistent gravity drainage maintains contact pressure, so the penalty
    decay is measurable instead of identically zero.
    """
    params = ModelParams(beta=2.0, lam=2.0, g=(0.0, -1.5))
    base = MicroConfig(epsilon=epsilon, T=0.5, N=50, mu=1e-3, delta=1e-1,
                       params=params,
                       source=BoundarySource(f0_level=f0_level))
    return SweepSpec(geometry=CellGeometry(hole_radius=0.25,
                                           hole_segments=16, divisions=8),
                     base=base, out_dir=out_dir)


def default_spec(out_dir=None, **base_overrides):
    kw = dict(epsilon=0.25, T=0.5, N=50, mu=1e-3, delta=1e-2,
              params=ModelParams(),
              source=BoundarySource(f0_level=1.0))
    kw.update(base_overrides)
    return SweepSpec(base=MicroConfig(**kw), out_dir=out_dir)


# flat key = value configuration files
CONFIG_KEYS = {
    "divisions": (int, "background grid subdivisions per cell edge"),
    "hole_radius": (float, "hole circumradius in cell units, [0, 0.5)"),
    "hole_segments": (int, "polygon edge count, >= 8, divisible by 4"),
    "hole_center_x": (float, "hole center x in the unit cell"),
    "hole_center_y": (float, "hole center y in the unit cell"),
    "epsilon": (float, "microstructure scale; 1/epsilon must be integer"),
    "T": (float, "final time"),
    "N": (int, "number of implicit time steps"),
    "mu": (float, "penalty parameter"),
    "delta": (float, "regularization shift; 0 runs the limit schedule"),
    "projection": (str, "exact_J or nodal_clamp"),
    "picard_tol": (float, "per-step nonlinear increment tolerance"),
    "picard_max": (int, "per-step nonlinear sweep cap"),
    "alpha": (float, "storage exponent, (0, 3]"),
    "beta": (float, "permeability exponent, >= 1 and >= lambda"),
    "lambda": (float, "capillary exponent, > 0"),
    "q1": (float, "auxiliary integrability exponent, > 2"),
    "theta_k": (float, "permeability coefficient"),
    "gamma_k": (float, "permeability saturation coefficient"),
    "theta_p": (float, "capillary coefficient"),
    "theta_b": (float, "storage coefficient"),
    "kappa_D": (float, "outer boundary value, (0, 1]"),
    "g_x": (float, "gravity vector, first component"),
    "g_y": (float, "gravity vector, second component"),
    "constant_mode": (int, "1 switches all laws to constants"),
    "f0_level": (float, "uptake intensity on hole boundaries"),
    "epsilons": (list, "scale schedule, strictly decreasing"),
    "deltas": (list, "regularization schedule, strictly decreasing"),
    "mus": (list, "penalty schedule, strictly decreasing"),
    "macro_divisions": (int, "macro mesh subdivisions"),
    "cell_divisions": (int, "cell mesh subdivisions for correctors"),
    "memory_mode": (str, "off or on: two-coefficient convolution term"),
    "outer_iters": (int, "macro/kernel coupling sweeps"),
    "coeff_b_layered_amp": (float, "amplitude of a layered second "
                                   "coefficient; 0 reuses the first"),
}


def parse_config(path):
    """Read a flat key = value file; '#' starts a comment."""
    if not os.path.exists(path):
        raise ConfigError("config file not found: %s" % path)
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("line %d: expected key = value, got %r"
                                  % (lineno, raw.strip()))
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in CONFIG_KEYS:
                raise ConfigError("line %d: unknown key %r" % (lineno, key))
            typ = CONFIG_KEYS[key][0]
            try:
                if typ is list:
                    out[key] = [float(v) for v in value.split()]
                else:
                    out[key] = typ(value)
            except ValueError:
                raise ConfigError("line %d: cannot parse %r for key %r"
                                  % (lineno, value, key))
    return out


def spec_from_config(cfg):
    """Build the sweep specification from a parsed configuration."""
    params = ModelParams(
        theta_k=cfg.get("theta_k", 1.0), gamma_k=cfg.get("gamma_k", 1.0),
        beta=cfg.get("beta", 7.0), theta_p=cfg.get("theta_p", 1.0),
        lam=cfg.get("lambda", 7.0), theta_b=cfg.get("theta_b", 1.0),
        alpha=cfg.get("alpha", 1.0), kappa_D=cfg.get("kappa_D", 1.0),
        g=(cfg.get("g_x", 0.0), cfg.get("g_y", -0.5)),
        q1=cfg.get("q1", 4.0),
        constant_mode=bool(cfg.get("constant_mode", 0)))
    source = BoundarySource(f0_level=cfg.get("f0_level", 1.0))
    geometry = CellGeometry(
        hole_center=(cfg.get("hole_center_x", 0.5),
                     cfg.get("hole_center_y", 0.5)),
        hole_radius=cfg.get("hole_radius", 0.25),
        hole_segments=cfg.get("hole_segments", 16),
        divisions=cfg.get("divisions", 8))
    base = MicroConfig(
        epsilon=cfg.get("epsilon", 0.25), T=cfg.get("T", 0.5),
        N=cfg.get("N", 50), mu=cfg.get("mu", 1e-3),
        delta=cfg.get("delta", 1e-2),
        projection_mode=cfg.get("projection", "exact_J"),
        picard_tol=cfg.get("picard_tol", 1e-10),
        picard_max=cfg.get("picard_max", 50),
        params=params, source=source)
    spec = SweepSpec(
        epsilons=tuple(cfg.get("epsilons", (0.25, 0.125, 0.0625))),
        deltas=tuple(cfg.get("deltas", (1e-1, 1e-2, 1e-3))),
        mus=tuple(cfg.get("mus", (1e-1, 1e-2, 1e-3, 1e-4))),
        geometry=geometry, base=base,
        macro_divisions=cfg.get("macro_divisions", 32),
        cell_divisions=cfg.get("cell_divisions", 32))
    return spec
