"""Constitutive laws, parameter admissibility, and source data.

Permeability k, capillary pressure P_c and storage b follow the power-law
families
    k(z)   = theta_k z^beta / (1 + gamma_k z^beta),
    P_c(z) = theta_p z^(-lambda) / (1 + gamma_p(z) z^lambda),
    b(z)   = theta_b z^alpha,
regularized by shifting the argument to max(z, 0) + delta.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import AdmissibilityError, DivergenceError, DomainError


def exponent_p(n, alpha, beta, lam, q1=None):
    """Integrability exponent of the gradient rate, by exact rationals.

    Returns (p, gamma) as Fractions with 1 < p < 2 and gamma > 1. Raises
    AdmissibilityError when the exponent conditions fail for dimension n.
    """
    alpha, beta, lam = Fraction(alpha), Fraction(beta), Fraction(lam)
    if beta < lam:
        raise AdmissibilityError("beta >= lambda required, got beta=%s "
                                 "lambda=%s" % (beta, lam))
    if n == 3:
        if not lam > 4 + alpha:
            raise AdmissibilityError(
                "n=3 requires lambda > 4 + alpha (got lambda=%s, alpha=%s)"
                % (lam, alpha))
        gamma = (3 * lam - 8 - 2 * alpha + 2 * beta) / (3 * beta)
    elif n == 2:
        if q1 is None:
            raise AdmissibilityError("n=2 requires the auxiliary exponent q1")
        q1 = Fraction(q1)
        if not q1 > 2:
            raise AdmissibilityError("q1 > 2 required, got %s" % q1)
        if not lam > 3 + alpha + 4 / (q1 - 2):
            raise AdmissibilityError(
                "n=2 requires lambda > 3 + alpha + 4/(q1-2) "
                "(got lambda=%s, alpha=%s, q1=%s)" % (lam, alpha, q1))
        gamma = (lam - 2 - (1 + alpha - beta) * (1 - 2 / q1)) / beta
    else:
        raise AdmissibilityError("dimension must be 2 or 3")
    if not gamma > 1:
        raise AdmissibilityError("exponent balance gives gamma=%s <= 1"
                                 % gamma)
    p = 2 * gamma / (1 + gamma)
    assert Fraction(1) < p < Fraction(2)
    return p, gamma


@dataclass
class ModelParams:
    """All constitutive parameters with their admissibility checks.

    constant_mode switches every law to k = P_c = 1, b(z) = z for the
    stationary-state and oracle tests.
    """

    theta_k: float = 1.0
    gamma_k: float = 1.0
    beta: float = 7.0
    theta_p: float = 1.0
    lam: float = 7.0
    cutoff_scale: float = 0.0
    theta_b: float = 1.0
    alpha: float = 1.0
    kappa_D: float = 1.0
    g: tuple = (0.0, -0.5)
    q1: float = 4.0
    constant_mode: bool = False
    estimates_valid: bool = field(init=False, default=False)

    def __post_init__(self):
        if min(self.theta_k, self.theta_p, self.theta_b) <= 0:
            raise AdmissibilityError("theta coefficients must be positive")
        if self.gamma_k < 0:
            raise AdmissibilityError("gamma_k must be nonnegative")
        if self.beta < 1:
            raise AdmissibilityError("beta must be at least 1")
        if self.lam <= 0:
            raise AdmissibilityError("lambda must be positive")
        if not 0 < self.alpha <= 3:
            raise AdmissibilityError("alpha must lie in (0, 3]")
        if not 0 < self.kappa_D <= 1:
            raise AdmissibilityError("kappa_D must lie in (0, 1]")
        if self.beta < self.lam:
            raise AdmissibilityError(
                "k*P_c unbounded: beta=%g < lambda=%g" % (self.beta, self.lam))
        self.g = (float(self.g[0]), float(self.g[1]))
        if not self.constant_mode:
            zs = np.linspace(0.0, 2.0, 64)
            ks = self.k(zs)
            if ks[0] != 0.0 or np.any(np.diff(ks) < -1e-14):
                raise AdmissibilityError(
                    "k must be nondecreasing with k(0) = 0")
        try:
            exponent_p(2, self.alpha, self.beta, self.lam, self.q1)
            self.estimates_valid = True
        except AdmissibilityError:
            self.estimates_valid = False

    def gamma_p(self, z):
        """Smooth compactly supported perturbation of P_c (0 by default)."""
        if self.cutoff_scale <= 0:
            return np.zeros_like(np.asarray(z, dtype=float))
        t = np.asarray(z, dtype=float) / self.cutoff_scale
        out = np.zeros_like(t)
        inside = np.abs(t) < 1.0
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - t[inside] ** 2))
        return out

    def k(self, z):
        if self.constant_mode:
            return np.ones_like(np.asarray(z, dtype=float))
        z = np.asarray(z, dtype=float)
        zb = np.power(np.maximum(z, 0.0), self.beta)
        return self.theta_k * zb / (1.0 + self.gamma_k * zb)

    def P_c(self, z):
        if self.constant_mode:
            return np.ones_like(np.asarray(z, dtype=float))
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0.0):
            raise DomainError("P_c needs a strictly positive argument")
        zl = np.power(z, self.lam)
        return self.theta_p / zl / (1.0 + self.gamma_p(z) * zl)

    def k_P_c(self, z):
        """Stable product k(z) P_c(z); bounded because beta >= lambda."""
        if self.constant_mode:
            return np.ones_like(np.asarray(z, dtype=float))
        z = np.asarray(z, dtype=float)
        zp = np.maximum(z, 0.0)
        num = self.theta_k * self.theta_p * np.power(zp, self.beta - self.lam)
        den = (1.0 + self.gamma_k * np.power(zp, self.beta)) \
            * (1.0 + self.gamma_p(z) * np.power(zp, self.lam))
        return num / den

    def b(self, z):
        if self.constant_mode:
            return np.asarray(z, dtype=float).copy()
        z = np.asarray(z, dtype=float)
        return self.theta_b * np.power(np.maximum(z, 0.0), self.alpha)

    def b_prime(self, z):
        if self.constant_mode:
            return np.ones_like(np.asarray(z, dtype=float))
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0.0):
            raise DomainError("b' needs a strictly positive argument")
        return self.theta_b * self.alpha * np.power(z, self.alpha - 1.0)

    def inv_k_integral(self, lo, hi):
        """Integral of 1/k between lo and hi (lo > 0).

        Uses the closed-form antiderivative of the power-law family, which
        stays accurate where quadrature overflows near the degeneracy.
        """
        if self.constant_mode:
            return hi - lo
        if lo <= 0:
            raise DomainError("1/k integral needs a positive lower limit")
        b, tk, gk = self.beta, self.theta_k, self.gamma_k
        if b == 1.0:
            power = np.log(hi / lo)
        else:
            power = (lo ** (1.0 - b) - hi ** (1.0 - b)) / (b - 1.0)
        return (power + gk * (hi - lo)) / tk


class ConstitutiveBundle:
    """Pointwise evaluations of the delta-regularized laws."""

    def __init__(self, k, P_c, k_P_c, b, b_prime):
        self.k = k
        self.P_c = P_c
        self.k_P_c = k_P_c
        self.b = b
        self.b_prime = b_prime


def eval_constitutive(params, delta, v):
    """Evaluate k, P_c, k*P_c, b and b' at max(v, 0) + delta.

    b' uses the shifted argument for every v so it stays strictly positive;
    with delta = 0 the input must be nonnegative.
    """
    if delta < 0:
        raise DomainError("delta must be nonnegative")
    v = np.asarray(v, dtype=float)
    if delta == 0.0 and not params.constant_mode and np.any(v < 0.0):
        raise DomainError("delta = 0 requires nonnegative arguments")
    z = np.maximum(v, 0.0) + delta
    return ConstitutiveBundle(
        k=params.k(z),
        P_c=params.P_c(z) if not params.constant_mode else np.ones_like(z),
        k_P_c=params.k_P_c(z),
        b=params.b(z) if not params.constant_mode else params.b(v),
        b_prime=params.b_prime(z),
    )


@dataclass
class BoundarySource:
    """Hole-boundary uptake f(t, xi) = f0 * f1(xi).

    f1(xi) = sign(xi) |xi|^beta cutoff(|xi|) with a C^2 plateau cutoff that
    is 1 on [0, plateau] and decays to 0 at support_end.
    """

    f0_level: float = 1.0
    plateau: float = None
    support_end: float = None
    bound_constant: float = field(init=False, default=None)

    def resolve(self, params):
        if self.plateau is None:
            self.plateau = 2.0 * params.kappa_D
        if self.support_end is None:
            self.support_end = 4.0 * params.kappa_D
        if self.f0_level < 0:
            raise AdmissibilityError("f0_level must be nonnegative")
        if self.support_end <= self.plateau:
            raise AdmissibilityError("cutoff support must exceed the plateau")
        return self

    def cutoff(self, xi):
        xi = np.abs(np.asarray(xi, dtype=float))
        a = 2.0 if self.plateau is None else self.plateau
        c = 4.0 if self.support_end is None else self.support_end
        out = np.ones_like(xi)
        out[xi >= c] = 0.0
        mid = (xi > a) & (xi < c)
        s = (xi[mid] - a) / (c - a)
        out[mid] = 1.0 - s ** 3 * (10.0 - 15.0 * s + 6.0 * s ** 2)
        return out

    def f1(self, xi, params):
        xi = np.asarray(xi, dtype=float)
        return np.sign(xi) * np.power(np.abs(xi), params.beta) \
            * self.cutoff(xi)

    def f0_mean(self):
        """Mean of f0 over the hole boundary (constant data)."""
        return self.f0_level

    def check_admissible(self, params, record=True):
        """Grid check of the sign property and the 1/k-integral bound."""
        xs = np.linspace(-1.0, 2.0 * params.kappa_D, 301)
        f1 = self.f1(xs, params)
        if self.f1(np.array([0.0]), params)[0] != 0.0:
            raise AdmissibilityError("f1(0) must vanish")
        if np.any(xs * f1 < -1e-14):
            raise AdmissibilityError("xi * f1(xi) must be nonnegative")
        grid = np.geomspace(1e-8, params.kappa_D, 40)
        vals = [abs(float(self.f1(x, params)) *
                    params.inv_k_integral(x, params.kappa_D)) for x in grid]
        bound = max(vals)
        if not np.isfinite(bound):
            raise AdmissibilityError("f1 / k integral bound is infinite")
        if record:
            self.bound_constant = bound
        return bound


def eval_boundary_f(source, params, t, xi):
    """f(t, xi) = f0(t) f1(xi); constant-in-time uptake level."""
    del t
    return source.f0_level * source.f1(xi, params)


@dataclass
class VelocityField:
    """Transport field Q with its saturation coupling H.

    mode "zero" is the default; mode "triangle" expects per-triangle
    2-vectors that pass the discrete divergence and normal-flux tests.
    """

    mode: str = "zero"
    values: object = None
    h_slope: float = 0.0

    def H(self, z):
        return self.h_slope * np.asarray(z, dtype=float)

    def on_triangles(self, mesh):
        if self.mode == "zero":
            return np.zeros((len(mesh.triangles), 2))
        q = np.asarray(self.values, dtype=float)
        if q.shape != (len(mesh.triangles), 2):
            raise DivergenceError("tabulated velocity must be one 2-vector "
                                  "per triangle")
        return q

    def check(self, mesh, tol=1e-8):
        """Weak divergence against interior hats plus hole-flux test."""
        if self.mode == "zero":
            return
        from .fem import triangle_gradients
        q = self.on_triangles(mesh)
        grads = triangle_gradients(mesh)
        nv = len(mesh.vertices)
        div = np.zeros(nv)
        for a in range(3):
            contrib = mesh.areas * (q[:, 0] * grads[:, a, 0]
                                    + q[:, 1] * grads[:, a, 1])
            np.add.at(div, mesh.triangles[:, a], contrib)
        # boundary vertices sit on edges with a single adjacent triangle
        edge_count = {}
        for i, j, k in mesh.triangles:
            for a, b in ((i, j), (j, k), (k, i)):
                e = (min(a, b), max(a, b))
                edge_count[e] = edge_count.get(e, 0) + 1
        boundary = {v for e, c in edge_count.items() if c == 1 for v in e}
        interior = np.setdiff1d(np.arange(nv),
                                np.fromiter(boundary, int, len(boundary)))
        if len(interior) and np.max(np.abs(div[interior])) > tol:
            raise DivergenceError(
                "velocity fails the weak divergence test: max residual %.3e"
                % np.max(np.abs(div[interior])))
        edge_tri = _edge_to_triangle(mesh)
        for a, b in getattr(mesh, "gamma_edges", []):
            t = edge_tri.get((min(a, b), max(a, b)))
            if t is None:
                continue
            d = mesh.vertices[b] - mesh.vertices[a]
            nrm = np.array([d[1], -d[0]])
            if abs(np.dot(q[t], nrm)) > tol * max(1.0, np.linalg.norm(q[t])):
                raise DivergenceError(
                    "velocity has normal flux through a hole edge")


def _edge_to_triangle(mesh):
    out = {}
    for t, (i, j, k) in enumerate(mesh.triangles):
        for a, b in ((i, j), (j, k), (k, i)):
            out[(min(a, b), max(a, b))] = t
    return out


def eval_F(velocity, params, delta, v_tri, mesh=None, check=False):
    """Convective load F = Q H(v) + k_delta(v) g at triangle midpoints."""
    v_tri = np.asarray(v_tri, dtype=float)
    if check and mesh is not None:
        velocity.check(mesh)
    if velocity.mode == "zero":
        q = np.zeros((len(v_tri), 2))
    else:
        q = np.asarray(velocity.values, dtype=float)
    z = np.maximum(v_tri, 0.0) + delta
    k = params.k(z)
    g = np.asarray(params.g)
    return q * velocity.H(v_tri)[:, None] + k[:, None] * g[None, :]
