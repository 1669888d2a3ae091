"""Coupled momentum/heat step and the temperature comparison sequences.

For a fixed damage pair ``(z_prev, z)`` one step solves

    c_in rho M (u - 2 u1 + u2)/tau^2 + c_visc K_D(z_prev) (u - u1)/tau
        + K_C(z) u - P T_M(theta) + tau |e(u)|^(g-2) e(u) = f

    c_cap M_h (theta - theta_prev)/tau + c_k L(k(z, T_M(theta))) theta + c_cpl S(u) theta
        = c_cap M_h (z_prev - z)/tau + c_cap c_visc V(u) + h + H

by an outer continuation in the truncation level ``M`` and an inner
alternation between a Newton solve for ``u`` and a Picard (or Newton) solve
for ``theta``.  The ``c_*`` factors are all 1 for the unscaled system.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import assembly as asm
from .errors import ConfigurationError, ConvergenceError, PositivityError, StepFailure
from .material import MaterialLaws, truncate
from .mesh import DofMap, Mesh2D

log = logging.getLogger(__name__)

DEFAULT_M_SCHEDULE = tuple(2.0**p for p in range(4, 15))


@dataclass(frozen=True)
class Scaling:
    """Coefficient factors of the rescaled system; all exactly 1 for ``eps=1, beta=0``."""

    eps: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigurationError("eps must be positive")

    @property
    def inertia(self) -> float:
        return self.eps**2

    @property
    def viscosity(self) -> float:
        return self.eps

    @property
    def conductivity(self) -> float:
        return self.eps ** (-self.beta)

    @property
    def capacity(self) -> float:
        return self.eps

    @property
    def viscous_heating(self) -> float:
        return self.eps**2

    @property
    def coupling_heat(self) -> float:
        return self.eps

    @property
    def damage_heating(self) -> float:
        return self.eps


@dataclass
class Tolerances:
    momentum_rtol: float = 1e-10
    heat_rtol: float = 1e-10
    alternation: float = 1e-11
    max_newton: int = 50
    max_heat: int = 200
    max_alternation: int = 200
    heat_method: str = "picard"
    linear_solver: str = "direct"
    acceptance_rtol: float = 1e-8

    def __post_init__(self):
        if self.heat_method not in ("picard", "newton"):
            raise ConfigurationError("solver.heat must be 'picard' or 'newton'")
        if self.linear_solver not in ("direct", "cg"):
            raise ConfigurationError("solver.linear must be 'direct' or 'cg'")


class StepContext:
    """Step-independent operators shared by all steps of a run."""

    def __init__(self, mesh: Mesh2D, material: MaterialLaws, gamma: float = 5.0, heat_mass: str = "lumped"):
        if not gamma > 4:
            raise ConfigurationError(f"gamma must exceed 4, got {gamma!r}")
        if heat_mass not in ("lumped", "consistent"):
            raise ConfigurationError("heat_mass must be 'lumped' or 'consistent'")
        self.mesh = mesh
        self.dofmap = DofMap.from_mesh(mesh)
        self.material = material
        self.gamma = float(gamma)
        self.lumped = heat_mass == "lumped"
        self.mass_u = asm.assemble_mass(mesh, self.dofmap, material.rho).matrix
        self.coupling = asm.assemble_coupling(mesh, material)
        self.coupling_abs = abs(self.coupling).tocsr()
        self.m_lumped = asm.lumped_mass(mesh)
        self.m_consistent = asm.scalar_mass(mesh)
        self.free = self.dofmap.free

    def heat_mass_apply(self, x):
        return self.m_lumped * x if self.lumped else self.m_consistent @ x

    def heat_mass_matrix(self):
        return sp.diags(self.m_lumped).tocsr() if self.lumped else self.m_consistent


@dataclass
class CoupledProblem:
    ctx: StepContext
    u1: np.ndarray  # u_{k-1}
    u2: np.ndarray  # u_{k-2}
    theta_prev: np.ndarray
    z: np.ndarray  # z_k
    z_prev: np.ndarray  # z_{k-1}
    tau: float
    f: np.ndarray  # step-averaged load on displacement dofs
    H: float = 0.0
    h: float = 0.0
    scaling: Scaling = field(default_factory=Scaling)

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigurationError("tau must be positive")
        if np.min(self.theta_prev) < 0:
            raise PositivityError("previous temperature is negative")
        ctx = self.ctx
        mesh, mat = ctx.mesh, ctx.material
        sc = self.scaling
        self.visc_coeff = asm.viscous_coefficients(mesh, self.z_prev, self.theta_prev, mat)
        self.K_visc = asm.stiffness_with_coefficient(mesh, self.visc_coeff, mat.D0).matrix
        self.K_el = asm.assemble_elastic(mesh, ctx.dofmap, self.z, mat).matrix
        self.A_lin = (sc.inertia / self.tau**2) * ctx.mass_u + (sc.viscosity / self.tau) * self.K_visc + self.K_el
        self.b_lin = (sc.inertia / self.tau**2) * (ctx.mass_u @ (2.0 * self.u1 - self.u2)) \
            + (sc.viscosity / self.tau) * (self.K_visc @ self.u1) + self.f
        self.heat_fixed = (sc.capacity / self.tau) * ctx.heat_mass_apply(self.theta_prev) \
            + (sc.damage_heating / self.tau) * ctx.heat_mass_apply(self.z_prev - self.z) \
            + self.H * ctx.m_lumped + self.h * asm.boundary_mass(mesh)


# ---------------------------------------------------------------------------
# Residuals
# ---------------------------------------------------------------------------
def momentum_residual(prob: CoupledProblem, u, theta, M=math.inf) -> np.ndarray:
    """Full-length residual; entries on constrained dofs are set to 0."""
    ctx = prob.ctx
    rg, _ = asm.assemble_gamma_term(ctx.mesh, None, u, prob.tau, ctx.gamma)
    r = prob.A_lin @ u - prob.b_lin - ctx.coupling @ _thermal(theta, M) + rg
    r[ctx.dofmap.constrained] = 0.0
    return r


def _thermal(theta, M):
    return theta if M == math.inf else truncate(theta, M)


def strain_rate(prob: CoupledProblem, u) -> np.ndarray:
    return asm.element_strains(prob.ctx.mesh, (u - prob.u1) / prob.tau)


def _heat_terms(prob: CoupledProblem, u, theta, M):
    ctx = prob.ctx
    return asm.assemble_heat(ctx.mesh, ctx.dofmap, prob.z, theta, M, ctx.material,
                             strain_rate=strain_rate(prob, u), visc_coeff=prob.visc_coeff,
                             lumped=ctx.lumped)


def heat_operator(prob: CoupledProblem, u, theta, M):
    """Matrix of the linearised (lagged-conductivity) heat system and its RHS."""
    sc = prob.scaling
    terms = _heat_terms(prob, u, theta, M)
    A = (sc.capacity / prob.tau) * prob.ctx.heat_mass_matrix() + sc.conductivity * terms.stiffness.matrix \
        + sc.coupling_heat * terms.sink
    rhs = prob.heat_fixed + sc.viscous_heating * terms.viscous
    return A.tocsr(), rhs, terms


def heat_residual(prob: CoupledProblem, u, theta, M=math.inf) -> np.ndarray:
    A, rhs, _ = heat_operator(prob, u, theta, M)
    return A @ theta - rhs


def heat_jacobian(prob: CoupledProblem, u, theta, M=math.inf) -> sp.csr_matrix:
    sc = prob.scaling
    ctx = prob.ctx
    terms = _heat_terms(prob, u, theta, M)
    Kj = asm.heat_stiffness_jacobian(ctx.mesh, prob.z, theta, M, ctx.material)
    return ((sc.capacity / prob.tau) * ctx.heat_mass_matrix() + sc.conductivity * Kj
            + sc.coupling_heat * terms.sink).tocsr()


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------
def _solve(A, b, method: str):
    if method == "direct":
        return spla.spsolve(A.tocsc(), b)
    d = A.diagonal()
    Minv = spla.LinearOperator(A.shape, matvec=lambda x: x / d)
    x, info = spla.cg(A, b, rtol=1e-14, atol=0.0, maxiter=10 * A.shape[0], M=Minv)
    if info != 0:
        raise ConvergenceError("conjugate gradients did not converge")
    return x


def _grows(history: list, window: int = 5) -> bool:
    if len(history) <= window:
        return False
    tail = history[-window - 1:]
    return all(b > a for a, b in zip(tail[:-1], tail[1:]))


def solve_momentum(prob: CoupledProblem, u0, theta, M, tols: Tolerances, ref: float):
    """Newton with backtracking for the momentum balance at frozen ``T_M(theta)``."""
    ctx = prob.ctx
    free = ctx.free
    u = u0.copy()
    r = momentum_residual(prob, u, theta, M)
    nr = float(np.linalg.norm(r[free]))
    target = tols.momentum_rtol * ref
    hist = [nr]
    it = 0
    while nr > target:
        if it >= tols.max_newton:
            raise StepFailure(f"momentum Newton did not converge (residual {nr:.3e})")
        _, Jg = asm.assemble_gamma_term(ctx.mesh, None, u, prob.tau, ctx.gamma)
        J = (prob.A_lin + Jg.matrix)[free][:, free]
        du = np.zeros_like(u)
        du[free] = _solve(J, -r[free], tols.linear_solver)
        lam = 1.0
        while True:
            u_try = u + lam * du
            r_try = momentum_residual(prob, u_try, theta, M)
            n_try = float(np.linalg.norm(r_try[free]))
            if n_try < nr or lam < 1e-4:
                break
            lam *= 0.5
        step = lam * float(np.max(np.abs(du), initial=0.0))
        u, r, nr = u_try, r_try, n_try
        hist.append(nr)
        it += 1
        if _grows(hist):
            raise StepFailure("momentum Newton diverged (residual grew for 5 iterations)")
        # machine-precision stagnation: the update no longer changes u
        if step <= 1e-15 * max(1.0, float(np.max(np.abs(u), initial=0.0))):
            break
    return u, it, nr


def solve_heat(prob: CoupledProblem, u, theta0, M, tols: Tolerances):
    theta = theta0.copy()
    hist = []
    for it in range(1, tols.max_heat + 1):
        A, rhs, _ = heat_operator(prob, u, theta, M)
        if tols.heat_method == "picard":
            new = _solve(A, rhs, tols.linear_solver)
        else:
            r = A @ theta - rhs
            J = heat_jacobian(prob, u, theta, M)
            new = theta - _solve(J, r, tols.linear_solver)
        change = float(np.max(np.abs(new - theta), initial=0.0))
        theta = new
        hist.append(change)
        if change <= 1e-13 * max(1.0, float(np.max(np.abs(theta), initial=0.0))):
            return theta, it
        if _grows(hist):
            raise StepFailure("heat iteration diverged (update grew for 5 iterations)")
    raise StepFailure(f"heat iteration did not converge in {tols.max_heat} iterations")


@dataclass
class CoupledResult:
    u: np.ndarray
    theta: np.ndarray
    stats: dict


def solve_coupled(prob: CoupledProblem, tols: Optional[Tolerances] = None,
                  M_schedule: Sequence[float] = DEFAULT_M_SCHEDULE) -> CoupledResult:
    """Truncation continuation with inner momentum/heat alternation.

    A truncation level is accepted once ``0 <= theta < M`` nodally, so the
    accepted pair solves the untruncated equations; the schedule is extended
    by doubling when exhausted.
    """
    tols = tols or Tolerances()
    ctx = prob.ctx
    free = ctx.free
    u = prob.u1.copy()
    theta = prob.theta_prev.copy()
    schedule = list(M_schedule)
    if not schedule or any(m <= 0 for m in schedule):
        raise ConfigurationError("M_schedule must be a nonempty list of positive levels")
    r0 = momentum_residual(prob, u, theta, schedule[0])
    # thermal stress magnitude before cancellation keeps the scale away from rounding noise
    ref = max(float(np.linalg.norm(r0[free])), float(np.linalg.norm(prob.f[free])),
              float(np.linalg.norm((ctx.coupling_abs @ np.abs(theta))[free])), 1e-300)
    stats = {"newton": 0, "heat": 0, "alternations": 0, "M": None}
    level = 0
    while True:
        if level >= len(schedule):
            schedule.append(2.0 * schedule[-1])
            if schedule[-1] > 1e300:
                raise StepFailure("truncation schedule exhausted", state={"u": u, "theta": theta})
        M = schedule[level]
        hist = []
        for alt in range(tols.max_alternation):
            try:
                u_new, nit, _ = solve_momentum(prob, u, theta, M, tols, ref)
                theta_new, hit = solve_heat(prob, u_new, theta, M, tols)
            except StepFailure as exc:
                exc.state = {"u": u, "theta": theta}
                raise
            stats["newton"] += nit
            stats["heat"] += hit
            stats["alternations"] += 1
            du = float(np.max(np.abs(u_new - u), initial=0.0))
            dth = float(np.max(np.abs(theta_new - theta), initial=0.0))
            u, theta = u_new, theta_new
            scale_u = max(1.0, float(np.max(np.abs(u), initial=0.0)))
            scale_t = max(1.0, float(np.max(np.abs(theta), initial=0.0)))
            hist.append(max(du / scale_u, dth / scale_t))
            if du <= tols.alternation * scale_u and dth <= tols.alternation * scale_t:
                break
            if _grows(hist):
                raise StepFailure("momentum/heat alternation diverged", state={"u": u, "theta": theta})
        else:
            raise StepFailure("momentum/heat alternation did not converge", state={"u": u, "theta": theta})
        if np.max(theta) < M:
            break
        level += 1
    stats["M"] = M
    # final residuals without truncation
    rm = momentum_residual(prob, u, theta, math.inf)
    rh = heat_residual(prob, u, theta, math.inf)
    A, rhs, _ = heat_operator(prob, u, theta, math.inf)
    href = max(float(np.linalg.norm(rhs)), float(np.linalg.norm(A @ theta)), 1e-300)
    stats["momentum_residual"] = float(np.linalg.norm(rm[free])) / ref
    stats["heat_residual"] = float(np.linalg.norm(rh)) / href
    if np.min(theta) < 0.0:
        i = int(np.argmin(theta))
        raise PositivityError(f"negative temperature {theta[i]:.6e} at node {i}",
                              state={"u": u, "theta": theta})
    if max(stats["momentum_residual"], stats["heat_residual"]) > tols.acceptance_rtol:
        raise StepFailure(
            f"untruncated residuals too large (momentum {stats['momentum_residual']:.2e}, "
            f"heat {stats['heat_residual']:.2e})", state={"u": u, "theta": theta})
    return CoupledResult(u, theta, stats)


# ---------------------------------------------------------------------------
# Temperature comparison sequences
# ---------------------------------------------------------------------------
def _root(a: float, tc: float) -> float:
    """Positive root of ``tc v^2 + v - a = 0`` (``a > 0``), cancellation-free."""
    if tc == 0.0:
        return a
    return 2.0 * a / (1.0 + math.sqrt(1.0 + 4.0 * tc * a))


@dataclass
class PositivityMonitor:
    """Lower bounds ``v_k`` (and ``v~_k`` with a source floor ``H_star``)."""

    theta_star: float
    c_bar: float
    T: float
    H_star: Optional[float] = None
    _v: list = field(default_factory=list, repr=False)
    _vt: list = field(default_factory=list, repr=False)
    _tau: Optional[float] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.theta_star > 0:
            raise ConfigurationError("theta_star must be positive")
        if self.c_bar < 0:
            raise ConfigurationError("c_bar must be nonnegative")
        if self.H_star is not None and self.H_star < 0:
            raise ConfigurationError("H_star must be nonnegative")

    @property
    def theta_tilde(self) -> float:
        return 1.0 / (self.c_bar * self.T + 1.0 / self.theta_star)

    @property
    def source_floor(self) -> float:
        if self.H_star is None or self.c_bar == 0.0:
            return 0.0
        return math.sqrt(self.H_star / self.c_bar)

    def _extend(self, k: int, tau: float):
        if self._tau != tau:
            self._tau = tau
            self._v = [self.theta_star]
            self._vt = [max(self.theta_star, self.source_floor)]
        hs = self.H_star or 0.0
        tc = tau * self.c_bar
        while len(self._v) <= k:
            self._v.append(_root(self._v[-1], tc))
            self._vt.append(_root(self._vt[-1] + tau * hs, tc))

    def floor(self, k: int, tau: float):
        """Return ``(v_k, v~_k, theta_tilde)``."""
        self._extend(k, tau)
        return self._v[k], self._vt[k], self.theta_tilde


def positivity_floor(monitor: PositivityMonitor, k: int, tau: float):
    return monitor.floor(k, tau)


@dataclass
class PositivityCheck:
    passed: bool
    margin: float
    node: int
    bound: float


def verify_positivity(theta, monitor: PositivityMonitor, k: int, tau: float, tol: float = 1e-10) -> PositivityCheck:
    v, vt, tt = monitor.floor(k, tau)
    bound = v
    if monitor.H_star is not None:
        bound = max(v, tt, monitor.source_floor)
    theta = np.asarray(theta)
    i = int(np.argmin(theta))
    margin = float(theta[i] - bound)
    return PositivityCheck(margin >= -tol, margin, i, bound)
