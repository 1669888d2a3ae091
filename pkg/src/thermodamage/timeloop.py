"""Time stepping over the uniform partition and the per-step energy ledger.

Each step first updates the damage with the previous displacement frozen,
then solves the coupled momentum/heat system.  After every step the ledger
records the energy bookkeeping of the scheme and the certifications
(unidirectionality, temperature floor, both energy inequalities and,
at a fixed cadence, sampled semistability).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import assembly as asm
from .config import SimConfig
from .damage import DamageProblem, check_semistability, minimize_damage
from .errors import StepFailure
from .mesh import Mesh2D
from .thermomech import (CoupledProblem, PositivityMonitor, Scaling, StepContext, solve_coupled,
                         verify_positivity)

log = logging.getLogger(__name__)

ENERGY_COLUMNS = (
    "kinetic", "elastic", "gradient", "gamma_term", "load_potential", "energy",
    "dissipation", "viscous", "load_power", "heat_content", "heat_intake",
)
LEDGER_COLUMNS = ("k", "t") + ENERGY_COLUMNS + (
    "mech_residual", "total_residual", "theta_min", "v_k", "theta_floor", "positivity_margin",
    "z_increase", "semistability", "mu", "newton", "heat_iters", "M",
    "momentum_residual", "heat_residual",
)
FLAG_COLUMNS = ("unidirectional", "positive", "mech_energy", "total_energy", "semistable")


@dataclass
class State:
    u: np.ndarray
    u_dot: np.ndarray
    z: np.ndarray
    theta: np.ndarray
    t: float


# ---------------------------------------------------------------------------
# Energy pieces
# ---------------------------------------------------------------------------
def stored_energy(mesh: Mesh2D, material, u, z, tau, gamma):
    """Return ``(elastic, gradient + potential, gamma term)``."""
    prob = DamageProblem(mesh, material, u, z)
    el = prob.elastic(z)
    return el, prob.stored(z) - el, asm.gamma_energy(mesh, u, tau, gamma)


def kinetic_energy(ctx: StepContext, u, u_prev, tau, scaling: Scaling) -> float:
    v = (u - u_prev) / tau
    return 0.5 * scaling.inertia * float(v @ (ctx.mass_u @ v))


def step_dissipation_density(ctx: StepContext, u, u_prev, z_prev, theta, tau, scaling: Scaling):
    """``(int D e(v):e(v), int theta B:e(v))`` with ``v = (u - u_prev)/tau``."""
    mesh, mat = ctx.mesh, ctx.material
    e = asm.element_strains(mesh, (u - u_prev) / tau)
    d = asm.viscous_coefficients(mesh, z_prev, None, mat)
    area = mesh.areas
    visc = float(np.sum(area * d * np.einsum("mi,ij,mj->m", e, mat.D0, e)))
    theta_c = asm.centroid_values(mesh, theta)
    therm = float(np.sum(area * theta_c * (e @ mat.B_mandel)))
    return visc, therm


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------
class EnergyLedger:
    """Per-step energy components and certifications."""

    def __init__(self, tol_energy: float = 1e-8):
        self.rows: List[dict] = []
        self.tol_energy = tol_energy

    def __len__(self):
        return len(self.rows)

    def append(self, row: dict):
        self.rows.append(row)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def energy_scale(self) -> float:
        vals = [abs(r[c]) for r in self.rows for c in ENERGY_COLUMNS if math.isfinite(r[c])]
        return max(vals, default=0.0)

    def tolerance(self) -> float:
        return self.tol_energy * self.energy_scale()

    def finalize(self, semistab_tol: float, pos_tol: float = 1e-10, unidir_tol: float = 1e-14):
        """Set PASS/FAIL flags (the energy tolerance needs the whole run)."""
        tol = self.tolerance()
        stol = semistab_tol * self.energy_scale()
        for r in self.rows:
            r["unidirectional"] = r["z_increase"] <= unidir_tol
            r["positive"] = r["positivity_margin"] >= -pos_tol
            r["mech_energy"] = r["mech_residual"] >= -tol
            r["total_energy"] = r["total_residual"] >= -tol
            s = r["semistability"]
            r["semistable"] = None if not math.isfinite(s) else s >= -stol

    def all_pass(self) -> bool:
        return all(r.get(f) is not False for r in self.rows for f in FLAG_COLUMNS)

    def failures(self) -> list:
        return [(r["k"], f) for r in self.rows for f in FLAG_COLUMNS if r.get(f) is False]

    def worst(self) -> dict:
        return {
            "mech_residual": float(np.min(self.column("mech_residual"))),
            "total_residual": float(np.min(self.column("total_residual"))),
            "positivity_margin": float(np.min(self.column("positivity_margin"))),
            "z_increase": float(np.max(self.column("z_increase"))),
            "semistability": float(np.nanmin(np.append(self.column("semistability"), np.inf))),
            "energy_scale": self.energy_scale(),
        }


def mech_energy_residual(ledger: EnergyLedger, k: int) -> float:
    """``RHS - LHS`` of the discrete mechanical energy inequality at step ``k``."""
    r, r0 = ledger.rows[k], ledger.rows[0]
    lhs = r["kinetic"] + r["energy"] + r["dissipation"] + r["viscous"]
    rhs = r0["kinetic"] + r0["energy"] - r["load_power"]
    return rhs - lhs


def total_energy_residual(ledger: EnergyLedger, k: int) -> float:
    r, r0 = ledger.rows[k], ledger.rows[0]
    lhs = r["kinetic"] + r["energy"] + r["heat_content"]
    rhs = r0["kinetic"] + r0["energy"] + r0["heat_content"] - r["load_power"] + r["heat_intake"]
    return rhs - lhs


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------
@dataclass
class Trajectory:
    t: np.ndarray
    u: np.ndarray  # (n+1, 2N)
    z: np.ndarray
    theta: np.ndarray
    u_init_prev: np.ndarray  # u_{-1}
    forces: np.ndarray  # (n+1, 2N): f(0), then step means
    heat: np.ndarray  # (n+1, 2): (H, h) step means, row 0 unused

    def state(self, k: int) -> State:
        prev = self.u[k - 1] if k > 0 else self.u_init_prev
        tau = self.t[1] - self.t[0] if len(self.t) > 1 else 1.0
        return State(self.u[k], (self.u[k] - prev) / tau, self.z[k], self.theta[k], float(self.t[k]))


@dataclass
class RunResult:
    config: SimConfig
    mesh: Mesh2D
    trajectory: Trajectory
    ledger: EnergyLedger
    monitor: PositivityMonitor
    wall_time: float = 0.0
    stats: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.ledger.all_pass()


def make_monitor(cfg: SimConfig, theta0, scaling: Scaling) -> PositivityMonitor:
    """Comparison sequences for the (possibly rescaled) heat balance.

    With heat capacity ``a``, viscous-heating factor ``b`` and coupling factor
    ``c`` the pointwise Young bound yields the decay constant ``c^2 c_bar / (a b)``
    and the source floor ``H_star / a``.
    """
    a, b, c = scaling.capacity, scaling.viscous_heating, scaling.coupling_heat
    cb = cfg.material.c_bar * c * c / (a * b)
    hs = cfg.positivity.H_star
    return PositivityMonitor(cfg.theta_star(theta0), cb, cfg.T, None if hs is None else hs / a)


def run(cfg: SimConfig, scaling: Optional[Scaling] = None,
        progress: Optional[Callable[[int, dict], None]] = None) -> RunResult:
    """Integrate the scheme over ``[0, T]`` and certify every step.

    On a step failure the exception carries ``step`` and a ``partial``
    :class:`RunResult` with all accepted steps.
    """
    t_start = time.perf_counter()
    scaling = scaling or cfg.scaling
    mesh = cfg.get_mesh()
    mat = cfg.material
    n, tau = cfg.n_steps, cfg.tau
    gamma = cfg.solver.gamma
    ctx = StepContext(mesh, mat, gamma, cfg.solver.heat_mass)
    loads = asm.LoadAssembler(mesh, cfg.loads)
    tols = cfg.solver_tolerances()
    u0, v0, z0, theta0 = cfg.initial_fields()
    monitor = make_monitor(cfg, theta0, scaling)
    N = mesh.n_nodes

    U = np.zeros((n + 1, 2 * N))
    Z = np.zeros((n + 1, N))
    TH = np.zeros((n + 1, N))
    F = np.zeros((n + 1, 2 * N))
    HH = np.zeros((n + 1, 2))
    U[0], Z[0], TH[0] = u0, z0, theta0
    u_m1 = u0 - tau * v0
    F[0] = loads.force_at(0.0)
    traj = Trajectory(np.linspace(0.0, cfg.T, n + 1), U, Z, TH, u_m1, F, HH)
    ledger = EnergyLedger(cfg.tolerances.energy)
    result = RunResult(cfg, mesh, traj, ledger, monitor)

    ss = cfg.semistability
    bnd = asm.boundary_mass(mesh)

    def record(k, u, u_prev, z, z_prev, theta, f_bar, acc, stats, semi):
        el, gr, gt = stored_energy(mesh, mat, u, z, tau, gamma)
        lp = -float(f_bar @ u)
        row = {"k": k, "t": k * tau, "kinetic": kinetic_energy(ctx, u, u_prev, tau, scaling),
               "elastic": el, "gradient": gr, "gamma_term": gt, "load_potential": lp,
               "energy": el + gr + gt + lp}
        row.update(acc)
        row["heat_content"] = float(ctx.m_lumped @ theta)
        pos = verify_positivity(theta, monitor, k, tau, cfg.tolerances.positivity)
        v, _, _ = monitor.floor(k, tau)
        row.update(theta_min=float(np.min(theta)), v_k=v, theta_floor=pos.bound, positivity_margin=pos.margin,
                   z_increase=float(np.max(z - z_prev, initial=-np.inf)) if k > 0 else 0.0,
                   semistability=semi)
        row.update(newton=stats.get("newton", 0), heat_iters=stats.get("heat", 0),
                   M=stats.get("M") or 0.0, momentum_residual=stats.get("momentum_residual", 0.0),
                   heat_residual=stats.get("heat_residual", 0.0))
        ledger.append(row)
        row["mech_residual"] = mech_energy_residual(ledger, k)
        row["total_residual"] = total_energy_residual(ledger, k)
        return row

    acc = {"dissipation": 0.0, "viscous": 0.0, "load_power": 0.0, "heat_intake": 0.0, "mu": 0.0}
    semi0 = math.nan
    if ss.samples > 0:
        semi0 = check_semistability(mesh, mat, u0, z0, ss.samples, math.inf, cfg.seed).min_residual
    record(0, u0, u_m1, z0, z0, theta0, F[0], dict(acc), {}, semi0)

    u1, u2 = u0, u_m1
    f_prev = F[0]
    for k in range(1, n + 1):
        t_k = k * tau
        try:
            dres = minimize_damage(DamageProblem(mesh, mat, u1, Z[k - 1], t_k), cfg.tolerances.damage,
                                   cfg.solver.damage_max_iter, method=cfg.solver.damage)
            z = dres.z
            f_k = loads.force_mean(k, tau)
            H_k, h_k = loads.heat_means(k, tau)
            prob = CoupledProblem(ctx, u1, u2, TH[k - 1], z, Z[k - 1], tau, f_k, H_k, h_k, scaling)
            sol = solve_coupled(prob, tols, cfg.solver.M_schedule)
        except StepFailure as exc:
            exc.step = k
            exc.partial = _truncate(result, k)
            raise
        except Exception as exc:  # noqa: BLE001 - wrap solver errors with the step index
            err = StepFailure(f"step {k}: {exc}", step=k, state=None)
            err.partial = _truncate(result, k)
            raise err from exc
        u, theta = sol.u, sol.theta
        U[k], Z[k], TH[k], F[k] = u, z, theta, f_k
        HH[k] = (H_k, h_k)
        visc, therm = step_dissipation_density(ctx, u, u1, Z[k - 1], theta, tau, scaling)
        fdot = (f_k - f_prev) / tau
        acc["dissipation"] = float(ctx.m_lumped @ (z0 - z))
        acc["viscous"] += tau * (scaling.viscosity * visc - therm)
        acc["load_power"] += tau * float(fdot @ u1)
        intake = H_k * float(np.sum(ctx.m_lumped)) + h_k * float(np.sum(bnd))
        acc["heat_intake"] += tau * intake / scaling.capacity
        acc["mu"] = scaling.eps * visc
        semi = math.nan
        if ss.samples > 0 and (k % ss.every == 0 or k == n):
            semi = check_semistability(mesh, mat, u1, z, ss.samples, math.inf, cfg.seed + k, t_k).min_residual
        row = record(k, u, u1, z, Z[k - 1], theta, f_k, dict(acc), sol.stats, semi)
        result.stats.append({"damage_iters": dres.iterations, **sol.stats})
        if progress is not None:
            progress(k, row)
        u2, u1, f_prev = u1, u, f_k
    ledger.finalize(cfg.tolerances.semistability, cfg.tolerances.positivity, cfg.tolerances.unidirectionality)
    result.wall_time = time.perf_counter() - t_start
    return result


def _truncate(result: RunResult, k: int) -> RunResult:
    tr = result.trajectory
    t = Trajectory(tr.t[:k], tr.u[:k], tr.z[:k], tr.theta[:k], tr.u_init_prev, tr.forces[:k], tr.heat[:k])
    return RunResult(result.config, result.mesh, t, result.ledger, result.monitor, result.wall_time, result.stats)


# ---------------------------------------------------------------------------
# Re-certification from stored data
# ---------------------------------------------------------------------------
def rebuild_ledger(cfg: SimConfig, mesh: Mesh2D, traj: Trajectory, scaling: Optional[Scaling] = None,
                   semistability: bool = True) -> EnergyLedger:
    """Recompute every ledger entry and flag from a stored trajectory."""
    scaling = scaling or cfg.scaling
    mat, gamma = cfg.material, cfg.solver.gamma
    n = len(traj.t) - 1
    tau = cfg.tau
    ctx = StepContext(mesh, mat, gamma, cfg.solver.heat_mass)
    monitor = make_monitor(cfg, traj.theta[0], scaling)
    bnd = asm.boundary_mass(mesh)
    ledger = EnergyLedger(cfg.tolerances.energy)
    ss = cfg.semistability
    acc = {"dissipation": 0.0, "viscous": 0.0, "load_power": 0.0, "heat_intake": 0.0, "mu": 0.0}
    for k in range(n + 1):
        u = traj.u[k]
        u_prev = traj.u[k - 1] if k > 0 else traj.u_init_prev
        z, theta = traj.z[k], traj.theta[k]
        z_prev = traj.z[k - 1] if k > 0 else z
        semi = math.nan
        if k > 0:
            H_k, h_k = traj.heat[k]
            visc, therm = step_dissipation_density(ctx, u, u_prev, z_prev, theta, tau, scaling)
            acc["dissipation"] = float(ctx.m_lumped @ (traj.z[0] - z))
            acc["viscous"] += tau * (scaling.viscosity * visc - therm)
            acc["load_power"] += tau * float(((traj.forces[k] - traj.forces[k - 1]) / tau) @ u_prev)
            acc["heat_intake"] += tau * (H_k * float(np.sum(ctx.m_lumped)) + h_k * float(np.sum(bnd))) \
                / scaling.capacity
            acc["mu"] = scaling.eps * visc
        if semistability and ss.samples > 0 and (k == 0 or k % ss.every == 0 or k == n):
            u_frozen = u_prev if k > 0 else u
            semi = check_semistability(mesh, mat, u_frozen, z, ss.samples, math.inf, cfg.seed + k).min_residual
        el, gr, gt = stored_energy(mesh, mat, u, z, tau, gamma)
        lp = -float(traj.forces[k] @ u)
        row = {"k": k, "t": k * tau, "kinetic": kinetic_energy(ctx, u, u_prev, tau, scaling),
               "elastic": el, "gradient": gr, "gamma_term": gt, "load_potential": lp,
               "energy": el + gr + gt + lp, **acc,
               "heat_content": float(ctx.m_lumped @ theta)}
        pos = verify_positivity(theta, monitor, k, tau, cfg.tolerances.positivity)
        row.update(theta_min=float(np.min(theta)), v_k=monitor.floor(k, tau)[0], theta_floor=pos.bound,
                   positivity_margin=pos.margin,
                   z_increase=float(np.max(z - z_prev)) if k > 0 else 0.0, semistability=semi,
                   newton=0, heat_iters=0, M=0.0, momentum_residual=0.0, heat_residual=0.0)
        ledger.append(row)
        row["mech_residual"] = mech_energy_residual(ledger, k)
        row["total_residual"] = total_energy_residual(ledger, k)
    ledger.finalize(cfg.tolerances.semistability, cfg.tolerances.positivity, cfg.tolerances.unidirectionality)
    return ledger
