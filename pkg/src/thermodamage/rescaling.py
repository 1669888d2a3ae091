"""Vanishing viscosity and inertia: the rescaled system over a sweep of ``eps``.

Member ``eps`` runs the standard scheme with inertia ``eps^2``, viscosity
``eps``, conductivity ``eps^-beta``, heat capacity ``eps`` and heating
factors ``eps`` (damage rate, thermal coupling) and ``eps^2`` (viscous).
Configured heat sources are read as the limit data ``H~`` (plus the
constant ``rescaling.H_tilde``) and ``h~`` and enter as ``eps H~`` and
``eps h~``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import assembly as asm
from .config import SimConfig
from .errors import ConfigurationError, StepFailure
from .thermomech import Scaling
from .timeloop import RunResult, run

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("eps", "grad_theta", "eps_strain_rate", "theta_oscillation", "mu_min", "mu_total",
                 "ode_residual_T", "ode_residual_max", "passed", "wall_time")
SLOPE_KEYS = ("grad_theta", "eps_strain_rate", "theta_oscillation", "ode_residual_T")


def check_rescaled(cfg: SimConfig) -> None:
    if cfg.rescaling is None:
        raise ConfigurationError("rescaling: section is required for a sweep")
    cfg.check_rescaling_mesh()


def member_config(cfg: SimConfig, eps: float) -> SimConfig:
    """Config of the ``eps`` member (heat data scaled by ``eps``)."""
    r = cfg.rescaling
    L = cfg.loads
    loads = dataclasses.replace(
        L,
        heat_source=L.heat_source.affine(eps, eps * r.H_tilde),
        heat_flux=L.heat_flux.affine(eps),
    )
    pos = cfg.positivity
    if pos.H_star is not None:
        pos = dataclasses.replace(pos, H_star=eps * pos.H_star)
    return cfg.replace(loads=loads, positivity=pos, scaling=Scaling(eps, r.beta))


def limit_heat_means(cfg: SimConfig, k: int, tau: float):
    """Step means of the limit sources ``(H~, h~)`` of member runs."""
    L = cfg.loads
    H = asm.local_mean(L.heat_source, k, tau) + cfg.rescaling.H_tilde
    return H, asm.local_mean(L.heat_flux, k, tau)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------
def theta_ode_residual(result: RunResult, base_cfg: SimConfig) -> np.ndarray:
    """Residual of the limit temperature balance tested with ``eta = 1``.

    ``res(t_k) = [int theta_k - int theta_0]
                 - [sum tau mu_j + int (z_0 - z_k) + sum tau (int H~ + int_dOmega h~)]``
    with ``mu_j`` the viscous defect density of step ``j``.
    """
    mesh, tr = result.mesh, result.trajectory
    m = asm.lumped_mass(mesh)
    vol, per = float(np.sum(m)), float(np.sum(asm.boundary_mass(mesh)))
    tau = base_cfg.tau
    mu = result.ledger.column("mu")
    n = len(tr.t) - 1
    res = np.zeros(n + 1)
    acc = 0.0
    for k in range(1, n + 1):
        H, h = limit_heat_means(base_cfg, k, tau)
        acc += tau * (mu[k] + H * vol + h * per)
        res[k] = float(m @ (tr.theta[k] - tr.theta[0])) - (acc + float(m @ (tr.z[0] - tr.z[k])))
    return res


def diagnostics(result: RunResult, base_cfg: SimConfig, eps: float) -> dict:
    mesh, tr = result.mesh, result.trajectory
    tau = base_cfg.tau
    area = mesh.areas
    Mc = asm.scalar_mass(mesh)
    m = asm.lumped_mass(mesh)
    vol = float(np.sum(m))
    g2 = 0.0
    e2 = 0.0
    osc = 0.0
    for k in range(len(tr.t)):
        th = tr.theta[k]
        d = th - float(m @ th) / vol
        osc = max(osc, math.sqrt(max(float(d @ (Mc @ d)), 0.0)))
        if k == 0:
            continue
        gt = asm.element_gradients(mesh, th)
        g2 += tau * float(np.sum(area * np.einsum("mk,mk->m", gt, gt)))
        e = asm.element_strains(mesh, (tr.u[k] - tr.u[k - 1]) / tau)
        e2 += tau * float(np.sum(area * np.einsum("mi,mi->m", e, e)))
    mu = result.ledger.column("mu")[1:]
    ode = theta_ode_residual(result, base_cfg)
    return {
        "eps": eps,
        "grad_theta": math.sqrt(g2),
        "eps_strain_rate": eps * math.sqrt(e2),
        "theta_oscillation": osc,
        "mu_min": float(np.min(mu)) if len(mu) else 0.0,
        "mu_total": float(tau * np.sum(mu)),
        "ode_residual_T": float(ode[-1]),
        "ode_residual_max": float(np.max(np.abs(ode))),
        "ode_residual": ode,
        "mu": mu,
        "passed": result.passed,
        "wall_time": result.wall_time,
    }


def fit_slope(eps, values) -> float:
    """Least-squares slope of ``log(values)`` against ``log(eps)``."""
    x = np.log(np.asarray(eps, dtype=float))
    with np.errstate(divide="ignore"):
        y = np.log(np.abs(np.asarray(values, dtype=float)))
    if len(x) < 2 or not np.all(np.isfinite(y)):
        return math.nan
    return float(np.polyfit(x, y, 1)[0])


def run_rescaled(cfg: SimConfig, eps: float):
    """Run the ``eps`` member; returns ``(RunResult, diagnostics)``."""
    check_rescaled(cfg)
    mcfg = member_config(cfg, eps)
    result = run(mcfg)
    return result, diagnostics(result, cfg, eps)


def _member_job(args):
    cfg, eps, threads = args
    from .assembly import set_num_threads

    set_num_threads(threads)
    return run_rescaled(cfg, eps)


@dataclass
class SweepReport:
    rows: List[dict]
    slopes: dict
    beta: float
    results: list = field(default_factory=list, repr=False)
    error: Optional[str] = None

    @property
    def eps(self):
        return [r["eps"] for r in self.rows]

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)


def sweep(cfg: SimConfig, workers: int = 1, keep_results: bool = True) -> SweepReport:
    """Run every ``eps`` member and fit log-log slopes of the diagnostics.

    Members run as independent processes when ``workers > 1``; the report is
    assembled in the configured ``eps`` order either way.
    """
    check_rescaled(cfg)
    eps_list = list(cfg.rescaling.eps)
    if len(eps_list) < 3:
        raise ConfigurationError("rescaling.eps: a sweep needs at least 3 values")
    if cfg.rescaling.beta < 2:
        log.warning("beta = %g < 2 lies outside the hypotheses of the limit theorem", cfg.rescaling.beta)
    pairs = []
    error = None
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=min(workers, len(eps_list))) as pool:
                pairs = list(pool.map(_member_job, [(cfg, e, 1) for e in eps_list]))
        else:
            for e in eps_list:
                pairs.append(run_rescaled(cfg, e))
    except StepFailure as exc:
        error = f"sweep aborted: {exc}"
        log.error(error)
    rows = [d for _, d in pairs]
    slopes = {}
    if rows:
        xs = [r["eps"] for r in rows]
        for key in SLOPE_KEYS:
            slopes[key] = fit_slope(xs, [r[key] for r in rows])
    report = SweepReport(rows, slopes, cfg.rescaling.beta, [res for res, _ in pairs] if keep_results else [], error)
    if error:
        raise_partial = StepFailure(error)
        raise_partial.partial = report
        raise raise_partial
    return report
