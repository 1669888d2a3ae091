"""Unilateral damage update and semistability sampling.

The incremental problem for ``z`` is a box-constrained smooth minimization:
on the admissible set ``0 <= z <= z_prev`` the dissipation is the linear
functional ``int (z_prev - z)``.  Two monotone solvers are provided, both
started at ``z_prev``: a two-metric projected Newton method with the exact
sparse Hessian (default) and projected gradient descent with
Barzilai-Borwein step lengths.  Both use Armijo backtracking along the
projection arc, so every iterate lowers the objective.
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import element_strains, geometry, lumped_mass, scalar_mass
from .errors import ConvergenceError, InputError
from .material import MaterialLaws
from .mesh import Mesh2D

_TINY = 1e-300


@dataclass
class DamageProblem:
    """One damage increment with frozen displacement ``u`` (nodal, interleaved).

    ``objective(z) = E_z(z) + int (z_prev - z)`` where ``E_z`` collects every
    ``z``-dependent part of the stored energy (elastic, gradient, potential).
    """

    mesh: Mesh2D
    material: MaterialLaws
    u: np.ndarray
    z_prev: np.ndarray
    t: float = 0.0
    lower: Optional[np.ndarray] = None
    scale: float = 1.0  # positive factor applied to the whole objective
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        z = np.asarray(self.z_prev, dtype=float)
        if z.shape != (self.mesh.n_nodes,):
            raise InputError(f"z_prev must have shape ({self.mesh.n_nodes},)")
        if not np.all(np.isfinite(z)) or z.min() < 0.0 or z.max() > 1.0:
            raise InputError("previous damage outside [0, 1]: objective is not finite")
        self.z_prev = z
        self.lower = np.zeros_like(z) if self.lower is None else np.asarray(self.lower, dtype=float)
        if np.any(self.lower < 0) or np.any(self.lower > self.z_prev):
            raise InputError("bounds must satisfy 0 <= lower <= upper <= 1")
        g = geometry(self.mesh)
        e = element_strains(self.mesh, self.u)
        self._area = g.areas
        self._tri = self.mesh.triangles
        self._grads = g.grads
        self._quad = np.einsum("mi,ij,mj->m", e, self.material.C0, e)  # C0 e:e
        self._m = lumped_mass(self.mesh)
        self._M = scalar_mass(self.mesh)
        self._vol = float(self._area.sum())

    @property
    def upper(self) -> np.ndarray:
        return self.z_prev

    def project(self, z):
        return np.minimum(np.maximum(z, self.lower), self.upper)

    # -- energy pieces --------------------------------------------------
    def stored(self, z) -> float:
        """``z``-dependent stored energy: elastic + gradient + potential."""
        mat = self.material
        zc = z[self._tri].mean(axis=1)
        el = 0.5 * np.sum(mat.damage_profile(zc) * self._quad * self._area)
        gz = np.einsum("mak,ma->mk", self._grads, z[self._tri])
        gn = np.sqrt(np.einsum("mk,mk->m", gz, gz))
        grad = mat.grad_coeff * np.sum(self._area * gn**mat.q)
        pot = mat.w0 * self._vol + mat.w1 * (self._m @ z) + 0.5 * mat.w2 * (z @ (self._M @ z))
        return float(el + grad + pot)

    def elastic(self, z) -> float:
        zc = z[self._tri].mean(axis=1)
        return float(0.5 * np.sum(self.material.damage_profile(zc) * self._quad * self._area))

    def gradient_energy(self, z) -> float:
        return self.stored(z) - self.elastic(z)

    def dissipation(self, z) -> float:
        return float(self._m @ (self.z_prev - z))

    def objective(self, z) -> float:
        return self.scale * (self.stored(z) + self.dissipation(z))

    def gradient(self, z) -> np.ndarray:
        mat = self.material
        n = self.mesh.n_nodes
        zc = z[self._tri].mean(axis=1)
        w_el = 0.5 * mat.damage_profile_prime(zc) * self._quad * self._area / 3.0
        g = np.bincount(self._tri.ravel(), weights=np.repeat(w_el, 3), minlength=n)
        gz = np.einsum("mak,ma->mk", self._grads, z[self._tri])
        gn = np.sqrt(np.einsum("mk,mk->m", gz, gz))
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = np.where(gn > 0, mat.grad_coeff * mat.q * gn ** (mat.q - 2.0), 0.0)
        loc = (fac * self._area)[:, None] * np.einsum("mak,mk->ma", self._grads, gz)
        g += np.bincount(self._tri.ravel(), weights=loc.ravel(), minlength=n)
        g += mat.w1 * self._m + mat.w2 * (self._M @ z)
        g -= self._m
        return self.scale * g

    def hessian(self, z) -> sp.csr_matrix:
        mat = self.material
        n = self.mesh.n_nodes
        tri = self._tri
        # elastic: c'' = 2, each centroid derivative contributes 1/3
        w_el = 0.5 * 2.0 * self._quad * self._area / 9.0
        loc = w_el[:, None, None] * np.ones((1, 3, 3))
        gz = np.einsum("mak,ma->mk", self._grads, z[tri])
        gn = np.sqrt(np.einsum("mk,mk->m", gz, gz))
        q = mat.q
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(gn > 0, q * gn ** (q - 2.0), 1.0 if q == 2.0 else 0.0)
            b = np.where(gn > 0, q * (q - 2.0) * gn ** (q - 4.0), 0.0)
        T = a[:, None, None] * np.eye(2) + b[:, None, None] * np.einsum("mk,ml->mkl", gz, gz)
        loc = loc + (mat.grad_coeff * self._area)[:, None, None] * np.einsum(
            "mak,mkl,mbl->mab", self._grads, T, self._grads)
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        H = sp.coo_matrix((loc.ravel(), (rows, cols)), shape=(n, n)).tocsr()
        return self.scale * (H + mat.w2 * self._M)


@dataclass
class DamageResult:
    z: np.ndarray
    iterations: int
    stationarity: float
    objective: float
    objective_start: float


def stationarity(problem: DamageProblem, z, g, scale) -> float:
    """Scale-free projected-gradient residual ``|P(z - g/s) - z|_inf``."""
    return float(np.max(np.abs(problem.project(z - g / scale) - z), initial=0.0))


def minimize_damage(problem: DamageProblem, tol: float = 1e-9, max_iter: int = 10000,
                    sigma: float = 1e-4, method: str = "newton") -> DamageResult:
    """Minimize the incremental damage objective from ``z_prev``.

    ``method`` is ``"newton"`` (projected Newton) or ``"bb"`` (projected
    Barzilai-Borwein gradient).  Convergence is declared when the scale-free
    projected-gradient residual drops below ``tol``.
    """
    if method == "newton":
        return _projected_newton(problem, tol, max_iter, sigma)
    if method != "bb":
        raise ValueError(f"unknown damage solver {method!r}")
    z = problem.project(problem.z_prev.copy())
    f = problem.objective(z)
    if not np.isfinite(f):
        raise InputError("objective is not finite at the previous damage")
    f0 = f
    g = problem.gradient(z)
    s_ref = max(float(np.max(np.abs(g), initial=0.0)), abs(f), _TINY)
    pi = stationarity(problem, z, g, s_ref)
    alpha = 1.0 / max(float(np.max(np.abs(g), initial=0.0)), _TINY)
    it = 0
    while pi > tol:
        if it >= max_iter:
            raise ConvergenceError(f"damage solver hit the iteration cap ({max_iter})", residual=pi)
        d = problem.project(z - alpha * g) - z
        slope = float(g @ d)
        lam = 1.0
        while True:
            z_new = problem.project(z + lam * d)
            f_new = problem.objective(z_new)
            if f_new <= f + sigma * lam * slope:
                break
            lam *= 0.5
            if lam < 1e-30:
                if pi <= 1e3 * tol:
                    return DamageResult(z, it, pi, f, f0)
                raise ConvergenceError("damage line search stagnated", residual=pi)
        g_new = problem.gradient(z_new)
        s = z_new - z
        y = g_new - g
        sy = float(s @ y)
        alpha = float(s @ s) / sy if sy > 0 else 1e3 * alpha
        alpha = min(max(alpha, 1e-12 / s_ref), 1e12 / s_ref)
        z, f, g = z_new, f_new, g_new
        pi = stationarity(problem, z, g, s_ref)
        it += 1
    return DamageResult(z, it, pi, f, f0)


def _projected_newton(problem: DamageProblem, tol, max_iter, sigma) -> DamageResult:
    lo, hi = problem.lower, problem.upper
    z = problem.project(problem.z_prev.copy())
    f = problem.objective(z)
    if not np.isfinite(f):
        raise InputError("objective is not finite at the previous damage")
    f0 = f
    g = problem.gradient(z)
    s_ref = max(float(np.max(np.abs(g), initial=0.0)), abs(f), _TINY)
    pi = stationarity(problem, z, g, s_ref)
    fixed = hi - lo <= 0.0
    it = 0
    while pi > tol:
        if it >= max_iter:
            raise ConvergenceError(f"damage solver hit the iteration cap ({max_iter})", residual=pi)
        eps = min(1e-3, pi)
        active = fixed | ((z - lo <= eps) & (g > 0)) | ((hi - z <= eps) & (g < 0))
        free = ~active
        H = problem.hessian(z)
        d = np.zeros_like(z)
        diag = H.diagonal()
        dA = np.where(diag[active] > 0, diag[active], s_ref)
        d[active] = -g[active] / dA
        if free.any():
            Hff = H[free][:, free]
            try:
                d[free] = spla.spsolve(Hff.tocsc(), -g[free])
            except RuntimeError:
                d[free] = np.nan
            if not np.all(np.isfinite(d[free])) or float(g[free] @ d[free]) >= 0.0:
                d[free] = -g[free] / np.where(diag[free] > 0, diag[free], s_ref)
        lam = 1.0
        while True:
            z_new = problem.project(z + lam * d)
            f_new = problem.objective(z_new)
            dec = lam * float(-(g[free] @ d[free])) + float(g[active] @ (z[active] - z_new[active]))
            if f_new <= f - sigma * dec:
                break
            lam *= 0.5
            if lam < 1e-20:
                if pi <= 1e3 * tol:
                    return DamageResult(z, it, pi, f, f0)
                raise ConvergenceError("damage line search stagnated", residual=pi)
        z, f = z_new, f_new
        g = problem.gradient(z)
        pi = stationarity(problem, z, g, s_ref)
        it += 1
    return DamageResult(z, it, pi, f, f0)


@dataclass
class SemistabilityReport:
    min_residual: float
    worst_kind: str
    worst_competitor: Optional[np.ndarray]
    n_samples: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.min_residual >= -self.tol


def competitors(z: np.ndarray, n_samples: int, rng: np.random.Generator):
    """Yield ``(kind, z_tilde)`` with ``0 <= z_tilde <= z``.

    Kinds cycle through random nodal drops on a random subset, single-node
    drops and uniform drops; magnitudes are log-uniform over six decades.
    """
    n = len(z)
    kinds = ("nodal", "single", "uniform")
    for i in range(n_samples):
        kind = kinds[i % 3]
        mag = 10.0 ** rng.uniform(-6.0, 0.0)
        if kind == "nodal":
            mask = rng.random(n) < rng.uniform(0.05, 1.0)
            zt = z - mag * rng.random(n) * z * mask
        elif kind == "single":
            zt = z.copy()
            j = int(rng.integers(n))
            zt[j] = z[j] * (1.0 - mag)
        else:
            zt = z - mag
        yield kind, np.clip(zt, 0.0, z)


def check_semistability(mesh: Mesh2D, material: MaterialLaws, u, z, n_samples: int = 100,
                        tol: float = 1e-8, seed: int = 0, t: float = 0.0) -> SemistabilityReport:
    """Sample ``E(u, z~) + R(z~ - z) - E(u, z)`` over competitors ``z~ <= z``.

    The load part of the energy does not depend on ``z`` and cancels.  The
    reported minimum is ``inf`` when ``n_samples`` is 0.
    """
    prob = DamageProblem(mesh, material, u, np.asarray(z, dtype=float), t)
    base = prob.stored(prob.z_prev)
    worst, kind_w, comp_w = math.inf, "none", None
    rng = np.random.default_rng(seed)
    for kind, zt in competitors(prob.z_prev, n_samples, rng):
        r = prob.stored(zt) + prob.dissipation(zt) - base
        if r < worst:
            worst, kind_w, comp_w = r, kind, zt
    return SemistabilityReport(worst, kind_w, comp_w, n_samples, tol)
