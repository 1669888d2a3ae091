"""P1 finite-element operators for every term of the discrete system.

Damage/temperature-modulated coefficients are evaluated once per triangle at
the centroid; products of P1 functions are integrated exactly.  Element
kernels are vectorised over contiguous chunks of triangles.  Chunks may run
on a thread pool, and their outputs are concatenated in chunk order before the
COO->CSR reduction, so results do not depend on the thread count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, InputError
from .material import SQRT2, MaterialLaws, truncate
from .mesh import Mesh2D, DofMap

_THREADS = max(1, int(os.environ.get("THERMODAMAGE_THREADS", "1") or 1))
_CHUNK = 4096


def set_num_threads(n: int) -> None:
    global _THREADS
    _THREADS = max(1, int(n))


def get_num_threads() -> int:
    return _THREADS


def _chunked(fn: Callable[[slice], np.ndarray], n: int) -> np.ndarray:
    """Evaluate ``fn`` over element slices and concatenate in slice order."""
    if n <= _CHUNK or _THREADS == 1:
        return fn(slice(0, n))
    slices = [slice(i, min(i + _CHUNK, n)) for i in range(0, n, _CHUNK)]
    with ThreadPoolExecutor(max_workers=_THREADS) as pool:
        parts = list(pool.map(fn, slices))
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# Sparse operators
# ---------------------------------------------------------------------------
@dataclass
class SparseOperator:
    matrix: sp.csr_matrix
    symmetric: bool = False

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)

    def __matmul__(self, x):
        return self.matrix @ x

    @property
    def shape(self):
        return self.matrix.shape

    def symmetry_defect(self) -> float:
        """``max|A - A^T| / max|A|`` (0 for the zero matrix)."""
        A = self.matrix
        amax = abs(A).max() if A.nnz else 0.0
        if amax == 0.0:
            return 0.0
        d = A - A.T
        return (abs(d).max() if d.nnz else 0.0) / amax

    def check_symmetry(self, rtol: float = 1e-12) -> bool:
        return self.symmetry_defect() <= rtol

    def toarray(self):
        return self.matrix.toarray()


def _scatter(local: np.ndarray, dofs: np.ndarray, shape) -> sp.csr_matrix:
    k = dofs.shape[1]
    rows = np.repeat(dofs, k, axis=1).ravel()
    cols = np.tile(dofs, (1, k)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=shape).tocsr()


def _scatter_vec(local: np.ndarray, dofs: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(dofs.ravel(), weights=local.ravel(), minlength=n)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Geometry:
    """Per-triangle P1 data derived from a mesh."""

    areas: np.ndarray  # (M,)
    grads: np.ndarray  # (M, 3, 2) gradients of barycentric functions
    strain: np.ndarray  # (M, 3, 6) Mandel strain-displacement
    vdofs: np.ndarray  # (M, 6)
    sdofs: np.ndarray  # (M, 3)
    n_nodes: int

    @property
    def div(self) -> np.ndarray:
        return self.strain[:, 0, :] + self.strain[:, 1, :]


@lru_cache(maxsize=32)
def _geometry_cached(mesh_id: int, mesh: Mesh2D) -> Geometry:
    return _build_geometry(mesh)


def geometry(mesh: Mesh2D) -> Geometry:
    return _geometry_cached(id(mesh), mesh)


def _build_geometry(mesh: Mesh2D) -> Geometry:
    P = mesh.nodes[mesh.triangles]  # (M, 3, 2)
    area = mesh.areas
    x, y = P[..., 0], P[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    grads = np.stack([b, c], axis=-1) / (2.0 * area)[:, None, None]
    M = len(area)
    Bm = np.zeros((M, 3, 6))
    gx, gy = grads[..., 0], grads[..., 1]
    Bm[:, 0, 0::2] = gx
    Bm[:, 1, 1::2] = gy
    Bm[:, 2, 0::2] = gy / SQRT2
    Bm[:, 2, 1::2] = gx / SQRT2
    tri = mesh.triangles
    vdofs = np.empty((M, 6), dtype=np.int64)
    vdofs[:, 0::2] = 2 * tri
    vdofs[:, 1::2] = 2 * tri + 1
    for arr in (grads, Bm, vdofs):
        arr.setflags(write=False)
    return Geometry(area, grads, Bm, vdofs, tri, mesh.n_nodes)


def centroid_values(mesh: Mesh2D, nodal: np.ndarray) -> np.ndarray:
    return np.asarray(nodal, dtype=float)[mesh.triangles].mean(axis=1)


def element_strains(mesh: Mesh2D, u: np.ndarray) -> np.ndarray:
    """Constant Mandel strain per triangle, shape ``(M, 3)``."""
    g = geometry(mesh)
    return np.einsum("mij,mj->mi", g.strain, np.asarray(u)[g.vdofs])


def element_gradients(mesh: Mesh2D, s: np.ndarray) -> np.ndarray:
    g = geometry(mesh)
    return np.einsum("mak,ma->mk", g.grads, np.asarray(s)[g.sdofs])


# ---------------------------------------------------------------------------
# Mass
# ---------------------------------------------------------------------------
_P1_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def scalar_mass(mesh: Mesh2D, coeff=1.0) -> sp.csr_matrix:
    """Consistent P1 mass matrix, optionally with a per-triangle coefficient."""
    g = geometry(mesh)
    w = g.areas * np.broadcast_to(np.asarray(coeff, dtype=float), g.areas.shape)
    local = _chunked(lambda s: w[s, None, None] * _P1_MASS, len(w))
    return _scatter(local, g.sdofs, (g.n_nodes, g.n_nodes))


def lumped_mass(mesh: Mesh2D) -> np.ndarray:
    """Row sums of the consistent mass: one third of the adjacent areas per node."""
    g = geometry(mesh)
    return _scatter_vec(np.repeat(g.areas[:, None] / 3.0, 3, axis=1), g.sdofs, g.n_nodes)


def assemble_mass(mesh: Mesh2D, dofmap: Optional[DofMap], rho: float, vector: bool = True) -> SparseOperator:
    """Consistent P1 mass ``rho * int phi_i . phi_j`` (vector- or scalar-valued)."""
    Ms = scalar_mass(mesh) * rho
    if not vector:
        return SparseOperator(Ms, symmetric=True)
    n = mesh.n_nodes
    Ms = Ms.tocoo()
    rows = np.concatenate([2 * Ms.row, 2 * Ms.row + 1])
    cols = np.concatenate([2 * Ms.col, 2 * Ms.col + 1])
    vals = np.concatenate([Ms.data, Ms.data])
    return SparseOperator(sp.coo_matrix((vals, (rows, cols)), shape=(2 * n, 2 * n)).tocsr(), symmetric=True)


# ---------------------------------------------------------------------------
# Elasticity, viscosity, gamma-regularization, thermal coupling
# ---------------------------------------------------------------------------
def _check_damage(z):
    z = np.asarray(z, dtype=float)
    if z.size and (np.nanmin(z) < 0.0 or np.nanmax(z) > 1.0 or not np.all(np.isfinite(z))):
        raise InputError("nodal damage must lie in [0, 1]")
    return z


def stiffness_with_coefficient(mesh: Mesh2D, coeff: np.ndarray, tensor: np.ndarray) -> SparseOperator:
    """``sum_T coeff_T |T| B_T^T tensor B_T`` over vector dofs."""
    g = geometry(mesh)
    w = g.areas * np.broadcast_to(np.asarray(coeff, dtype=float), g.areas.shape)

    def kernel(s):
        B = g.strain[s]
        return w[s, None, None] * np.einsum("mki,kl,mlj->mij", B, tensor, B)

    local = _chunked(kernel, len(w))
    n = 2 * g.n_nodes
    return SparseOperator(_scatter(local, g.vdofs, (n, n)), symmetric=True)


def assemble_elastic(mesh: Mesh2D, dofmap: Optional[DofMap], z: np.ndarray, material: MaterialLaws) -> SparseOperator:
    z = _check_damage(z)
    c = material.damage_profile(centroid_values(mesh, z))
    return stiffness_with_coefficient(mesh, c, material.C0)


def assemble_viscous(mesh: Mesh2D, dofmap: Optional[DofMap], z: np.ndarray, theta: np.ndarray,
                     material: MaterialLaws) -> SparseOperator:
    z = _check_damage(z)
    return stiffness_with_coefficient(mesh, viscous_coefficients(mesh, z, theta, material), material.D0)


def viscous_coefficients(mesh: Mesh2D, z, theta, material: MaterialLaws) -> np.ndarray:
    tc = None if theta is None else centroid_values(mesh, theta)
    return material.viscosity_factor(centroid_values(mesh, z), tc)


def assemble_gamma_term(mesh: Mesh2D, dofmap: Optional[DofMap], u: np.ndarray, tau: float, gamma: float):
    """Residual and exact Jacobian of ``v -> tau int |e(u)|^(gamma-2) e(u) : e(v)``."""
    if not gamma > 4:
        raise ConfigurationError(f"gamma must exceed 4, got {gamma!r}")
    g = geometry(mesh)
    e = element_strains(mesh, u)
    nrm = np.sqrt(np.einsum("mi,mi->m", e, e))
    w = tau * g.areas
    s1 = nrm ** (gamma - 2.0)
    # |e|^(gamma-4) is finite since gamma > 4; zero at e = 0 by convention.
    s2 = (gamma - 2.0) * nrm ** (gamma - 4.0)
    stress = s1[:, None] * e
    r_loc = w[:, None] * np.einsum("mki,mk->mi", g.strain, stress)
    r = _scatter_vec(r_loc, g.vdofs, 2 * g.n_nodes)

    def kernel(s):
        B = g.strain[s]
        T = s1[s, None, None] * np.eye(3) + s2[s, None, None] * np.einsum("mi,mj->mij", e[s], e[s])
        return w[s, None, None] * np.einsum("mki,mkl,mlj->mij", B, T, B)

    local = _chunked(kernel, len(w))
    n = 2 * g.n_nodes
    return r, SparseOperator(_scatter(local, g.vdofs, (n, n)), symmetric=True)


def gamma_energy(mesh: Mesh2D, u: np.ndarray, tau: float, gamma: float) -> float:
    e = element_strains(mesh, u)
    nrm = np.sqrt(np.einsum("mi,mi->m", e, e))
    return float(tau / gamma * np.sum(geometry(mesh).areas * nrm**gamma))


def assemble_coupling(mesh: Mesh2D, material: MaterialLaws) -> sp.csr_matrix:
    """Matrix ``P`` with ``(P theta) . v = int theta B : e(v)`` (vector x scalar dofs)."""
    g = geometry(mesh)
    Bm = material.B_mandel
    local = (g.areas / 3.0)[:, None, None] * np.einsum("k,mki->mi", Bm, g.strain)[:, :, None] * np.ones((1, 1, 3))
    rows = np.repeat(g.vdofs, 3, axis=1).ravel()
    cols = np.tile(g.sdofs, (1, 6)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(2 * g.n_nodes, g.n_nodes)).tocsr()


# ---------------------------------------------------------------------------
# Heat
# ---------------------------------------------------------------------------
def laplacian(mesh: Mesh2D, coeff=1.0) -> SparseOperator:
    """P1 stiffness ``int coeff grad phi_i . grad phi_j`` with per-triangle coefficient."""
    g = geometry(mesh)
    w = g.areas * np.broadcast_to(np.asarray(coeff, dtype=float), g.areas.shape)
    local = _chunked(lambda s: w[s, None, None] * np.einsum("mak,mbk->mab", g.grads[s], g.grads[s]), len(w))
    return SparseOperator(_scatter(local, g.sdofs, (g.n_nodes, g.n_nodes)), symmetric=True)


def conductivity_coefficients(mesh: Mesh2D, z, theta, M, material: MaterialLaws) -> np.ndarray:
    return material.conductivity(centroid_values(mesh, z), truncate(centroid_values(mesh, theta), M))


def assemble_heat_stiffness(mesh: Mesh2D, z, theta, M, material: MaterialLaws) -> SparseOperator:
    return laplacian(mesh, conductivity_coefficients(mesh, z, theta, M, material))


def heat_stiffness_jacobian(mesh: Mesh2D, z, theta, M, material: MaterialLaws) -> sp.csr_matrix:
    """Derivative of ``theta -> L(k(z, T_M(theta))) theta`` with respect to ``theta``.

    Returns the full Jacobian: the stiffness itself plus the term from the
    temperature dependence of the centroid conductivity.
    """
    g = geometry(mesh)
    zc = centroid_values(mesh, z)
    tc = centroid_values(mesh, theta)
    k = material.conductivity(zc, truncate(tc, M))
    dk = material.conductivity_dtheta(zc, tc)
    active = (tc > 0.0) & (tc < M)
    dk = np.where(active, dk, 0.0)
    grad_t = element_gradients(mesh, theta)
    # d/d theta_b [ k_T |T| grad phi_a . grad theta_T ] = |T| dk_T / 3 * (grad phi_a . grad theta_T)
    flux = np.einsum("mak,mk->ma", g.grads, grad_t) * (g.areas * dk / 3.0)[:, None]
    extra = flux[:, :, None] * np.ones((1, 1, 3))
    base = laplacian(mesh, k).matrix
    return base + _scatter(extra, g.sdofs, (g.n_nodes, g.n_nodes))


@dataclass
class HeatTerms:
    """Assembled pieces of the discrete heat equation.

    ``mass`` is either a lumped vector or a consistent matrix; every term that
    multiplies a test function uses the same quadrature so that testing with
    ``eta = 1`` reproduces the exact spatial integrals.
    """

    stiffness: SparseOperator
    mass: object  # ndarray (lumped) or csr_matrix (consistent)
    sink: sp.csr_matrix  # theta -> int theta B:e(rate) eta
    viscous: np.ndarray  # int D e(rate):e(rate) eta
    damage: np.ndarray  # int (z_prev - z) eta
    source: np.ndarray  # int H eta + int_boundary h eta
    lumped: bool = True

    def apply_mass(self, x):
        return self.mass * x if self.lumped else self.mass @ x

    def mass_matrix(self):
        return sp.diags(self.mass) if self.lumped else self.mass


def assemble_heat(
    mesh: Mesh2D,
    dofmap: Optional[DofMap],
    z,
    theta,
    M,
    material: MaterialLaws,
    *,
    strain_rate: Optional[np.ndarray] = None,
    visc_coeff: Optional[np.ndarray] = None,
    z_drop: Optional[np.ndarray] = None,
    H: float = 0.0,
    h: float = 0.0,
    lumped: bool = True,
) -> HeatTerms:
    """Conductivity stiffness at ``k(z, T_M(theta))`` plus the coupling/source terms.

    ``strain_rate`` is the Mandel ``e((u_k - u_{k-1}) / tau)`` per triangle,
    ``visc_coeff`` the per-triangle viscosity profile, ``z_drop`` the nodal
    ``z_{k-1} - z_k``.  ``H`` and ``h`` are spatially uniform (already
    time-averaged) volume source and boundary flux.
    """
    g = geometry(mesh)
    n = g.n_nodes
    K = assemble_heat_stiffness(mesh, z, theta, M, material)
    third = np.repeat(g.areas[:, None] / 3.0, 3, axis=1)
    if strain_rate is None:
        strain_rate = np.zeros((len(g.areas), 3))
    if visc_coeff is None:
        visc_coeff = np.ones(len(g.areas))
    tr = material.B_mandel @ strain_rate.T  # B : e per triangle
    dens = visc_coeff * np.einsum("mi,ij,mj->m", strain_rate, material.D0, strain_rate)
    viscous = _scatter_vec(third * dens[:, None], g.sdofs, n)
    if lumped:
        mass = lumped_mass(mesh)
        sink = sp.diags(_scatter_vec(third * tr[:, None], g.sdofs, n)).tocsr()
    else:
        mass = scalar_mass(mesh)
        sink = scalar_mass(mesh, tr)
    damage = np.zeros(n) if z_drop is None else (mass * z_drop if lumped else mass @ z_drop)
    if H < 0 or h < 0:
        raise InputError("heat source and boundary flux must be nonnegative")
    source = H * lumped_mass(mesh) + h * boundary_mass(mesh)
    return HeatTerms(K, mass, sink, viscous, damage, source, lumped)


def boundary_mass(mesh: Mesh2D, edges: Optional[np.ndarray] = None) -> np.ndarray:
    """``int_edges eta_i`` for every node: half of each adjacent edge length."""
    if edges is None:
        edges = np.arange(len(mesh.boundary_edges))
    L = mesh.edge_lengths[edges]
    nodes = mesh.boundary_edges[edges]
    return _scatter_vec(np.repeat(L[:, None] / 2.0, 2, axis=1), nodes, mesh.n_nodes)


# ---------------------------------------------------------------------------
# Loads
# ---------------------------------------------------------------------------
_GAUSS3_X = np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)])
_GAUSS3_W = np.array([5.0, 8.0, 5.0]) / 9.0


@dataclass(frozen=True)
class TimeFunction:
    """Scalar function of time: ``constant``, ``ramp`` (``start + rate t``),
    ``table`` (piecewise linear through ``times``/``values``, constant outside)
    or ``callable``."""

    kind: str = "constant"
    value: float = 0.0
    start: float = 0.0
    rate: float = 0.0
    times: tuple = ()
    values: tuple = ()
    func: Optional[Callable[[float], float]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("constant", "ramp", "table", "callable"):
            raise ConfigurationError(f"unknown time-function kind {self.kind!r}")
        if self.kind == "table":
            t = np.asarray(self.times, dtype=float)
            if len(t) < 1 or len(t) != len(self.values) or np.any(np.diff(t) <= 0):
                raise ConfigurationError("table needs strictly increasing times and matching values")
        if self.kind == "callable" and self.func is None:
            raise ConfigurationError("callable time function needs func")

    @classmethod
    def constant(cls, value):
        return cls("constant", value=float(value))

    @classmethod
    def ramp(cls, rate, start=0.0):
        return cls("ramp", start=float(start), rate=float(rate))

    @classmethod
    def table(cls, times, values):
        return cls("table", times=tuple(map(float, times)), values=tuple(map(float, values)))

    @classmethod
    def from_callable(cls, func):
        return cls("callable", func=func)

    def __call__(self, t):
        if self.kind == "constant":
            return self.value
        if self.kind == "ramp":
            return self.start + self.rate * t
        if self.kind == "table":
            return float(np.interp(t, self.times, self.values))
        return float(self.func(t))

    def affine(self, a: float, b: float = 0.0) -> "TimeFunction":
        """The time function ``a * g + b`` of the same kind."""
        if self.kind == "constant":
            return TimeFunction.constant(a * self.value + b)
        if self.kind == "ramp":
            return TimeFunction.ramp(a * self.rate, a * self.start + b)
        if self.kind == "table":
            return TimeFunction.table(self.times, [a * v + b for v in self.values])
        f = self.func
        return TimeFunction.from_callable(lambda t: a * f(t) + b)

    def min_on(self, t0: float, t1: float) -> float:
        """Lower bound of the function on ``[t0, t1]`` (exact except for callables)."""
        if self.kind == "constant":
            return self.value
        if self.kind == "ramp":
            return min(self(t0), self(t1))
        if self.kind == "table":
            pts = [t0, t1] + [t for t in self.times if t0 < t < t1]
            return min(self(t) for t in pts)
        return float(min(self(t) for t in np.linspace(t0, t1, 201)))

    def mean(self, a: float, b: float) -> float:
        """``(1/(b-a)) int_a^b g``: exact for constant/ramp, 3-point Gauss otherwise."""
        if self.kind == "constant":
            return self.value
        if self.kind == "ramp":
            return self(0.5 * (a + b))
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        return float(sum(w * self(mid + half * x) for w, x in zip(_GAUSS3_W, _GAUSS3_X)) / 2.0)


def local_mean(g: TimeFunction, k: int, tau: float, n: Optional[int] = None) -> float:
    """Average of ``g`` over the ``k``-th step ``(t_{k-1}, t_k]``, ``k >= 1``."""
    if k < 1 or (n is not None and k > n):
        raise InputError(f"step index {k} out of range 1..{n}")
    return g.mean((k - 1) * tau, k * tau)


@dataclass(frozen=True)
class LoadData:
    """Spatially uniform loads with separate time profiles.

    Volume force ``f_V(t) = volume_dir * volume_time(t)``; traction
    ``f_S(t) = traction_dir * traction_time(t)`` on Neumann edges (optionally
    restricted to ``traction_sides``); heat source ``H(t)`` and boundary flux
    ``h(t)`` (both nonnegative).
    """

    volume_dir: tuple = (0.0, 0.0)
    volume_time: TimeFunction = TimeFunction.constant(0.0)
    traction_dir: tuple = (0.0, 0.0)
    traction_time: TimeFunction = TimeFunction.constant(0.0)
    traction_sides: Optional[tuple] = None
    heat_source: TimeFunction = TimeFunction.constant(0.0)
    heat_flux: TimeFunction = TimeFunction.constant(0.0)

    def validate(self, T: float) -> None:
        for name, fn in (("heat_source", self.heat_source), ("heat_flux", self.heat_flux)):
            if fn.min_on(0.0, T) < 0.0:
                raise ConfigurationError(f"loads.{name}: must be nonnegative on [0, T]")


def volume_force_vector(mesh: Mesh2D, value) -> np.ndarray:
    w = lumped_mass(mesh)
    out = np.zeros(2 * mesh.n_nodes)
    out[0::2] = value[0] * w
    out[1::2] = value[1] * w
    return out


def traction_vector(mesh: Mesh2D, value, edges: np.ndarray) -> np.ndarray:
    w = boundary_mass(mesh, edges)
    out = np.zeros(2 * mesh.n_nodes)
    out[0::2] = value[0] * w
    out[1::2] = value[1] * w
    return out


class LoadAssembler:
    """Caches spatial load patterns and returns step-averaged load vectors."""

    def __init__(self, mesh: Mesh2D, loads: LoadData):
        from .mesh import NEUMANN

        self.mesh = mesh
        self.loads = loads
        edges = mesh.edges_on(loads.traction_sides, label=NEUMANN)
        self._fv = volume_force_vector(mesh, loads.volume_dir)
        self._fs = traction_vector(mesh, loads.traction_dir, edges)
        self.volume = float(np.sum(mesh.areas))
        self.perimeter = float(np.sum(mesh.edge_lengths))

    def force_at(self, t: float) -> np.ndarray:
        L = self.loads
        return L.volume_time(t) * self._fv + L.traction_time(t) * self._fs

    def force_mean(self, k: int, tau: float) -> np.ndarray:
        L = self.loads
        return local_mean(L.volume_time, k, tau) * self._fv + local_mean(L.traction_time, k, tau) * self._fs

    def heat_means(self, k: int, tau: float):
        L = self.loads
        return local_mean(L.heat_source, k, tau), local_mean(L.heat_flux, k, tau)
