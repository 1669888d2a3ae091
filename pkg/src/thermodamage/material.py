"""Constitutive laws: damage-dependent elasticity, viscosity, thermal
expansion, conductivity, gradient regularization and the unidirectional
dissipation density.

Strains are handled in Mandel notation ``(e11, e22, sqrt(2) e12)`` so that the
Frobenius product ``A:B`` is the Euclidean dot product of the 3-vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

SQRT2 = math.sqrt(2.0)


def to_mandel(e) -> np.ndarray:
    """Symmetric 2x2 tensor(s) ``(..., 2, 2)`` to Mandel vectors ``(..., 3)``."""
    e = np.asarray(e, dtype=float)
    return np.stack([e[..., 0, 0], e[..., 1, 1], SQRT2 * 0.5 * (e[..., 0, 1] + e[..., 1, 0])], axis=-1)


def isotropic_mandel(lam: float, mu: float) -> np.ndarray:
    """Mandel matrix of ``A -> lam tr(A) I + 2 mu A``."""
    return np.array(
        [[lam + 2 * mu, lam, 0.0], [lam, lam + 2 * mu, 0.0], [0.0, 0.0, 2 * mu]]
    )


def r1(v):
    """Dissipation density: ``|v|`` for ``v <= 0``, ``+inf`` otherwise."""
    v = np.asarray(v, dtype=float)
    out = np.where(v <= 0.0, -v, np.inf)
    return float(out) if out.ndim == 0 else out


def truncate(theta, M):
    """Clamp temperatures to ``[0, M]``; ``M`` may be ``inf``."""
    if not M > 0:
        raise DomainError(f"truncation level must be positive, got {M!r}")
    out = np.clip(np.asarray(theta, dtype=float), 0.0, M)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MaterialLaws:
    """All material parameters.

    ``C(z) = (z^2 + delta_at) C0`` with ``C0`` isotropic (``lam``, ``mu``);
    ``D(z, theta) = d(z) D0`` with ``d = 1`` or ``d = c`` (``viscosity_profile``
    ``"constant"`` or ``"damage"``); ``B = expansion * I``;
    ``k(z, theta) = k0 (1 + |theta|^kappa)``;
    ``G(z, xi) = grad_coeff |xi|^q + W(z)`` on ``[0, 1]`` with
    ``W(z) = w0 + w1 z + w2 z^2 / 2``.
    """

    lam: float = 1.0
    mu: float = 1.0
    delta_at: float = 0.1
    visc_lam: float = 0.0
    visc_mu: float = 0.5
    viscosity_profile: str = "constant"
    expansion: float = 0.0
    k0: float = 1.0
    kappa: float = 1.5
    q: float = 2.0
    grad_coeff: float = 1.0
    w0: float = 0.5
    w1: float = 0.0
    w2: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        if self.mu <= 0 or self.lam + self.mu <= 0:
            raise ConfigurationError("elastic base tensor must be positive definite (mu > 0, lam + mu > 0)")
        if self.visc_mu <= 0 or self.visc_lam + self.visc_mu <= 0:
            raise ConfigurationError("viscous base tensor must be positive definite")
        if self.delta_at < 0:
            raise ConfigurationError("delta_at must be nonnegative")
        if self.viscosity_profile not in ("constant", "damage"):
            raise ConfigurationError("viscosity_profile must be 'constant' or 'damage'")
        if self.k0 <= 0:
            raise ConfigurationError("k0 must be positive")
        if not 1.0 < self.kappa < 2.0:
            raise ConfigurationError("kappa must lie in (1, 2) for d = 2")
        if self.q <= 1.0:
            raise ConfigurationError("gradient exponent q must exceed 1")
        if self.grad_coeff <= 0:
            raise ConfigurationError("grad_coeff must be positive")
        if self.rho <= 0:
            raise ConfigurationError("rho must be positive")

    # -- tensors --------------------------------------------------------
    @property
    def C0(self) -> np.ndarray:
        return isotropic_mandel(self.lam, self.mu)

    @property
    def D0(self) -> np.ndarray:
        return isotropic_mandel(self.visc_lam, self.visc_mu)

    @property
    def B(self) -> np.ndarray:
        return self.expansion * np.eye(2)

    @property
    def B_mandel(self) -> np.ndarray:
        return np.array([self.expansion, self.expansion, 0.0])

    def damage_profile(self, z):
        z = np.asarray(z, dtype=float)
        return z * z + self.delta_at

    def damage_profile_prime(self, z):
        return 2.0 * np.asarray(z, dtype=float)

    def viscosity_factor(self, z, theta=None):
        if self.viscosity_profile == "damage":
            return self.damage_profile(z)
        return np.ones_like(np.asarray(z, dtype=float))

    # -- bound constants -----------------------------------------------
    @staticmethod
    def _iso_bounds(lam, mu):
        eig = (2 * mu, 2 * mu + 2 * lam)
        return min(eig), max(eig)

    @property
    def C_C1(self) -> float:
        return self.delta_at * self._iso_bounds(self.lam, self.mu)[0]

    @property
    def C_C2(self) -> float:
        return (1.0 + self.delta_at) * self._iso_bounds(self.lam, self.mu)[1]

    @property
    def C_D1(self) -> float:
        lo = self.delta_at if self.viscosity_profile == "damage" else 1.0
        return lo * self._iso_bounds(self.visc_lam, self.visc_mu)[0]

    @property
    def C_D2(self) -> float:
        hi = 1.0 + self.delta_at if self.viscosity_profile == "damage" else 1.0
        return hi * self._iso_bounds(self.visc_lam, self.visc_mu)[1]

    @property
    def C_B(self) -> float:
        return abs(self.expansion) * SQRT2

    @property
    def c_bar(self) -> float:
        """Constant of the temperature comparison ODE, ``C_B^2 / (2 C_D1)``."""
        return self.C_B**2 / (2.0 * self.C_D1)

    @property
    def c1(self) -> float:
        return self.k0

    @property
    def c2(self) -> float:
        return SQRT2 * self.k0

    # -- densities -----------------------------------------------------
    def elastic_energy_density(self, z, e):
        """``(1/2) c(z) C0 e:e`` and its z-derivative for a 2x2 strain ``e``."""
        z = float(z)
        if not 0.0 <= z <= 1.0:
            raise DomainError(f"damage {z} outside [0, 1]")
        em = to_mandel(e)
        quad = float(em @ self.C0 @ em)
        return 0.5 * float(self.damage_profile(z)) * quad, 0.5 * float(self.damage_profile_prime(z)) * quad

    def potential(self, z):
        z = np.asarray(z, dtype=float)
        return self.w0 + self.w1 * z + 0.5 * self.w2 * z * z

    def potential_prime(self, z):
        return self.w1 + self.w2 * np.asarray(z, dtype=float)

    def gradient_energy_density(self, z, grad_z):
        """Return ``(G, dG/dz, dG/dxi)``; ``G = inf`` outside ``z in [0, 1]``."""
        z = float(z)
        xi = np.asarray(grad_z, dtype=float)
        if not 0.0 <= z <= 1.0:
            return math.inf, math.nan, np.full(2, np.nan)
        nrm = float(np.hypot(*xi))
        g = self.grad_coeff * nrm**self.q + float(self.potential(z))
        if nrm > 0.0:
            dxi = self.grad_coeff * self.q * nrm ** (self.q - 2.0) * xi
        else:
            dxi = np.zeros(2)
        return g, float(self.potential_prime(z)), dxi

    def conductivity(self, z, theta):
        theta = np.asarray(theta, dtype=float)
        out = self.k0 * (1.0 + np.abs(theta) ** self.kappa)
        return float(out) if out.ndim == 0 else out

    def conductivity_dtheta(self, z, theta):
        theta = np.asarray(theta, dtype=float)
        return self.k0 * self.kappa * np.abs(theta) ** (self.kappa - 1.0) * np.sign(theta)
