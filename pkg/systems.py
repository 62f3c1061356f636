"""
Regularized trivialized Lagrangians on SO(3) for motions on S^2

    ell(g, eta) = (m/2)|eta x x0|^2 + (M_reg/2)(eta . x0)^2 + V(g)

The M_reg term makes the fiber Hessian diag(m, m, M_reg) invertible and
vanishes on the constraint distribution eta . x0 = 0.

Systems:
- FreeRigidBody: V = 0
- PendulumSystem: V = gamma . (g x0)
- KeplerSystem: V = rho c / sqrt(1 - c^2), c = X . (g x0)
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Union

import numpy as np

from exceptions import NearSingularPotential
from so3_core import AlgebraVector, CoalgebraVector, GroupElement, hat
from sphere import X0

logger = logging.getLogger(__name__)

# |c| guard for the Kepler potential
KEPLER_GUARD = 1e-10


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _check_masses(m: float, M_reg: float):
    if not m > 0:
        raise ValueError(f"m must be positive, got {m}")
    if M_reg == 0:
        raise ValueError("M_reg must be nonzero")


@dataclass(frozen=True)
class PendulumParams:
    m: float = 1.0
    M_reg: float = 1.0
    gamma: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))

    def __post_init__(self):
        _check_masses(self.m, self.M_reg)
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))

    @classmethod
    def with_alpha(cls, alpha: float, m: float = 1.0, M_reg: float = 1.0) -> "PendulumParams":
        """Vertical field gamma = (0, 0, -alpha)"""
        return cls(m=m, M_reg=M_reg, gamma=np.array([0.0, 0.0, -alpha]))


@dataclass(frozen=True)
class KeplerParams:
    m: float = 1.0
    M_reg: float = 1.0
    rho: float = 1.0
    X: np.ndarray = field(default_factory=lambda: _unit([0.437, 0.0, 0.899]))

    def __post_init__(self):
        _check_masses(self.m, self.M_reg)
        X = np.asarray(self.X, dtype=float)
        if abs(np.linalg.norm(X) - 1.0) > 1e-12:
            raise ValueError(f"Kepler attractor X must be a unit vector, |X| = {np.linalg.norm(X)}")
        object.__setattr__(self, "X", X)


class LagrangianSystem:
    """
    Shared kinetic part of the regularized Lagrangians

    Subclasses provide potential(g), force(g) and force_jacobian(g):
    - force(g) is the left-trivialized gradient of potential, <force, zeta> = d/de V(g tau(e zeta))
    - force_jacobian(g) @ omega is the derivative of force along g tau(e omega)
    """

    name = "free"

    def __init__(self, m: float = 1.0, M_reg: float = 1.0):
        _check_masses(m, M_reg)
        self.m = m
        self.M_reg = M_reg
        self._mass = np.array([m, m, M_reg])

    @property
    def mass_matrix(self) -> np.ndarray:
        return np.diag(self._mass)

    def kinetic(self, eta: AlgebraVector) -> float:
        return 0.5 * float(eta @ (self._mass * eta))

    def potential(self, g: GroupElement) -> float:
        return 0.0

    def force(self, g: GroupElement) -> CoalgebraVector:
        return np.zeros(3)

    def force_jacobian(self, g: GroupElement) -> np.ndarray:
        return np.zeros((3, 3))

    def ell(self, g: GroupElement, eta: AlgebraVector) -> float:
        return self.kinetic(eta) + self.potential(g)

    def energy(self, g: GroupElement, eta: AlgebraVector) -> float:
        return self.kinetic(eta) - self.potential(g)

    def momentum(self, eta: AlgebraVector) -> CoalgebraVector:
        """Fiber derivative D2 ell = diag(m, m, M_reg) eta"""
        return self._mass * eta

    def momentum_inv(self, p: CoalgebraVector) -> AlgebraVector:
        return p / self._mass


class FreeRigidBody(LagrangianSystem):
    """Kinetic energy only"""
    name = "free"


class PendulumSystem(LagrangianSystem):
    name = "pendulum"

    def __init__(self, params: Optional[PendulumParams] = None):
        params = params or PendulumParams()
        super().__init__(params.m, params.M_reg)
        self.params = params
        self.gamma = params.gamma

    def potential(self, g: GroupElement) -> float:
        return float(self.gamma @ (g @ X0))

    def force(self, g: GroupElement) -> CoalgebraVector:
        return np.cross(X0, g.T @ self.gamma)

    def force_jacobian(self, g: GroupElement) -> np.ndarray:
        return hat(X0) @ hat(g.T @ self.gamma)


class KeplerSystem(LagrangianSystem):
    name = "kepler"

    def __init__(self, params: Optional[KeplerParams] = None):
        params = params or KeplerParams()
        super().__init__(params.m, params.M_reg)
        self.params = params
        self.rho = params.rho
        self.X = params.X

    def _alignment(self, g: GroupElement):
        u = g.T @ self.X
        c = float(u @ X0)
        if abs(c) >= 1.0 - KEPLER_GUARD:
            raise NearSingularPotential(f"X . (g x0) = {c:.12f}: trajectory reached the attractor or its antipode")
        return u, c

    def potential(self, g: GroupElement) -> float:
        _, c = self._alignment(g)
        return self.rho * c / np.sqrt(1.0 - c * c)

    def force(self, g: GroupElement) -> CoalgebraVector:
        u, c = self._alignment(g)
        return self.rho * (1.0 - c * c) ** -1.5 * np.cross(X0, u)

    def force_jacobian(self, g: GroupElement) -> np.ndarray:
        u, c = self._alignment(g)
        du = hat(u)
        q = 1.0 - c * c
        radial = 3.0 * c * q ** -2.5 * np.outer(np.cross(X0, u), X0 @ du)
        return self.rho * (radial + q ** -1.5 * hat(X0) @ du)


class LatitudeConstraint:
    """Holonomic constraint Phi(g) = x0 . (g x0) - cos(latitude): the point g x0 stays on a circle"""

    def __init__(self, latitude: float = np.pi / 3):
        self.latitude = latitude
        self.level = float(np.cos(latitude))

    def value(self, g: GroupElement) -> float:
        return float(X0 @ (g @ X0)) - self.level

    def gradient(self, g: GroupElement) -> CoalgebraVector:
        """Left-trivialized gradient, <gradient, zeta> = d/de Phi(g tau(e zeta))"""
        return np.cross(X0, g.T @ X0)

    def jacobian(self, g: GroupElement) -> np.ndarray:
        return hat(X0) @ hat(g.T @ X0)


def spatial_momentum(g: GroupElement, mu: CoalgebraVector) -> CoalgebraVector:
    """Ad*_{g^-1} mu = g mu"""
    return g @ mu


# Module-level forms of the pendulum and Kepler operations

def pendulum_ell(params: PendulumParams, g: GroupElement, eta: AlgebraVector) -> float:
    return PendulumSystem(params).ell(g, eta)


def pendulum_force(params: PendulumParams, g: GroupElement) -> CoalgebraVector:
    return PendulumSystem(params).force(g)


def pendulum_momentum(params: PendulumParams, eta: AlgebraVector) -> CoalgebraVector:
    return PendulumSystem(params).momentum(eta)


def pendulum_momentum_inv(params: PendulumParams, p: CoalgebraVector) -> AlgebraVector:
    return PendulumSystem(params).momentum_inv(p)


def kepler_ell(params: KeplerParams, g: GroupElement, eta: AlgebraVector) -> float:
    return KeplerSystem(params).ell(g, eta)


def kepler_force(params: KeplerParams, g: GroupElement) -> CoalgebraVector:
    return KeplerSystem(params).force(g)


def build_system(name: str, params: Optional[Dict[str, Union[float, np.ndarray]]] = None) -> LagrangianSystem:
    """
    Build a system from its name and a flat parameter dict

    Args:
        name: pendulum, kepler or free
        params: keys m, M_reg, alpha, gamma (pendulum), rho, X (kepler)
    """
    params = dict(params or {})
    m = float(params.pop("m", 1.0))
    M_reg = float(params.pop("M_reg", 1.0))

    if name == "pendulum":
        if "gamma" in params:
            gamma = np.asarray(params.pop("gamma"), dtype=float)
        else:
            gamma = np.array([0.0, 0.0, -float(params.pop("alpha", 1.0))])
        system = PendulumSystem(PendulumParams(m=m, M_reg=M_reg, gamma=gamma))
    elif name == "kepler":
        kwargs = {"m": m, "M_reg": M_reg, "rho": float(params.pop("rho", 1.0))}
        if "X" in params:
            kwargs["X"] = _unit(params.pop("X"))
        system = KeplerSystem(KeplerParams(**kwargs))
    elif name == "free":
        system = FreeRigidBody(m, M_reg)
    else:
        raise ValueError(f"Unknown system '{name}', expected pendulum, kepler or free")

    if params:
        raise ValueError(f"Unknown parameters for {name}: {', '.join(sorted(params))}")

    logger.debug(f"Built {name} system (m={m}, M_reg={M_reg})")
    return system
