"""
S^2 = SO(3)/SO(2) as a homogeneous space
Action of SO(3) on the unit sphere, the isotropy split so(3) = m + h at the
north pole and the reduced nonholonomic constraint phi(eta) = eta . x0.
"""

import numpy as np

from so3_core import AlgebraVector, GroupElement

SpherePoint = np.ndarray  # (3,) unit vector

# Origin of the homogeneous space: the north pole
X0 = np.array([0.0, 0.0, 1.0])


def act(g: GroupElement, x: SpherePoint) -> SpherePoint:
    return g @ x


def inf_action(eta: AlgebraVector, x: SpherePoint) -> np.ndarray:
    """Infinitesimal generator of eta at x: eta x x, tangent to the sphere at x"""
    return np.cross(eta, x)


def phi(eta: AlgebraVector) -> float:
    """Nonholonomic constraint eta . x0 (the h-component of eta)"""
    return float(eta @ X0)


def phi_gradient() -> np.ndarray:
    """D phi, constant because phi is linear"""
    return X0.copy()


def project_m(eta: AlgebraVector) -> AlgebraVector:
    """Orthogonal projection onto m = x0^perp"""
    return eta - phi(eta) * X0


def project_h(eta: AlgebraVector) -> AlgebraVector:
    """Complement of project_m: the isotropy (h) part of eta"""
    return phi(eta) * X0


def velocity_right(g: GroupElement, eta: AlgebraVector) -> np.ndarray:
    """d/dt (g(t) x0) when g' = hat(eta) g (right-trivialized velocity)"""
    return np.cross(eta, g @ X0)


def velocity_left(g: GroupElement, eta: AlgebraVector) -> np.ndarray:
    """d/dt (g(t) x0) when g' = g hat(eta) (left-trivialized velocity)"""
    return g @ np.cross(eta, X0)
