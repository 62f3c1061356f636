"""
SO(3) core
Algebraic operations on SO(3), so(3) and so(3)* under the R^3 vector identification.
Group elements are 3x3 rotation matrices; algebra and coalgebra elements are 3-vectors.
"""

import logging
from typing import Tuple

import numpy as np

from exceptions import NonSkewInput

logger = logging.getLogger(__name__)

# Type aliases: every one of these is a plain numpy array
GroupElement = np.ndarray      # (3, 3) rotation
AlgebraVector = np.ndarray     # (3,) element of so(3)
CoalgebraVector = np.ndarray   # (3,) element of so(3)*

SKEW_TOL = 1e-10
GIMBAL_MARGIN = 1e-3

IDENTITY = np.eye(3)


def hat(v: AlgebraVector) -> np.ndarray:
    """Skew matrix with hat(v) @ w == cross(v, w)"""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def vee(m: np.ndarray) -> AlgebraVector:
    """Inverse of hat; rejects matrices that are not skew"""
    m = np.asarray(m, dtype=float)
    defect = np.linalg.norm(m + m.T)
    if defect > SKEW_TOL:
        raise NonSkewInput(f"vee expects a skew matrix, |m + m^T| = {defect:.3e}")
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def adjoint(g: GroupElement, v: AlgebraVector) -> AlgebraVector:
    """Ad_g v; for SO(3) in vector form this is g @ v"""
    return g @ v


def coadjoint(g: GroupElement, p: CoalgebraVector) -> CoalgebraVector:
    """Ad*_g p = g^T p, dual of adjoint under the Euclidean pairing"""
    return g.T @ p


def ad(xi: AlgebraVector, eta: AlgebraVector) -> AlgebraVector:
    """Lie bracket ad_xi eta = xi x eta"""
    return np.cross(xi, eta)


def coad(xi: AlgebraVector, p: CoalgebraVector) -> CoalgebraVector:
    """ad*_xi p = p x xi"""
    return np.cross(p, xi)


def pair(p: CoalgebraVector, v: AlgebraVector) -> float:
    """Duality pairing <p, v>"""
    return float(np.dot(p, v))


def orthogonality_defect(g: GroupElement) -> float:
    """Frobenius norm of g^T g - I"""
    return float(np.linalg.norm(g.T @ g - IDENTITY))


def rot_x(theta: float) -> GroupElement:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(theta: float) -> GroupElement:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(theta: float) -> GroupElement:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def from_tait_bryan(theta1: float, theta2: float, theta3: float) -> GroupElement:
    """Rotation R_z(theta3) R_y(theta2) R_x(theta1)"""
    return rot_z(theta3) @ rot_y(theta2) @ rot_x(theta1)


def to_tait_bryan(g: GroupElement) -> Tuple[float, float, float, bool]:
    """
    Extract (theta1, theta2, theta3) from g = R_z(theta3) R_y(theta2) R_x(theta1)

    Returns the three angles plus a gimbal-lock flag. Near |theta2| = pi/2 the
    roll/yaw split is undetermined and theta1, theta3 come back as NaN.
    """
    theta2 = float(-np.arcsin(np.clip(g[2, 0], -1.0, 1.0)))
    if abs(theta2) >= np.pi / 2 - GIMBAL_MARGIN:
        return float("nan"), theta2, float("nan"), True
    theta1 = float(np.arctan2(g[2, 1], g[2, 2]))
    theta3 = float(np.arctan2(g[1, 0], g[0, 0]))
    return theta1, theta2, theta3, False
