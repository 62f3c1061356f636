"""
Retraction maps tau: so(3) -> SO(3)
Exponential and Cayley retractions, their inverses, and the left-trivialized
tangents d^L tau, dd^L tau (plus the third derivative used by the Newton Jacobian).

Both retractions share the same tangent structure on SO(3):

    d^L tau_xi = c0(s) I + c1(s) hat(xi) + c2(s) hat(xi)^2,   s = |xi|^2

so every tangent operator here is driven by the coefficient triple (c0, c1, c2)
and its s-derivatives. Below |xi| = 1 the exponential coefficients come from
their Taylor series, above it from closed forms.
"""

import logging
from enum import Enum
from math import factorial
from typing import Tuple

import numpy as np
from numpy.polynomial import Polynomial

from exceptions import OutOfInjectivityDomain
from so3_core import AlgebraVector, CoalgebraVector, GroupElement, IDENTITY, hat

logger = logging.getLogger(__name__)

# Rotation angle guard for the exponential logarithm
ANGLE_GUARD = 1e-6
# 1 + trace(g) guard for the Cayley inverse
CAYLEY_TRACE_GUARD = 1e-10
# Below this s = |xi|^2 the series branch is used
SERIES_CUTOFF = 1.0
SERIES_TERMS = 12

# |B_2n| for n = 1..10
_BERNOULLI_EVEN = [1 / 6, 1 / 30, 1 / 42, 1 / 30, 5 / 66, 691 / 2730, 7 / 6,
                   3617 / 510, 43867 / 798, 174611 / 330]


class RetractionKind(str, Enum):
    EXPONENTIAL = "exp"
    CAYLEY = "cay"

    @classmethod
    def parse(cls, text: str) -> "RetractionKind":
        """Accept 'exp'/'exponential' and 'cay'/'cayley' in any case"""
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower()
        aliases = {"exp": cls.EXPONENTIAL, "exponential": cls.EXPONENTIAL,
                   "cay": cls.CAYLEY, "cayley": cls.CAYLEY}
        if key not in aliases:
            raise ValueError(f"Unknown retraction '{text}', expected exp or cay")
        return aliases[key]


def _series(coeffs) -> Tuple[Polynomial, Polynomial, Polynomial]:
    poly = Polynomial(coeffs)
    return poly, poly.deriv(1), poly.deriv(2)


# A(s) = (1 - cos t)/t^2, B(s) = (t - sin t)/t^3 with t^2 = s
_EXP_A = _series([(-1) ** n / factorial(2 * n + 2) for n in range(SERIES_TERMS)])
_EXP_B = _series([(-1) ** n / factorial(2 * n + 3) for n in range(SERIES_TERMS)])
# D(s) = (1 - (t/2) cot(t/2)) / t^2, coefficient of hat(xi)^2 in dexp^-1
_EXP_D = Polynomial([b / factorial(2 * n + 2) for n, b in enumerate(_BERNOULLI_EVEN)])


def _exp_closed(s: float) -> np.ndarray:
    """A, B and their first two s-derivatives from closed forms (s >= 1)"""
    theta = np.sqrt(s)
    sin_t, cos_t = np.sin(theta), np.cos(theta)

    a = (1 - cos_t) / s
    a_t = sin_t / s - 2 * (1 - cos_t) / (s * theta)
    a_tt = cos_t / s - 4 * sin_t / (s * theta) + 6 * (1 - cos_t) / s ** 2

    b = (theta - sin_t) / (s * theta)
    b_t = (1 - cos_t) / (s * theta) - 3 * (theta - sin_t) / s ** 2
    b_tt = sin_t / (s * theta) - 6 * (1 - cos_t) / s ** 2 + 12 * (theta - sin_t) / (s ** 2 * theta)

    # d/ds = (1/2t) d/dt ; d2/ds2 = (f_tt - f_t/t) / (4 t^2)
    return np.array([
        [a, b],
        [a_t / (2 * theta), b_t / (2 * theta)],
        [(a_tt - a_t / theta) / (4 * s), (b_tt - b_t / theta) / (4 * s)],
    ])


def _exp_ab(s: float) -> np.ndarray:
    """Rows: value, d/ds, d2/ds2 ; columns: A, B"""
    if s < SERIES_CUTOFF:
        return np.array([[_EXP_A[k](s), _EXP_B[k](s)] for k in range(3)])
    return _exp_closed(s)


def tangent_coefficients(kind: RetractionKind, s: float) -> np.ndarray:
    """
    Coefficients of d^L tau_xi and their s-derivatives

    Returns a (3, 3) array: row k holds the k-th s-derivative of (c0, c1, c2).
    """
    if kind == RetractionKind.EXPONENTIAL:
        ab = _exp_ab(s)
        return np.column_stack([[1.0, 0.0, 0.0], -ab[:, 0], ab[:, 1]])

    q = 4.0 + s
    return np.array([
        [4 / q, -2 / q, 0.0],
        [-4 / q ** 2, 2 / q ** 2, 0.0],
        [8 / q ** 3, -4 / q ** 3, 0.0],
    ])


def inverse_tangent_coefficients(kind: RetractionKind, s: float) -> Tuple[float, float, float]:
    """Coefficients (c0, c1, c2) of (d^L tau_xi)^-1"""
    if kind == RetractionKind.EXPONENTIAL:
        if s < SERIES_CUTOFF:
            d = _EXP_D(s)
        else:
            half = np.sqrt(s) / 2
            d = (1 - half / np.tan(half)) / s
        return 1.0, 0.5, float(d)
    return 1.0 + s / 4, 0.5, 0.25


def _apply(c: Tuple[float, float, float], xi: AlgebraVector, v: np.ndarray) -> np.ndarray:
    """(c0 I + c1 hat(xi) + c2 hat(xi)^2) v"""
    xv = np.cross(xi, v)
    return c[0] * v + c[1] * xv + c[2] * np.cross(xi, xv)


def _apply_transpose(c: Tuple[float, float, float], xi: AlgebraVector, p: np.ndarray) -> np.ndarray:
    """(c0 I + c1 hat(xi) + c2 hat(xi)^2)^T p"""
    xp = np.cross(xi, p)
    return c[0] * p - c[1] * xp + c[2] * np.cross(xi, xp)


def tau(kind: RetractionKind, xi: AlgebraVector) -> GroupElement:
    """Retraction of xi onto SO(3); tau(0) is exactly the identity"""
    xi = np.asarray(xi, dtype=float)
    s = float(xi @ xi)
    x = hat(xi)
    if kind == RetractionKind.EXPONENTIAL:
        # Rodrigues: I + sin(t)/t X + (1 - cos t)/t^2 X^2
        theta = np.sqrt(s)
        return IDENTITY + np.sinc(theta / np.pi) * x + _exp_ab(s)[0, 0] * (x @ x)
    return IDENTITY + (4.0 / (4.0 + s)) * (x + 0.5 * (x @ x))


def tau_inv(kind: RetractionKind, g: GroupElement) -> AlgebraVector:
    """
    Inverse retraction

    Raises OutOfInjectivityDomain when g lies outside the region where the
    inverse is single valued (rotation angle near pi); this means the step
    size is too large.
    """
    skew = 0.5 * np.array([g[2, 1] - g[1, 2], g[0, 2] - g[2, 0], g[1, 0] - g[0, 1]])
    trace = float(np.trace(g))

    if kind == RetractionKind.EXPONENTIAL:
        angle = float(np.arctan2(np.linalg.norm(skew), (trace - 1) / 2))
        if angle >= np.pi - ANGLE_GUARD:
            raise OutOfInjectivityDomain(
                f"Rotation angle {angle:.6f} too close to pi for the exponential inverse"
            )
        return skew / np.sinc(angle / np.pi)

    if 1.0 + trace <= CAYLEY_TRACE_GUARD:
        raise OutOfInjectivityDomain(f"trace(g) = {trace:.6f} too close to -1 for the Cayley inverse")
    return 4.0 * skew / (1.0 + trace)


def check_domain(kind: RetractionKind, xi: AlgebraVector):
    """Raise OutOfInjectivityDomain if tau_inv(tau(xi)) would not give back xi"""
    if kind == RetractionKind.EXPONENTIAL:
        angle = float(np.linalg.norm(xi))
        if angle >= np.pi - ANGLE_GUARD:
            raise OutOfInjectivityDomain(
                f"Step rotation |xi| = {angle:.6f} leaves the exponential injectivity domain; reduce h"
            )


def dtauL_matrix(kind: RetractionKind, xi: AlgebraVector) -> np.ndarray:
    c = tangent_coefficients(kind, float(xi @ xi))[0]
    x = hat(xi)
    return c[0] * IDENTITY + c[1] * x + c[2] * (x @ x)


def dtauL_inv_matrix(kind: RetractionKind, xi: AlgebraVector) -> np.ndarray:
    c = inverse_tangent_coefficients(kind, float(xi @ xi))
    x = hat(xi)
    return c[0] * IDENTITY + c[1] * x + c[2] * (x @ x)


def dtauL(kind: RetractionKind, xi: AlgebraVector, eta: AlgebraVector) -> AlgebraVector:
    """d^L tau_xi(eta): tau(xi)^-1 d/de tau(xi + e eta) at e = 0, in vector form"""
    return _apply(tangent_coefficients(kind, float(xi @ xi))[0], xi, eta)


def dtauL_inv(kind: RetractionKind, xi: AlgebraVector, eta: AlgebraVector) -> AlgebraVector:
    return _apply(inverse_tangent_coefficients(kind, float(xi @ xi)), xi, eta)


def dtauL_dual(kind: RetractionKind, xi: AlgebraVector, p: CoalgebraVector) -> CoalgebraVector:
    return _apply_transpose(tangent_coefficients(kind, float(xi @ xi))[0], xi, p)


def dtauL_inv_dual(kind: RetractionKind, xi: AlgebraVector, p: CoalgebraVector) -> CoalgebraVector:
    return _apply_transpose(inverse_tangent_coefficients(kind, float(xi @ xi)), xi, p)


def ddtauL(kind: RetractionKind, xi: AlgebraVector, eta: AlgebraVector,
           zeta: AlgebraVector) -> AlgebraVector:
    """dd^L tau_xi(eta, zeta): derivative of xi -> d^L tau_xi(eta) along zeta"""
    c = tangent_coefficients(kind, float(xi @ xi))
    xe = np.cross(xi, eta)
    w = _apply(c[1], xi, eta)
    return (2 * float(xi @ zeta) * w
            + c[0, 1] * np.cross(zeta, eta)
            + c[0, 2] * (np.cross(zeta, xe) + np.cross(xi, np.cross(zeta, eta))))


def ddtauL_dual(kind: RetractionKind, xi: AlgebraVector, eta: AlgebraVector,
                p: CoalgebraVector) -> CoalgebraVector:
    """Adjoint of zeta -> dd^L tau_xi(eta, zeta): <result, zeta> = <p, dd^L tau_xi(eta, zeta)>"""
    c = tangent_coefficients(kind, float(xi @ xi))
    xe = np.cross(xi, eta)
    w = _apply(c[1], xi, eta)
    return (2 * float(p @ w) * xi
            + c[0, 1] * np.cross(eta, p)
            + c[0, 2] * (np.cross(xe, p) + np.cross(eta, np.cross(p, xi))))


def dddtauL(kind: RetractionKind, xi: AlgebraVector, eta: AlgebraVector,
            zeta: AlgebraVector, omega: AlgebraVector) -> AlgebraVector:
    """Derivative of xi -> dd^L tau_xi(eta, zeta) along omega"""
    c = tangent_coefficients(kind, float(xi @ xi))
    xz, xo = float(xi @ zeta), float(xi @ omega)
    xe = np.cross(xi, eta)
    ze, oe = np.cross(zeta, eta), np.cross(omega, eta)

    out = 2 * float(omega @ zeta) * _apply(c[1], xi, eta)
    out = out + 4 * xz * xo * _apply(c[2], xi, eta)
    out = out + 2 * xz * (c[1, 1] * oe + c[1, 2] * (np.cross(omega, xe) + np.cross(xi, oe)))
    out = out + 2 * xo * (c[1, 1] * ze + c[1, 2] * (np.cross(zeta, xe) + np.cross(xi, ze)))
    out = out + c[0, 2] * (np.cross(zeta, oe) + np.cross(omega, ze))
    return out
