"""
Butcher tableaux for the stiffly accurate Lobatto methods (s = 2, 3, 4)
Coefficients are hard-coded; validate() certifies them.
"""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.linalg import null_space

from exceptions import UnsupportedStageCount

logger = logging.getLogger(__name__)

VALIDATE_TOL = 1e-14

_SQRT5 = np.sqrt(5.0)

_LOBATTO = {
    2: (
        [[0.0, 0.0],
         [1 / 2, 1 / 2]],
        [1 / 2, 1 / 2],
        [0.0, 1.0],
    ),
    3: (
        [[0.0, 0.0, 0.0],
         [5 / 24, 1 / 3, -1 / 24],
         [1 / 6, 2 / 3, 1 / 6]],
        [1 / 6, 2 / 3, 1 / 6],
        [0.0, 1 / 2, 1.0],
    ),
    4: (
        [[0.0, 0.0, 0.0, 0.0],
         [(11 + _SQRT5) / 120, (25 - _SQRT5) / 120, (25 - 13 * _SQRT5) / 120, (-1 + _SQRT5) / 120],
         [(11 - _SQRT5) / 120, (25 + 13 * _SQRT5) / 120, (25 + _SQRT5) / 120, (-1 - _SQRT5) / 120],
         [1 / 12, 5 / 12, 5 / 12, 1 / 12]],
        [1 / 12, 5 / 12, 5 / 12, 1 / 12],
        [0.0, (5 - _SQRT5) / 10, (5 + _SQRT5) / 10, 1.0],
    ),
}


@dataclass(frozen=True, eq=False)
class ButcherTableau:
    """(a, b, c) coefficients of an s-stage Runge-Kutta method"""
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        c = np.asarray(self.c, dtype=float)
        s = len(b)
        if a.shape != (s, s) or c.shape != (s,):
            raise ValueError(f"Inconsistent tableau shapes: a{a.shape}, b({s},), c{c.shape}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def s(self) -> int:
        return len(self.b)

    @property
    def order(self) -> int:
        """Classical order of the s-stage Lobatto family"""
        return 2 * self.s - 2

    @property
    def stiffly_accurate(self) -> bool:
        return bool(np.all(np.abs(self.a[-1] - self.b) <= VALIDATE_TOL))

    @property
    def multiplier_mode(self) -> np.ndarray:
        """
        Null vector of the inner rows a[1:], scaled to a unit first entry

        Stage multipliers along this vector leave every inner-stage sum
        sum_j a_ij Lambda^j unchanged. For Lobatto it is the shifted Legendre
        polynomial of degree s - 1 at the nodes, so b . mode = 0 as well.
        """
        mode = null_space(self.a[1:])[:, 0]
        return mode / mode[0]


def lobatto(s: int) -> ButcherTableau:
    """Stiffly accurate Lobatto tableau with a_1j = 0 and a_sj = b_j"""
    if s not in _LOBATTO:
        raise UnsupportedStageCount(f"Lobatto tableau available for s in (2, 3, 4), got {s}")
    a, b, c = _LOBATTO[s]
    return ButcherTableau(a=np.array(a), b=np.array(b), c=np.array(c))


def validate(t: ButcherTableau, tol: float = VALIDATE_TOL) -> List[str]:
    """
    Check the structural invariants and order conditions of a tableau

    Returns the names of violated conditions; an empty list means the tableau
    passes. Names: sum_b, row_sum[i], first_row_zero, stiffly_accurate,
    c_endpoints, simplifying_C(q), quadrature(q), with 1-based i.
    """
    violations = []
    s = t.s

    if abs(t.b.sum() - 1.0) > tol:
        violations.append("sum_b")

    for i in range(s):
        if abs(t.a[i].sum() - t.c[i]) > tol:
            violations.append(f"row_sum[{i + 1}]")

    if np.any(np.abs(t.a[0]) > tol):
        violations.append("first_row_zero")

    if np.any(np.abs(t.a[-1] - t.b) > tol):
        violations.append("stiffly_accurate")

    if abs(t.c[0]) > tol or abs(t.c[-1] - 1.0) > tol:
        violations.append("c_endpoints")

    for q in range(2, s + 1):
        lhs = t.a @ t.c ** (q - 1)
        if np.any(np.abs(lhs - t.c ** q / q) > tol):
            violations.append(f"simplifying_C({q})")

    for q in range(1, 2 * s - 1):
        if abs(t.b @ t.c ** (q - 1) - 1.0 / q) > tol:
            violations.append(f"quadrature({q})")

    if violations:
        logger.debug(f"Tableau s={s} violates: {', '.join(violations)}")
    return violations
