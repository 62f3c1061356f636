"""
Reference solutions of the continuous constrained Euler-Poincare equations

    Mom eta' = (Mom eta) x eta + force(g) + lambda x0,   eta . x0 = 0,   g' = g hat(eta)

lambda is eliminated from the x0-row, which turns the system into an ODE.
The ODE is integrated with a 4th-order Runge-Kutta-Munthe-Kaas scheme and
checked by Richardson extrapolation.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from exceptions import ToleranceNotReached
from retraction import RetractionKind, dtauL_inv, tau
from so3_core import AlgebraVector, GroupElement
from sphere import X0
from systems import LagrangianSystem

logger = logging.getLogger(__name__)

EXP = RetractionKind.EXPONENTIAL
FD_EPS = 1e-6


@dataclass(frozen=True)
class ContinuousState:
    g: GroupElement
    eta: AlgebraVector
    lam: float = 0.0
    t: float = 0.0


def continuous_rhs(system: LagrangianSystem, state: ContinuousState) -> Tuple[AlgebraVector, float]:
    """(eta', lambda) at state; lambda keeps x0 . eta' = 0"""
    eta = state.eta
    q = np.cross(system.momentum(eta), eta) + system.force(state.g)
    lam = -float(X0 @ system.momentum_inv(q)) / float(X0 @ system.momentum_inv(X0))
    return system.momentum_inv(q + lam * X0), lam


def _rkmk4_step(system: LagrangianSystem, g: GroupElement, eta: AlgebraVector,
                h: float) -> Tuple[GroupElement, AlgebraVector]:
    """Classical RK4 on (u, eta) with g = g_n exp(u) and u' = (d^L exp_u)^-1 eta"""
    def rhs(u, e):
        e_dot, _ = continuous_rhs(system, ContinuousState(g @ tau(EXP, u), e))
        return dtauL_inv(EXP, u, e), e_dot

    zero = np.zeros(3)
    k1u, k1e = rhs(zero, eta)
    k2u, k2e = rhs(0.5 * h * k1u, eta + 0.5 * h * k1e)
    k3u, k3e = rhs(0.5 * h * k2u, eta + 0.5 * h * k2e)
    k4u, k4e = rhs(h * k3u, eta + h * k3e)

    u = h / 6 * (k1u + 2 * k2u + 2 * k3u + k4u)
    eta_next = eta + h / 6 * (k1e + 2 * k2e + 2 * k3e + k4e)
    return g @ tau(EXP, u), eta_next


def _run(system: LagrangianSystem, g0: GroupElement, eta0: AlgebraVector, t_end: float,
         h: float) -> List[ContinuousState]:
    n_steps = int(np.ceil(t_end / h - 1e-9)) if t_end > 0 else 0
    dt = t_end / n_steps if n_steps else 0.0
    g, eta = np.asarray(g0, dtype=float), np.asarray(eta0, dtype=float)
    states = [ContinuousState(g, eta, continuous_rhs(system, ContinuousState(g, eta))[1], 0.0)]
    for k in range(n_steps):
        g, eta = _rkmk4_step(system, g, eta, dt)
        lam = continuous_rhs(system, ContinuousState(g, eta))[1]
        states.append(ContinuousState(g, eta, lam, (k + 1) * dt))
    return states


def _distance(a: ContinuousState, b: ContinuousState) -> float:
    return max(float(np.linalg.norm(a.g - b.g)), float(np.max(np.abs(a.eta - b.eta))))


def reference_solve(
    system: LagrangianSystem,
    g0: GroupElement,
    eta0: AlgebraVector,
    t_end: float,
    h_ref: float = 1e-3,
    tol: float = 1e-12,
    max_refinements: int = 3,
    verify: bool = True
) -> List[ContinuousState]:
    """
    Reference trajectory on a uniform grid ending exactly at t_end

    With verify, runs at h_ref and h_ref/2 and accepts when the Richardson
    estimate |y_h - y_{h/2}| / 15 of the finer run's error is below tol,
    halving h_ref up to max_refinements times. Returns the finer run.

    Raises:
        ToleranceNotReached: estimate still above tol at the smallest h_ref
    """
    if not verify or t_end == 0:
        return _run(system, g0, eta0, t_end, h_ref)

    coarse = _run(system, g0, eta0, t_end, h_ref)
    estimate = float("inf")
    for refinement in range(max_refinements + 1):
        fine = _run(system, g0, eta0, t_end, h_ref / 2)
        estimate = _distance(coarse[-1], fine[-1]) / 15.0
        logger.debug(f"Reference h={h_ref / 2:.3e}: Richardson estimate {estimate:.3e}")
        if estimate <= tol:
            return fine
        h_ref /= 2
        coarse = fine

    raise ToleranceNotReached(f"Reference solution not verified to {tol:.1e} down to h={h_ref:.3e}", estimate)


def reference_at(system: LagrangianSystem, g0: GroupElement, eta0: AlgebraVector, t_end: float,
                 h_ref: float = 1e-3, tol: float = 1e-12, verify: bool = True) -> ContinuousState:
    return reference_solve(system, g0, eta0, t_end, h_ref, tol=tol, verify=verify)[-1]


def fd_check(
    f: Callable[[np.ndarray], float],
    analytic_grad: Callable[[np.ndarray], np.ndarray],
    sample_count: int = 20,
    domain: str = "algebra",
    eps: float = FD_EPS,
    seed: Optional[int] = 0
) -> float:
    """
    Max |analytic - central difference| over random samples

    Args:
        f: scalar function of a group element (3x3) or an algebra vector
        analytic_grad: its gradient; on the group the left-trivialized one,
            <grad, zeta> = d/de f(g tau(e zeta))
        domain: "group" or "algebra"
    """
    if domain not in ("group", "algebra"):
        raise ValueError(f"Unknown domain '{domain}', expected group or algebra")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(sample_count):
        if domain == "group":
            point = tau(EXP, rng.uniform(-1.5, 1.5, 3))

            def shifted(v, p=point):
                return f(p @ tau(EXP, v))
            base = np.zeros(3)
        else:
            point = rng.uniform(-1.0, 1.0, 3)
            shifted, base = f, point

        numeric = np.array([
            (shifted(base + eps * e) - shifted(base - eps * e)) / (2 * eps) for e in np.eye(3)
        ])
        worst = max(worst, float(np.max(np.abs(numeric - analytic_grad(point)))))
    return worst
