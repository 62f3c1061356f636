"""
Nonholonomic partitioned RKMK integrator on S^2 = SO(3)/SO(2)
Left-trivialized variational Runge-Kutta-Munthe-Kaas step with stage-wise
multipliers enforcing eta . x0 = 0, plus a holonomic variant.

Unknowns per step: Xidot^i in R^3 and Lambda^i (one scalar per stage), i = 1..s.
Equations per step:
  - 3s momentum-matching rows (Pi_hat^i against the stage momentum update)
  - s-1 stage constraint rows phi(H^i) = 0, i = 2..s
  - one closure row on the multipliers
"""

import os
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from dotenv import load_dotenv
from scipy.optimize import root

from exceptions import InconsistentInitialData, NewtonDivergence
from oracle import ContinuousState, continuous_rhs
from retraction import (
    RetractionKind, check_domain, ddtauL, ddtauL_dual, dddtauL, dtauL_inv_dual,
    dtauL_inv_matrix, dtauL_matrix, tau,
)
from so3_core import AlgebraVector, GroupElement, hat, orthogonality_defect
from sphere import X0, phi
from systems import LagrangianSystem, LatitudeConstraint
from tableau import ButcherTableau

load_dotenv()

logger = logging.getLogger(__name__)

CONSISTENCY_TOL = 1e-10
# residual below STAGNATION_FACTOR * newton_tol counts as converged once Newton stalls
STAGNATION_FACTOR = 10.0
# xtol handed to scipy.optimize.root
ROOT_XTOL = 1e-14
_BASIS = np.eye(3)
_EPS = np.finfo(float).eps


def _second_tensor(kind: RetractionKind, xi: AlgebraVector) -> np.ndarray:
    """Q[m][:, k] = dd^L tau_xi(e_k, e_m)"""
    return np.array([
        np.column_stack([ddtauL(kind, xi, ek, em) for ek in _BASIS]) for em in _BASIS
    ])


def _third_tensor(kind: RetractionKind, xi: AlgebraVector, eta: AlgebraVector) -> np.ndarray:
    """R[m][:, k] = derivative of dd^L tau_xi(eta, e_k) along e_m"""
    return np.array([
        np.column_stack([dddtauL(kind, xi, eta, ek, em) for ek in _BASIS]) for em in _BASIS
    ])


class ClosureStrategy(str, Enum):
    """
    Extra equation closing the stage multipliers of a step

    concat: Lambda^1 equals the Lambda^s carried from the previous step
    zero-first: Lambda^1 = 0
    weighted-zero: sum_j b_j v_j Lambda^j = 0 with v = tableau.multiplier_mode.
      The last stage constraint already fixes sum_j b_j Lambda^j to leading
      order, so the plain b-weighted sum leaves the v component undetermined.
    """
    CONCATENATION = "concat"
    ZERO_FIRST = "zero-first"
    WEIGHTED_ZERO_SUM = "weighted-zero"


class JacobianMode(str, Enum):
    ANALYTIC = "analytic"
    FINITE_DIFFERENCE = "fd"


class SolverBackend(str, Enum):
    NEWTON = "newton"
    SCIPY_ROOT = "root"


@dataclass
class SolverConfig:
    """Step size, retraction and solver settings for the stage solve"""
    h: float = 0.1
    newton_tol: float = 1e-12
    max_iter: int = 50
    jacobian: JacobianMode = JacobianMode.ANALYTIC
    retraction: RetractionKind = RetractionKind.EXPONENTIAL
    max_halvings: int = 8
    solver: SolverBackend = SolverBackend.NEWTON

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if not self.newton_tol > 0:
            raise ValueError(f"newton_tol must be positive, got {self.newton_tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")
        self.jacobian = JacobianMode(self.jacobian)
        self.solver = SolverBackend(self.solver)
        self.retraction = RetractionKind.parse(self.retraction)

    @classmethod
    def from_env(cls, **overrides) -> "SolverConfig":
        """Defaults from SPHERE_NEWTON_TOL, SPHERE_MAX_ITER, SPHERE_JACOBIAN and SPHERE_SOLVER, then overrides"""
        settings = {
            "newton_tol": float(os.getenv("SPHERE_NEWTON_TOL", "1e-12")),
            "max_iter": int(os.getenv("SPHERE_MAX_ITER", "50")),
            "jacobian": os.getenv("SPHERE_JACOBIAN", "analytic"),
            "solver": os.getenv("SPHERE_SOLVER", "newton"),
        }
        settings.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**settings)


@dataclass(frozen=True)
class StepState:
    g: GroupElement
    mu: np.ndarray
    lambda_carry: float = 0.0
    t: float = 0.0


@dataclass
class NewtonReport:
    iterations: int
    residual: float
    converged: bool = True
    damped_steps: int = 0
    stagnated: bool = False


@dataclass
class StageSolution:
    """Converged stage quantities, one row per stage"""
    Xi: np.ndarray       # (s, 3)
    Xidot: np.ndarray    # (s, 3)
    G: np.ndarray        # (s, 3, 3)
    Lambda: np.ndarray   # (s,)
    M0: np.ndarray       # (s, 3)
    H: np.ndarray        # (s, 3)
    N0: np.ndarray       # (s, 3)
    h: float
    retraction: RetractionKind
    report: Optional[NewtonReport] = None

    @property
    def phi_residuals(self) -> np.ndarray:
        """|phi(H^i)| for i = 2..s"""
        return np.abs(self.H[1:] @ X0)

    @property
    def phi_max(self) -> float:
        return float(self.phi_residuals.max()) if len(self.H) > 1 else 0.0


@dataclass
class Trajectory:
    states: List[StepState] = field(default_factory=list)
    lambda_s: List[float] = field(default_factory=list)
    # sum_j b_j Lambda^j of each step
    lambda_mean: List[float] = field(default_factory=list)
    phi_max: List[float] = field(default_factory=list)
    iterations: List[int] = field(default_factory=list)
    stages: List[StageSolution] = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return np.array([state.t for state in self.states])

    def energies(self, system: LagrangianSystem) -> np.ndarray:
        return np.array([system.energy(st.g, system.momentum_inv(st.mu)) for st in self.states])


class _Evaluation:
    """Forward quantities of the stage equations at one unknown vector"""
    __slots__ = ("xd", "lam", "Xi", "xi", "D", "tau_st", "G", "eta", "cf", "N0", "Pi0",
                 "Pi", "N", "T", "tau_xi", "D_xi", "g_next", "mu_next", "Pi_hat", "N_hat",
                 "M0", "H", "eta_next")


class StageEquations:
    """
    Stage system of one step, owned by a single step computation

    mode is one of:
      nonholonomic: constraint phi(H^i) = 0 with force Lambda^i x0 and a closure row
      holonomic: constraint Phi(G^i) = 0 with force Lambda^i grad Phi(G^i) and a tangency row
      free: no multipliers
    """

    def __init__(
        self,
        state: StepState,
        system: LagrangianSystem,
        tableau: ButcherTableau,
        config: SolverConfig,
        closure: ClosureStrategy = ClosureStrategy.CONCATENATION,
        mode: str = "nonholonomic",
        constraint: Optional[LatitudeConstraint] = None
    ):
        if mode not in ("nonholonomic", "holonomic", "free"):
            raise ValueError(f"Unknown stage mode '{mode}'")
        if mode == "holonomic" and constraint is None:
            raise ValueError("holonomic mode requires a constraint")

        self.state = state
        self.system = system
        self.tableau = tableau
        self.config = config
        self.closure = ClosureStrategy(closure)
        self.mode = mode
        self.constraint = constraint

        self.s = tableau.s
        self.h = config.h
        self.kind = config.retraction
        self.a = tableau.a
        self.b = tableau.b
        # W[i, j] = b_j a_ji / b_i
        self.W = (tableau.b[None, :] * tableau.a.T) / tableau.b[:, None]
        # zero sum weighted along the multiplier mode the inner stage rows leave free
        self.closure_weights = tableau.b * tableau.multiplier_mode
        self.has_multipliers = mode != "free"
        self.size = 4 * self.s if self.has_multipliers else 3 * self.s

    def initial_guess(self) -> np.ndarray:
        """Constant-velocity predictor, multipliers from the carry"""
        eta = self.system.momentum_inv(self.state.mu)
        z = np.tile(eta, self.s)
        if self.has_multipliers:
            z = np.concatenate([z, np.full(self.s, self.state.lambda_carry)])
        return z

    def _constraint_direction(self, G: GroupElement) -> np.ndarray:
        if self.mode == "holonomic":
            return self.constraint.gradient(G)
        return X0

    def evaluate(self, z: np.ndarray) -> _Evaluation:
        s, h, kind, system = self.s, self.h, self.kind, self.system
        ev = _Evaluation()
        ev.xd = z[:3 * s].reshape(s, 3)
        ev.lam = z[3 * s:] if self.has_multipliers else np.zeros(s)

        ev.Xi = h * self.a @ ev.xd
        ev.xi = h * self.b @ ev.xd
        ev.D = [dtauL_matrix(kind, x) for x in ev.Xi]
        ev.tau_st = [tau(kind, x) for x in ev.Xi]
        ev.G = [self.state.g @ t for t in ev.tau_st]
        ev.eta = np.array([ev.D[i] @ ev.xd[i] for i in range(s)])

        ev.cf = np.array([self._constraint_direction(G) for G in ev.G])
        ev.N0 = np.array([
            assemble_N0(system, ev.G[i], ev.eta[i], ev.lam[i], ev.cf[i]) for i in range(s)
        ])
        ev.Pi0 = np.array([system.momentum(e) for e in ev.eta])

        ev.Pi = np.array([ev.D[i].T @ ev.Pi0[i] for i in range(s)])
        ev.N = np.array([
            ev.D[i].T @ ev.N0[i] + ddtauL_dual(kind, ev.Xi[i], ev.xd[i], ev.Pi0[i]) for i in range(s)
        ])

        # Ad*_{tau(-Xi^j)} N0^j
        ev.T = np.array([ev.tau_st[j] @ ev.N0[j] for j in range(s)])
        ev.tau_xi = tau(kind, ev.xi)
        ev.D_xi = dtauL_matrix(kind, ev.xi)
        ev.g_next = self.state.g @ ev.tau_xi
        ev.mu_next = ev.tau_xi.T @ (self.state.mu + h * self.b @ ev.T)

        ev.Pi_hat = np.array([dtauL_inv_dual(kind, ev.xi, p) for p in ev.Pi])
        ev.N_hat = np.array([dtauL_inv_dual(kind, ev.xi, n) for n in ev.N])

        inner = self.state.mu[None, :] + h * self.a @ ev.T
        ev.M0 = np.array([ev.tau_st[i].T @ inner[i] for i in range(s)])
        ev.H = np.array([system.momentum_inv(m) for m in ev.M0])
        ev.eta_next = system.momentum_inv(ev.mu_next)
        return ev

    def residual_from(self, ev: _Evaluation) -> np.ndarray:
        h = self.h
        momentum_rows = ev.Pi_hat - ev.mu_next[None, :] + h * self.W @ ev.N_hat
        rows = [momentum_rows.ravel()]

        if self.mode == "nonholonomic":
            rows.append(ev.H[1:] @ X0)
            if self.closure == ClosureStrategy.CONCATENATION:
                rows.append([ev.lam[0] - self.state.lambda_carry])
            elif self.closure == ClosureStrategy.ZERO_FIRST:
                rows.append([ev.lam[0]])
            else:
                rows.append([self.closure_weights @ ev.lam])
        elif self.mode == "holonomic":
            rows.append([self.constraint.value(G) for G in ev.G[1:]])
            rows.append([self.constraint.gradient(ev.g_next) @ ev.eta_next])

        return np.concatenate(rows)

    def residual(self, z: np.ndarray) -> np.ndarray:
        return self.residual_from(self.evaluate(z))

    def jacobian(self, z: np.ndarray, ev: Optional[_Evaluation] = None) -> np.ndarray:
        """
        Jacobian of the residual

        Analytic mode linearizes every stage quantity in (dXidot, dLambda) with
        left perturbations omega^i = d^L tau_{Xi^i} dXi^i of the stage
        configurations; the retraction's second and third derivatives enter
        through the tensors of _second_tensor and _third_tensor.
        """
        if self.config.jacobian == JacobianMode.FINITE_DIFFERENCE:
            return self.fd_jacobian(z)
        ev = ev or self.evaluate(z)
        s, h, kind, n = self.s, self.h, self.kind, self.size
        mass = self.system.mass_matrix
        mass_inv = np.linalg.inv(mass)

        # selectors: dXidot^i = Sxd[i] dz, dLambda^i = Slam[i] dz
        Sxd = np.zeros((s, 3, n))
        Slam = np.zeros((s, n))
        for i in range(s):
            Sxd[i, :, 3 * i:3 * i + 3] = _BASIS
            if self.has_multipliers:
                Slam[i, 3 * s + i] = 1.0
        SXi = h * np.einsum("ij,jkn->ikn", self.a, Sxd)
        Sxi = h * np.einsum("j,jkn->kn", self.b, Sxd)

        omega = np.empty((s, 3, n))
        dN0 = np.empty((s, 3, n))
        dPi = np.empty((s, 3, n))
        dN = np.empty((s, 3, n))
        dT = np.empty((s, 3, n))
        for i in range(s):
            D, xd, Pi0, N0 = ev.D[i], ev.xd[i], ev.Pi0[i], ev.N0[i]
            Qt = _second_tensor(kind, ev.Xi[i])
            Rt = _third_tensor(kind, ev.Xi[i], xd)

            # P v = dd^L tau_Xi(Xidot, v) ; K(p) dv = (dd^L tau_Xi(dv, .))^* p
            P = np.column_stack([Qt[m] @ xd for m in range(3)])
            K_pi = np.array([Qt[m].T @ Pi0 for m in range(3)])
            K_n0 = np.array([Qt[m].T @ N0 for m in range(3)])
            R_pi = np.column_stack([Rt[m].T @ Pi0 for m in range(3)])

            A0 = self.system.force_jacobian(ev.G[i])
            if self.mode == "holonomic":
                A0 = A0 + ev.lam[i] * self.constraint.jacobian(ev.G[i])

            omega[i] = D @ SXi[i]
            d_pi0 = mass @ (D @ Sxd[i] + P @ SXi[i])
            dN0[i] = A0 @ omega[i] + np.outer(ev.cf[i], Slam[i])
            dPi[i] = D.T @ d_pi0 + K_pi.T @ SXi[i]
            dN[i] = D.T @ dN0[i] + K_n0.T @ SXi[i] + P.T @ d_pi0 + K_pi @ Sxd[i] + R_pi @ SXi[i]
            dT[i] = ev.tau_st[i] @ (dN0[i] - hat(N0) @ omega[i])

        omega_xi = ev.D_xi @ Sxi
        dmu_next = hat(ev.mu_next) @ omega_xi + ev.tau_xi.T @ (h * np.einsum("j,jkn->kn", self.b, dT))

        Qt_xi = _second_tensor(kind, ev.xi)
        D_xi_inv_T = dtauL_inv_matrix(kind, ev.xi).T

        def transported(x_hat, dx):
            K = np.array([Qt_xi[m].T @ x_hat for m in range(3)])
            return D_xi_inv_T @ (dx - K.T @ Sxi)

        dPi_hat = np.array([transported(ev.Pi_hat[i], dPi[i]) for i in range(s)])
        dN_hat = np.array([transported(ev.N_hat[i], dN[i]) for i in range(s)])
        momentum_rows = dPi_hat - dmu_next[None] + h * np.einsum("ij,jkn->ikn", self.W, dN_hat)
        rows = [momentum_rows.reshape(3 * s, n)]

        if self.mode == "nonholonomic":
            d_inner = h * np.einsum("ij,jkn->ikn", self.a, dT)
            for i in range(1, s):
                dM0 = hat(ev.M0[i]) @ omega[i] + ev.tau_st[i].T @ d_inner[i]
                rows.append((X0 @ mass_inv @ dM0)[None])
            if self.closure == ClosureStrategy.WEIGHTED_ZERO_SUM:
                rows.append((self.closure_weights @ Slam)[None])
            else:
                rows.append(Slam[0][None])
        elif self.mode == "holonomic":
            for i in range(1, s):
                rows.append((ev.cf[i] @ omega[i])[None])
            grad_next = self.constraint.gradient(ev.g_next)
            tangency = ev.eta_next @ self.constraint.jacobian(ev.g_next) @ omega_xi
            rows.append((tangency + grad_next @ mass_inv @ dmu_next)[None])

        return np.vstack(rows)

    def fd_jacobian(self, z: np.ndarray, eps: float = 1e-7) -> np.ndarray:
        """Central-difference Jacobian, kept as a debugging aid"""
        columns = []
        for k in range(self.size):
            step = eps * max(1.0, abs(z[k]))
            dz = np.zeros(self.size)
            dz[k] = step
            columns.append((self.residual(z + dz) - self.residual(z - dz)) / (2 * step))
        return np.column_stack(columns)

    def solve(self, z0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, _Evaluation, NewtonReport]:
        """Solve the stage equations with the configured backend"""
        z = self.initial_guess() if z0 is None else np.array(z0, dtype=float)
        ev = self.evaluate(z)
        r = self.residual_from(ev)
        norm = float(np.max(np.abs(r)))
        if norm <= self.config.newton_tol:
            return z, ev, NewtonReport(iterations=0, residual=norm)
        if self.config.solver == SolverBackend.SCIPY_ROOT:
            return self._root(z)
        return self._newton(z, ev, r, norm)

    def _root(self, z: np.ndarray) -> Tuple[np.ndarray, _Evaluation, NewtonReport]:
        """Powell hybrid method of scipy.optimize.root, fed with the same Jacobian"""
        cfg = self.config
        sol = root(self.residual, z, jac=self.jacobian, method="hybr",
                   options={"xtol": ROOT_XTOL, "maxfev": cfg.max_iter * (self.size + 1)})
        ev = self.evaluate(sol.x)
        norm = float(np.max(np.abs(self.residual_from(ev))))
        if not np.isfinite(norm) or norm > STAGNATION_FACTOR * cfg.newton_tol:
            logger.error(f"scipy.optimize.root failed: {sol.message}")
            raise NewtonDivergence("Stage equations did not converge", norm, int(sol.nfev))
        return sol.x, ev, NewtonReport(iterations=int(sol.nfev), residual=norm,
                                       stagnated=norm > cfg.newton_tol)

    def _newton(self, z: np.ndarray, ev: _Evaluation, r: np.ndarray,
                norm: float) -> Tuple[np.ndarray, _Evaluation, NewtonReport]:
        """
        Damped Newton iteration on the stage equations

        The step is halved up to max_halvings times while the residual grows.
        Converges when |r|_inf <= newton_tol, or when the Newton update has
        reached roundoff size with |r|_inf <= STAGNATION_FACTOR newton_tol.
        A direction along which no halving decreases the residual raises
        NewtonDivergence unless the residual already sits at that floor.
        """
        cfg = self.config
        damped = 0

        for iteration in range(1, cfg.max_iter + 1):
            J = self.jacobian(z, ev)
            try:
                dz = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                raise NewtonDivergence("Singular stage Jacobian", norm, iteration)

            at_floor = norm <= STAGNATION_FACTOR * cfg.newton_tol
            if at_floor and np.max(np.abs(dz)) <= 4 * _EPS * (1.0 + np.max(np.abs(z))):
                return z, ev, NewtonReport(iterations=iteration, residual=norm,
                                           damped_steps=damped, stagnated=True)

            scale = 1.0
            for _ in range(cfg.max_halvings + 1):
                z_try = z + scale * dz
                ev_try = self.evaluate(z_try)
                r_try = self.residual_from(ev_try)
                norm_try = float(np.max(np.abs(r_try)))
                if np.isfinite(norm_try) and (norm_try < norm or norm_try <= cfg.newton_tol):
                    break
                scale *= 0.5
            else:
                if at_floor:
                    # roundoff floor: no further decrease is possible
                    return z, ev, NewtonReport(iterations=iteration, residual=norm,
                                               damped_steps=damped, stagnated=True)
                logger.error(f"Newton damping exhausted at iteration {iteration} (residual {norm:.3e})")
                raise NewtonDivergence("No residual decrease along the Newton direction", norm, iteration)
            if scale < 1.0:
                damped += 1

            z, ev, r, norm = z_try, ev_try, r_try, norm_try
            if norm <= cfg.newton_tol:
                return z, ev, NewtonReport(iterations=iteration, residual=norm, damped_steps=damped)

        raise NewtonDivergence("Stage equations did not converge", norm, cfg.max_iter)

    def stage_solution(self, ev: _Evaluation, report: Optional[NewtonReport] = None) -> StageSolution:
        return StageSolution(
            Xi=ev.Xi.copy(),
            Xidot=ev.xd.copy(),
            G=np.array(ev.G),
            Lambda=np.array(ev.lam, dtype=float),
            M0=ev.M0,
            H=ev.H,
            N0=ev.N0,
            h=self.h,
            retraction=self.kind,
            report=report,
        )


def assemble_N0(system: LagrangianSystem, Gi: GroupElement, eta_i: AlgebraVector,
                Lambda_i: float, direction: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Stage force N0^i = force(G^i) + Lambda^i Dphi with Dphi = x0

    eta_i enters the stage only through Pi0 = momentum(eta_i), so it is unused
    here. direction replaces x0 for holonomic constraints.
    """
    return system.force(Gi) + Lambda_i * (X0 if direction is None else direction)


def stage_residual(
    state: StepState,
    tableau: ButcherTableau,
    unknowns: np.ndarray,
    config: SolverConfig,
    system: LagrangianSystem,
    closure: ClosureStrategy = ClosureStrategy.CONCATENATION,
    constrained: bool = True
) -> np.ndarray:
    """Residual of the nonholonomic stage equations (free variational equations if not constrained)"""
    mode = "nonholonomic" if constrained else "free"
    return StageEquations(state, system, tableau, config, closure, mode).residual(np.asarray(unknowns, dtype=float))


def initial_multiplier(system: LagrangianSystem, g0: GroupElement, eta0: AlgebraVector) -> float:
    """
    Multiplier making d/dt phi(eta) = 0 in the continuous equations at t = 0

    From Mom eta' = (Mom eta) x eta + force + lambda x0 and x0 . eta' = 0.
    """
    _, lam = continuous_rhs(system, ContinuousState(np.asarray(g0, dtype=float), np.asarray(eta0, dtype=float)))
    return lam


def initial_state(
    system: LagrangianSystem,
    g0: GroupElement,
    eta0: AlgebraVector,
    lambda0: Optional[float] = None,
    constrained: bool = True
) -> StepState:
    """StepState at t = 0 with mu0 = momentum(eta0)"""
    g0 = np.asarray(g0, dtype=float)
    eta0 = np.asarray(eta0, dtype=float)
    if orthogonality_defect(g0) > CONSISTENCY_TOL:
        raise InconsistentInitialData(f"g0 is not a rotation (|g^T g - I| = {orthogonality_defect(g0):.3e})")
    if constrained and abs(phi(eta0)) > CONSISTENCY_TOL:
        raise InconsistentInitialData(f"eta0 violates eta . x0 = 0 (phi = {phi(eta0):.3e})")
    if lambda0 is None:
        lambda0 = initial_multiplier(system, g0, eta0) if constrained else 0.0
    return StepState(g=g0, mu=system.momentum(eta0), lambda_carry=float(lambda0), t=0.0)


def step(
    state: StepState,
    system: LagrangianSystem,
    tableau: ButcherTableau,
    config: SolverConfig,
    closure: ClosureStrategy = ClosureStrategy.CONCATENATION,
    constrained: bool = True
) -> Tuple[StepState, StageSolution]:
    """
    Advance (g, mu, Lambda carry) by one step of size config.h

    Raises:
        InconsistentInitialData: phi(momentum_inv(mu)) is not zero
        NewtonDivergence: stage equations not solved within max_iter
        RetractionDomainExceeded: the step rotation leaves the retraction's injectivity domain
    """
    if constrained:
        residual = phi(system.momentum_inv(state.mu))
        if abs(residual) > CONSISTENCY_TOL:
            raise InconsistentInitialData(f"mu_k violates the constraint (phi = {residual:.3e})")

    equations = StageEquations(state, system, tableau, config, closure,
                               "nonholonomic" if constrained else "free")
    z, ev, report = equations.solve()
    check_domain(config.retraction, ev.xi)

    stages = equations.stage_solution(ev, report)
    carry = float(ev.lam[-1]) if constrained else 0.0
    new_state = StepState(g=ev.g_next, mu=ev.mu_next, lambda_carry=carry, t=state.t + config.h)
    logger.debug(f"t={new_state.t:.6f} newton={report.iterations} residual={report.residual:.2e}")
    return new_state, stages


def recover_inner_momenta(
    state: StepState,
    stages: StageSolution,
    tableau: ButcherTableau,
    system: LagrangianSystem
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Inner stage momenta M0^i and velocities H^i from a converged stage solution

    M0^i = Ad*_{tau(Xi^i)} [mu_k + h sum_j a_ij Ad*_{tau(-Xi^j)} N0^j], H^i = momentum_inv(M0^i).
    Only needs (Xi, N0), so it also works as post-processing of an unconstrained step.
    """
    kind, h = stages.retraction, stages.h
    taus = [tau(kind, x) for x in stages.Xi]
    T = np.array([taus[j] @ stages.N0[j] for j in range(tableau.s)])
    out = []
    for i in range(tableau.s):
        m0 = taus[i].T @ (state.mu + h * tableau.a[i] @ T)
        out.append((m0, system.momentum_inv(m0)))
    return out


def step_holonomic(
    state: StepState,
    system: LagrangianSystem,
    constraint: LatitudeConstraint,
    tableau: ButcherTableau,
    config: SolverConfig
) -> StepState:
    """
    One step with the holonomic constraint Phi(G^i) = 0 (i = 2..s) and the
    tangency condition <grad Phi(g_{k+1}), eta_{k+1}> = 0
    """
    if abs(constraint.value(state.g)) > CONSISTENCY_TOL:
        raise InconsistentInitialData(f"g_k violates the holonomic constraint (Phi = {constraint.value(state.g):.3e})")
    tangency = constraint.gradient(state.g) @ system.momentum_inv(state.mu)
    if abs(tangency) > CONSISTENCY_TOL:
        raise InconsistentInitialData(f"velocity not tangent to the constraint ({tangency:.3e})")

    equations = StageEquations(state, system, tableau, config, mode="holonomic", constraint=constraint)
    z, ev, report = equations.solve()
    check_domain(config.retraction, ev.xi)
    logger.debug(f"holonomic t={state.t + config.h:.6f} newton={report.iterations}")
    return StepState(g=ev.g_next, mu=ev.mu_next, lambda_carry=float(ev.lam[-1]), t=state.t + config.h)


def integrate(
    system: LagrangianSystem,
    tableau: ButcherTableau,
    g0: GroupElement,
    eta0: AlgebraVector,
    n_steps: int,
    config: SolverConfig,
    closure: ClosureStrategy = ClosureStrategy.CONCATENATION,
    lambda0: Optional[float] = None,
    constrained: bool = True,
    keep_stages: bool = False
) -> Trajectory:
    """
    Run n_steps steps from (g0, eta0)

    Row 0 of the diagnostics holds the initial carry as lambda_s and lambda_mean, and 0 as phi_max.
    """
    state = initial_state(system, g0, eta0, lambda0, constrained)
    traj = Trajectory(states=[state], lambda_s=[state.lambda_carry], lambda_mean=[state.lambda_carry],
                      phi_max=[0.0], iterations=[0])

    for k in range(n_steps):
        state, stages = step(state, system, tableau, config, closure, constrained)
        traj.states.append(state)
        traj.lambda_s.append(float(stages.Lambda[-1]))
        traj.lambda_mean.append(float(tableau.b @ stages.Lambda))
        traj.phi_max.append(stages.phi_max if constrained else 0.0)
        traj.iterations.append(stages.report.iterations)
        if keep_stages:
            traj.stages.append(stages)

    logger.debug(f"Integrated {n_steps} steps to t={state.t:.6f} (s={tableau.s}, h={config.h})")
    return traj
