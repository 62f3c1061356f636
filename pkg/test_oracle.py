"""
Tests for the continuous reference solver and finite-difference utility
"""

import numpy as np
import pytest

from exceptions import ToleranceNotReached
from oracle import ContinuousState, continuous_rhs, fd_check, reference_at, reference_solve
from retraction import RetractionKind, tau
from so3_core import IDENTITY, from_tait_bryan
from sphere import phi
from systems import KeplerParams, KeplerSystem, PendulumParams, PendulumSystem

PENDULUM_G0 = from_tait_bryan(0.0, np.pi / 3, 0.0)
PENDULUM_ETA0 = np.array([1 / 3, 0.0, 0.0])


@pytest.fixture
def pendulum():
    return PendulumSystem(PendulumParams.with_alpha(1.0))


class TestContinuousRhs:
    """Tests for continuous_rhs()"""

    def test_equilibrium(self, pendulum):
        eta_dot, lam = continuous_rhs(pendulum, ContinuousState(IDENTITY, np.zeros(3)))
        np.testing.assert_array_equal(eta_dot, np.zeros(3))
        assert lam == 0.0

    def test_pendulum_component_form(self):
        """m eta1' = alpha sin(theta1) cos(theta2), m eta2' = alpha sin(theta2) when eta3 = 0"""
        m, alpha = 2.0, 1.5
        system = PendulumSystem(PendulumParams.with_alpha(alpha, m=m, M_reg=0.5))
        rng = np.random.default_rng(4)
        for _ in range(20):
            theta1, theta2, theta3 = rng.uniform(-1.2, 1.2, 3)
            eta = np.array([*rng.normal(size=2), 0.0])
            eta_dot, lam = continuous_rhs(system, ContinuousState(from_tait_bryan(theta1, theta2, theta3), eta))
            expected = [alpha * np.sin(theta1) * np.cos(theta2) / m, alpha * np.sin(theta2) / m, 0.0]
            np.testing.assert_allclose(eta_dot, expected, atol=1e-14)
            assert abs(lam) <= 1e-14

    def test_kepler_multiplier_vanishes(self):
        system = KeplerSystem(KeplerParams())
        g = from_tait_bryan(0.940125174120388, -0.693184358892293, 3.007331043590061)
        _, lam = continuous_rhs(system, ContinuousState(g, np.array([1.534184084268850, 0.0, 0.0])))
        assert abs(lam) <= 1e-15


class TestReferenceSolve:
    """Tests for reference_solve()"""

    def test_equilibrium_constant(self, pendulum):
        states = reference_solve(pendulum, IDENTITY, np.zeros(3), 1.0, h_ref=0.01)
        for state in states:
            np.testing.assert_array_equal(state.g, IDENTITY)
            np.testing.assert_array_equal(state.eta, np.zeros(3))

    def test_uniform_rotation_without_field(self):
        system = PendulumSystem(PendulumParams.with_alpha(0.0))
        final = reference_at(system, PENDULUM_G0, PENDULUM_ETA0, 2.0, h_ref=0.01)
        expected = PENDULUM_G0 @ tau(RetractionKind.EXPONENTIAL, 2.0 * PENDULUM_ETA0)
        np.testing.assert_allclose(final.g, expected, atol=1e-12)
        np.testing.assert_allclose(final.eta, PENDULUM_ETA0, atol=1e-15)

    def test_grid_ends_at_t_end(self, pendulum):
        states = reference_solve(pendulum, PENDULUM_G0, PENDULUM_ETA0, 0.35, h_ref=0.1, verify=False)
        assert len(states) == 5
        assert states[-1].t == pytest.approx(0.35, abs=1e-15)

    def test_zero_horizon(self, pendulum):
        states = reference_solve(pendulum, PENDULUM_G0, PENDULUM_ETA0, 0.0)
        assert len(states) == 1
        assert states[0].t == 0.0

    def test_conserves_energy_and_constraint(self, pendulum):
        states = reference_solve(pendulum, PENDULUM_G0, PENDULUM_ETA0, 10.0, h_ref=1e-3, verify=False)
        energies = np.array([pendulum.energy(st.g, st.eta) for st in states])
        assert np.max(np.abs(energies - energies[0])) <= 1e-10
        assert max(abs(phi(st.eta)) for st in states) <= 1e-12
        assert max(abs(st.lam) for st in states) <= 1e-14

    def test_fourth_order(self, pendulum):
        exact = reference_at(pendulum, PENDULUM_G0, PENDULUM_ETA0, 1.0, h_ref=1e-3, verify=False)
        hs = np.array([0.1, 0.05, 0.025])
        errors = [
            np.linalg.norm(reference_at(pendulum, PENDULUM_G0, PENDULUM_ETA0, 1.0, h_ref=h, verify=False).g - exact.g)
            for h in hs
        ]
        slope = np.polyfit(np.log(hs), np.log(errors), 1)[0]
        assert abs(slope - 4.0) <= 0.3

    def test_unreachable_tolerance(self, pendulum):
        with pytest.raises(ToleranceNotReached) as excinfo:
            reference_solve(pendulum, PENDULUM_G0, PENDULUM_ETA0, 0.1, h_ref=0.05, tol=1e-30, max_refinements=0)
        assert excinfo.value.estimate > 0


class TestFdCheck:
    """Tests for fd_check()"""

    def test_linear_functional(self):
        c = np.array([0.5, -2.0, 3.0])
        assert fd_check(lambda v: float(c @ v), lambda v: c) <= 1e-9

    def test_kinetic_energy(self, pendulum):
        assert fd_check(pendulum.kinetic, pendulum.momentum) <= 1e-8

    def test_pendulum_potential_on_group(self, pendulum):
        assert fd_check(pendulum.potential, pendulum.force, domain="group") <= 1e-6

    def test_detects_wrong_gradient(self, pendulum):
        assert fd_check(pendulum.potential, lambda g: -pendulum.force(g), domain="group") > 1e-3

    def test_unknown_domain(self):
        with pytest.raises(ValueError, match="Unknown domain"):
            fd_check(lambda v: 0.0, lambda v: np.zeros(3), domain="manifold")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
