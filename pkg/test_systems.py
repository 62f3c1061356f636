"""
Unit tests for the regularized Lagrangians
"""

import numpy as np
import pytest

from exceptions import NearSingularPotential
from oracle import fd_check
from retraction import RetractionKind, tau
from so3_core import IDENTITY, from_tait_bryan, rot_y
from sphere import X0
from systems import (
    FreeRigidBody, KeplerParams, KeplerSystem, LatitudeConstraint, PendulumParams, PendulumSystem,
    build_system, kepler_ell, kepler_force, pendulum_ell, pendulum_force, pendulum_momentum,
    pendulum_momentum_inv, spatial_momentum,
)

EXP = RetractionKind.EXPONENTIAL


def group_gradient(f, g, eps=1e-6):
    """Central differences of f along g tau(e zeta) for the basis directions"""
    return np.array([(f(g @ tau(EXP, eps * e)) - f(g @ tau(EXP, -eps * e))) / (2 * eps) for e in np.eye(3)])


def group_derivative(f, g, omega, eps=1e-6):
    return (f(g @ tau(EXP, eps * omega)) - f(g @ tau(EXP, -eps * omega))) / (2 * eps)


@pytest.fixture
def rng():
    return np.random.default_rng(21)


@pytest.fixture
def pendulum():
    return PendulumSystem(PendulumParams.with_alpha(1.0))


@pytest.fixture
def kepler():
    return KeplerSystem(KeplerParams())


class TestPendulum:
    """Tests for the spherical pendulum Lagrangian"""

    def test_ell_example(self):
        params = PendulumParams.with_alpha(1.0)
        assert pendulum_ell(params, IDENTITY, np.array([1 / 3, 0.0, 0.0])) == pytest.approx(-17 / 18, abs=1e-14)

    def test_ell_at_rest(self):
        params = PendulumParams.with_alpha(2.5)
        assert pendulum_ell(params, IDENTITY, np.zeros(3)) == pytest.approx(-2.5)

    def test_force_vanishes_at_pole(self):
        np.testing.assert_array_equal(pendulum_force(PendulumParams.with_alpha(1.0), IDENTITY), np.zeros(3))

    def test_force_finite_difference_tilted(self, pendulum):
        g = rot_y(np.pi / 3)
        numeric = group_gradient(lambda k: pendulum.ell(k, np.zeros(3)), g)
        np.testing.assert_allclose(pendulum.force(g), numeric, atol=1e-6)

    def test_force_fd_check_random(self, pendulum):
        assert fd_check(pendulum.potential, pendulum.force, domain="group") <= 1e-8

    def test_force_jacobian(self, pendulum, rng):
        for _ in range(20):
            g, omega = tau(EXP, rng.uniform(-1.5, 1.5, 3)), rng.normal(size=3)
            numeric = group_derivative(pendulum.force, g, omega)
            np.testing.assert_allclose(pendulum.force_jacobian(g) @ omega, numeric, atol=1e-8)

    def test_momentum_example(self):
        params = PendulumParams(m=1.0, M_reg=2.0)
        np.testing.assert_array_equal(pendulum_momentum(params, np.ones(3)), [1.0, 1.0, 2.0])

    def test_momentum_round_trip(self, rng):
        params = PendulumParams(m=0.7, M_reg=-3.0)
        eta = rng.normal(size=3)
        np.testing.assert_allclose(pendulum_momentum_inv(params, pendulum_momentum(params, eta)), eta, atol=1e-15)

    def test_momentum_of_m_element_in_m_dual(self):
        p = pendulum_momentum(PendulumParams(m=2.0, M_reg=5.0), np.array([0.3, -0.4, 0.0]))
        assert p[2] == 0.0

    def test_mass_matrix(self):
        np.testing.assert_array_equal(PendulumSystem(PendulumParams(m=2.0, M_reg=3.0)).mass_matrix, np.diag([2.0, 2.0, 3.0]))

    def test_restriction_to_distribution(self, rng):
        """M_reg drops out of ell when eta . x0 = 0"""
        for _ in range(500):
            g = tau(EXP, rng.uniform(-2, 2, 3))
            eta = np.array([*rng.normal(size=2), 0.0])
            reg1 = PendulumSystem(PendulumParams(M_reg=1.0)).ell(g, eta)
            reg7 = PendulumSystem(PendulumParams(M_reg=7.0)).ell(g, eta)
            assert reg1 == reg7
            unregularized = 0.5 * np.linalg.norm(np.cross(eta, X0)) ** 2 + float(np.array([0.0, 0.0, -1.0]) @ g @ X0)
            assert abs(reg1 - unregularized) <= 1e-14

    def test_energy_flips_potential(self, pendulum):
        g, eta = rot_y(0.4), np.array([0.2, -0.1, 0.0])
        assert pendulum.energy(g, eta) == pytest.approx(pendulum.kinetic(eta) - pendulum.potential(g))
        assert pendulum.ell(g, eta) == pytest.approx(pendulum.kinetic(eta) + pendulum.potential(g))

    @pytest.mark.parametrize("kwargs", [{"m": 0.0}, {"m": -1.0}, {"M_reg": 0.0}])
    def test_invalid_params(self, kwargs):
        with pytest.raises(ValueError):
            PendulumParams(**kwargs)


class TestKepler:
    """Tests for the spherical Kepler Lagrangian"""

    def test_default_attractor_is_unit(self):
        assert abs(np.linalg.norm(KeplerParams().X) - 1.0) <= 1e-15

    def test_orthogonal_attractor(self):
        params = KeplerParams(rho=2.0, X=np.array([1.0, 0.0, 0.0]))
        assert kepler_ell(params, IDENTITY, np.zeros(3)) == 0.0
        force = kepler_force(params, IDENTITY)
        np.testing.assert_allclose(force, [0.0, 2.0, 0.0], atol=1e-15)
        assert np.linalg.norm(force) == pytest.approx(2.0 * np.linalg.norm(np.cross(X0, IDENTITY.T @ params.X)))

    def test_force_finite_difference(self, kepler, rng):
        checked = 0
        while checked < 20:
            g = tau(EXP, rng.uniform(-2, 2, 3))
            if abs(kepler.X @ g @ X0) > 0.8:
                continue
            numeric = group_gradient(kepler.potential, g)
            np.testing.assert_allclose(kepler.force(g), numeric, atol=1e-6)
            checked += 1

    def test_force_jacobian(self, kepler, rng):
        checked = 0
        while checked < 20:
            g = tau(EXP, rng.uniform(-2, 2, 3))
            if abs(kepler.X @ g @ X0) > 0.8:
                continue
            omega = rng.normal(size=3)
            numeric = group_derivative(kepler.force, g, omega)
            np.testing.assert_allclose(kepler.force_jacobian(g) @ omega, numeric, atol=1e-6)
            checked += 1

    def test_singular_at_attractor(self):
        system = KeplerSystem(KeplerParams(X=X0.copy()))
        with pytest.raises(NearSingularPotential):
            system.potential(IDENTITY)
        with pytest.raises(NearSingularPotential):
            system.force(rot_y(np.pi))

    def test_energy_consistent_with_ell(self, kepler):
        g, eta = from_tait_bryan(0.3, 0.2, 0.1), np.array([1.5, 0.0, 0.0])
        assert kepler.energy(g, eta) + kepler.ell(g, eta) == pytest.approx(2 * kepler.kinetic(eta))

    def test_rejects_non_unit_attractor(self):
        with pytest.raises(ValueError, match="unit vector"):
            KeplerParams(X=np.array([0.437, 0.0, 0.899]))


class TestLatitudeConstraint:
    """Tests for the fixed-latitude holonomic constraint"""

    def test_value_on_circle(self):
        assert abs(LatitudeConstraint(np.pi / 3).value(rot_y(np.pi / 3))) <= 1e-15

    def test_gradient_and_jacobian(self, rng):
        constraint = LatitudeConstraint()
        for _ in range(10):
            g, omega = tau(EXP, rng.uniform(-1.5, 1.5, 3)), rng.normal(size=3)
            np.testing.assert_allclose(constraint.gradient(g), group_gradient(constraint.value, g), atol=1e-8)
            np.testing.assert_allclose(constraint.jacobian(g) @ omega,
                                       group_derivative(constraint.gradient, g, omega), atol=1e-8)


class TestBuildSystem:
    """Tests for build_system()"""

    def test_pendulum_alpha(self):
        system = build_system("pendulum", {"alpha": 2.0, "m": 3.0})
        assert isinstance(system, PendulumSystem)
        np.testing.assert_array_equal(system.gamma, [0.0, 0.0, -2.0])
        assert system.m == 3.0

    def test_pendulum_gamma(self):
        system = build_system("pendulum", {"gamma": np.array([1.0, 0.0, 0.0])})
        np.testing.assert_array_equal(system.gamma, [1.0, 0.0, 0.0])

    def test_kepler_normalizes_attractor(self):
        system = build_system("kepler", {"X": np.array([0.0, 3.0, 4.0]), "rho": 0.5})
        np.testing.assert_allclose(system.X, [0.0, 0.6, 0.8], atol=1e-15)
        assert system.rho == 0.5

    def test_free(self):
        system = build_system("free")
        assert isinstance(system, FreeRigidBody)
        np.testing.assert_array_equal(system.force(rot_y(1.0)), np.zeros(3))

    def test_unknown_system(self):
        with pytest.raises(ValueError, match="Unknown system"):
            build_system("double-pendulum")

    def test_unknown_parameter(self):
        with pytest.raises(ValueError, match="Unknown parameters"):
            build_system("kepler", {"alpha": 1.0})


def test_spatial_momentum():
    g = rot_y(np.pi / 2)
    np.testing.assert_allclose(spatial_momentum(g, np.array([1.0, 0.0, 0.0])), [0.0, 0.0, -1.0], atol=1e-15)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
