"""
Unit tests for the Lobatto tableaux and their validation
"""

import numpy as np
import pytest

from exceptions import UnsupportedStageCount
from tableau import ButcherTableau, lobatto, validate


class TestLobatto:
    """Tests for the hard-coded coefficients"""

    def test_two_stage(self):
        t = lobatto(2)
        np.testing.assert_array_equal(t.a, [[0.0, 0.0], [0.5, 0.5]])
        np.testing.assert_array_equal(t.b, [0.5, 0.5])
        np.testing.assert_array_equal(t.c, [0.0, 1.0])

    def test_three_stage(self):
        t = lobatto(3)
        np.testing.assert_allclose(t.b, [1 / 6, 2 / 3, 1 / 6], atol=1e-16)
        np.testing.assert_allclose(t.c, [0.0, 0.5, 1.0], atol=1e-16)

    def test_four_stage(self):
        t = lobatto(4)
        root5 = np.sqrt(5.0)
        np.testing.assert_allclose(t.c, [0.0, (5 - root5) / 10, (5 + root5) / 10, 1.0], atol=1e-16)
        np.testing.assert_allclose(t.b, [1 / 12, 5 / 12, 5 / 12, 1 / 12], atol=1e-16)

    @pytest.mark.parametrize("s", [2, 3, 4])
    def test_structure(self, s):
        t = lobatto(s)
        assert t.s == s
        assert t.order == 2 * s - 2
        assert t.stiffly_accurate
        np.testing.assert_array_equal(t.a[0], np.zeros(s))

    @pytest.mark.parametrize("s", [1, 5, 0])
    def test_unsupported(self, s):
        with pytest.raises(UnsupportedStageCount):
            lobatto(s)

    @pytest.mark.parametrize("s,expected", [
        (2, [1.0, -1.0]),
        (3, [1.0, -0.5, 1.0]),
        (4, [1.0, -1 / np.sqrt(5.0), 1 / np.sqrt(5.0), -1.0]),
    ])
    def test_multiplier_mode_is_shifted_legendre(self, s, expected):
        np.testing.assert_allclose(lobatto(s).multiplier_mode, expected, atol=1e-14)

    @pytest.mark.parametrize("s", [2, 3, 4])
    def test_multiplier_mode_invisible_to_inner_rows_and_weights(self, s):
        t = lobatto(s)
        np.testing.assert_allclose(t.a @ t.multiplier_mode, np.zeros(s), atol=1e-14)
        assert abs(t.b @ t.multiplier_mode) <= 1e-14
        assert t.b @ t.multiplier_mode ** 2 > 0.1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="Inconsistent tableau shapes"):
            ButcherTableau(a=np.zeros((2, 2)), b=np.ones(3) / 3, c=np.zeros(3))


class TestValidate:
    """Tests for validate()"""

    @pytest.mark.parametrize("s", [2, 3, 4])
    def test_lobatto_passes(self, s):
        assert validate(lobatto(s)) == []

    def test_weights_not_last_row(self):
        t = lobatto(2)
        broken = ButcherTableau(a=t.a, b=np.array([1.0, 0.0]), c=t.c)
        violations = validate(broken)
        assert "sum_b" not in violations
        assert "stiffly_accurate" in violations
        assert not broken.stiffly_accurate

    def test_perturbed_row_sum(self):
        t = lobatto(2)
        a = t.a.copy()
        a[1, 0] += 1e-6
        violations = validate(ButcherTableau(a=a, b=t.b, c=t.c))
        assert "row_sum[2]" in violations
        assert "row_sum[1]" not in violations

    def test_nonzero_first_row(self):
        t = lobatto(3)
        a = t.a.copy()
        a[0] = [0.1, -0.1, 0.0]
        violations = validate(ButcherTableau(a=a, b=t.b, c=t.c))
        assert "first_row_zero" in violations
        assert "row_sum[1]" not in violations

    def test_quadrature_order(self):
        """Trapezoidal weights on three nodes only integrate linears exactly"""
        t = lobatto(3)
        weights = np.array([0.25, 0.5, 0.25])
        violations = validate(ButcherTableau(a=t.a, b=weights, c=t.c))
        assert "quadrature(1)" not in violations
        assert "quadrature(2)" not in violations
        assert "quadrature(3)" in violations

    def test_loose_tolerance(self):
        t = lobatto(2)
        a = t.a.copy()
        a[1, 0] += 1e-6
        broken = ButcherTableau(a=a, b=t.b, c=t.c)
        assert validate(broken, tol=1e-3) == []


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
