import math
from types import SimpleNamespace

import numpy as np
import pytest

from nublado_lyapunov.exceptions import NoConvergence, ThresholdViolation
from nublado_lyapunov.jets import UNRESOLVED
from nublado_lyapunov.oscillator_analysis import (
    Certificate,
    brute_force_equilibria,
    equilibrium_certificate,
    equilibrium_jacobian,
    equilibrium_residual,
    find_equilibria,
    order_statistics,
)

from .support.constants import TWO_WELL_ROOT
from .support.specs import cos_rotator, quadratic_oscillator, two_well_oscillator

TWO_WELL_ROOTS = [(-TWO_WELL_ROOT, -TWO_WELL_ROOT), (0.0, 0.0), (TWO_WELL_ROOT, TWO_WELL_ROOT)]


def sorted_roots(report):
    return sorted(tuple(float(v) for v in root) for root in report.roots)


class TestResidual:
    def test_residual(self):
        np.testing.assert_allclose(equilibrium_residual(quadratic_oscillator(2), [1.0, 0.0]), [2.0, -1.0])

    def test_quadratic_jacobian(self):
        np.testing.assert_allclose(
            equilibrium_jacobian(quadratic_oscillator(3), [0.3, -1.0, 2.0]),
            [[2.0, -1.0, 0.0], [-1.0, 3.0, -1.0], [0.0, -1.0, 2.0]],
        )

    def test_jacobian_matches_difference_quotient(self):
        spec = two_well_oscillator()
        q = np.array([0.3, -0.2])
        h = 1e-6
        columns = []
        for j in range(2):
            step = np.zeros(2)
            step[j] = h
            columns.append((equilibrium_residual(spec, q + step) - equilibrium_residual(spec, q - step)) / (2.0 * h))
        np.testing.assert_allclose(equilibrium_jacobian(spec, q), np.array(columns).T, atol=1e-6)

    def test_requires_oscillator(self):
        with pytest.raises(ValueError):
            equilibrium_residual(cos_rotator(2), [0.0, 0.0])


class TestCertificate:
    def test_two_well(self):
        """
        V = x^2/2 is convex everywhere, so M = |V'(0)| + 1 = 1, and
        U' = 4x^3 - 2x reaches 2M = 2 at x = 1.
        """
        certificate = equilibrium_certificate(two_well_oscillator())
        assert certificate.R == 0.0
        assert certificate.M == pytest.approx(1.0)
        assert certificate.a == pytest.approx(1.0, abs=1e-9)
        assert certificate.b == pytest.approx(1.0, abs=1e-9)

    def test_quadratic(self):
        certificate = equilibrium_certificate(quadratic_oscillator(2))
        assert certificate.a == pytest.approx(2.0, abs=1e-9)
        assert certificate.b == pytest.approx(2.0, abs=1e-9)

    def test_contains(self):
        certificate = Certificate(R=0.0, M=1.0, a=1.0, b=2.0)
        points = np.array([[0.0, -1.9, 1.0], [0.5, 0.0, 0.0]])
        np.testing.assert_array_equal(certificate.contains(points), [True, True, False])


class TestFindEquilibria:
    def test_two_well(self, rng):
        report = find_equilibria(two_well_oscillator(), budget=64, rng=rng)
        assert report.passed
        assert len(report.roots) == 3
        np.testing.assert_allclose(sorted_roots(report), TWO_WELL_ROOTS, atol=1e-9)
        assert max(report.residuals) <= 1e-10
        assert report.columns == ("root", "q_1", "q_2", "residual")

    def test_strictly_convex_has_one_root(self, rng):
        report = find_equilibria(quadratic_oscillator(3), budget=16, rng=rng)
        assert report.classification == "StrictlyConvex"
        assert report.passed
        assert len(report.roots) == 1
        np.testing.assert_allclose(report.roots[0], 0.0, atol=1e-9)

    def test_brute_force_agrees(self):
        spec = two_well_oscillator()
        scan = brute_force_equilibria(spec)
        assert scan.method == "grid scan"
        assert scan.passed
        np.testing.assert_allclose(sorted_roots(scan), TWO_WELL_ROOTS, atol=1e-9)

    def test_brute_force_two_particles_only(self):
        with pytest.raises(ValueError):
            brute_force_equilibria(quadratic_oscillator(3))

    def test_no_convergence(self, rng, mocker):
        mocker.patch(
            "nublado_lyapunov.oscillator_analysis._polish",
            return_value=(np.zeros(2), 1.0, False),
        )
        with pytest.raises(NoConvergence):
            find_equilibria(quadratic_oscillator(2), budget=4, rng=rng)


class TestOrderStatistics:
    def test_two_well(self, rng):
        spec = two_well_oscillator()
        report = order_statistics(spec, 60, 8, rng=rng, roots=[np.array(root) for root in TWO_WELL_ROOTS])
        assert report.passed, report.summary()
        assert len(report.orders) == 60
        assert set(report.kinds) <= {"generic", "resting", "near-equilibrium"}
        generic = [o for k, o in zip(report.kinds, report.orders) if k == "generic"]
        assert all(order == 1 for order in generic)
        resting = [o for k, o in zip(report.kinds, report.orders) if k == "resting" and o != UNRESOLVED]
        assert all(order >= 3 and order % 2 == 1 for order in resting)
        assert len(list(report.rows())) == 60

    def test_in_box_requires_rest(self, rng):
        spec = quadratic_oscillator(2)
        report = order_statistics(spec, 40, 5, rng=rng, roots=[np.zeros(2)])
        for kind, flag in zip(report.kinds, report.in_box):
            if kind == "generic":
                assert not flag

    def test_threshold_violation(self, rng, mocker):
        spec = quadratic_oscillator(2)
        budget = 20
        mocker.patch(
            "nublado_lyapunov.oscillator_analysis.order_of",
            return_value=SimpleNamespace(orders=np.full(budget, UNRESOLVED)),
        )
        with pytest.raises(ThresholdViolation) as error:
            order_statistics(spec, budget, 11, rng=rng, roots=[np.zeros(2)])
        assert error.value.order == UNRESOLVED
        assert error.value.state.batch_shape == ()

    def test_cascade_holds(self, rng):
        """
        With p = 0, ord(H) = 2 ord(p_1) + 1.
        """
        spec = quadratic_oscillator(2)
        report = order_statistics(spec, 40, 9, rng=rng, roots=[np.zeros(2)])
        assert report.cascade_mismatches == 0
        assert math.isfinite(report.max_order)
