import dataclasses
import math

import numpy as np
import pytest

from nublado_lyapunov.chain import State, energy
from nublado_lyapunov.exceptions import CalibrationFailed
from nublado_lyapunov.jets import lie_derivatives
from nublado_lyapunov.lyapunov_rotor import (
    DUAL_PATH_TOL,
    CalibConfig,
    LyapCoeffs,
    calibrate_coeffs,
    enforce_ladder,
    eval_W,
    generator_hessian_p,
    lie_W,
    lie_W_expanded,
    potential_sup,
    proof_terms,
    verify_theorem,
)
from nublado_lyapunov.sampling import states_at_energy

from .support.constants import ROTATOR_2_COEFFS, ROTATOR_3_COEFFS
from .support.specs import cos_rotator, quadratic_oscillator

TREND = "nublado_lyapunov.lyapunov_rotor.nonincreasing_trend"


def sample_states(spec, rng, size=40, h_lo=10.0, h_hi=100.0):
    return states_at_energy(spec, np.exp(rng.uniform(np.log(h_lo), np.log(h_hi), size)), rng)


class TestLyapCoeffs:
    def test_ladder(self):
        coeffs = LyapCoeffs.ladder(2, seed=10.0, kappa=8.0)
        assert coeffs.a == (512000.0, 800.0, 10.0)
        assert coeffs.violations() == []

    def test_enforce_ladder_never_lowers(self):
        assert enforce_ladder([1e13, 1e6, 1.0], kappa=8.0) == (1e13, 1e6, 1.0)

    def test_enforce_ladder_raises_top_coefficient(self):
        assert enforce_ladder([1e9, 1e6, 1.0], kappa=8.0) == (8e12, 1e6, 1.0)

    def test_exponents(self):
        coeffs = LyapCoeffs(a=ROTATOR_3_COEFFS)
        assert coeffs.N == 3
        assert coeffs.gamma0 == 5
        assert coeffs.alphas == (3, 2, 1, 0)
        assert coeffs.alpha(5) is None

    def test_gamma(self):
        coeffs = LyapCoeffs(a=ROTATOR_2_COEFFS)
        assert coeffs.Gamma(1) == 2.0 * 16.0 / 8.0
        assert coeffs.Gamma(2) == 0.0

    def test_violations(self):
        assert LyapCoeffs(a=(0.5, 2.0, 1.0)).violations() == ["a_0 = 0.5 < 1"]
        assert LyapCoeffs(a=(1.0, 1.0, 1.0)).violations() == ["a_1 < 2 a_2"]

    @pytest.mark.parametrize("a", [(1.0, 1.0), (1.0, -1.0, 1.0), (1.0, math.inf, 1.0)])
    def test_invalid(self, a):
        with pytest.raises(ValueError):
            LyapCoeffs(a=a)

    def test_dict_round_trip(self):
        coeffs = LyapCoeffs(a=ROTATOR_2_COEFFS, h0=2.0, C1=3.5)
        assert LyapCoeffs.from_dict(coeffs.to_dict()) == coeffs

    def test_dict_rejects_wrong_N(self):
        with pytest.raises(ValueError):
            LyapCoeffs.from_dict({"N": 3, "a": list(ROTATOR_2_COEFFS)})


class TestLyapunovFunction:
    def test_two_particle_closed_form(self):
        spec = cos_rotator(2)
        coeffs = LyapCoeffs(a=ROTATOR_2_COEFFS)
        s = State.of(spec, [1.0, 0.5], [0.3, 0.1])
        H = 0.625 + 2.0 + math.cos(0.2)
        xi, lxi = math.sin(0.2), 0.5 * math.cos(0.2)
        expected = 1.0 * H**3 - 16.0 * H * 1.0 * xi - 8.0 * xi * lxi
        assert eval_W(spec, coeffs, s) == pytest.approx(expected, rel=1e-12)

    def test_jet_value_matches_closed_form(self, rng):
        spec = cos_rotator(3)
        coeffs = LyapCoeffs(a=ROTATOR_3_COEFFS)
        s = sample_states(spec, rng)
        np.testing.assert_allclose(lie_derivatives(spec, s, "W", 0, coeffs=coeffs)[0], eval_W(spec, coeffs, s), rtol=1e-12)

    @pytest.mark.parametrize("N", [2, 3])
    def test_dual_path(self, N, rng):
        """
        The jet engine and the hand-expanded formula agree on L_F W.
        """
        spec = cos_rotator(N)
        coeffs = LyapCoeffs.ladder(N)
        s = sample_states(spec, rng)
        value, scale = lie_W_expanded(spec, coeffs, s)
        assert np.all(np.abs(lie_W(spec, coeffs, s) - value) <= DUAL_PATH_TOL * scale)

    def test_dual_path_two_end_damping(self, rng):
        spec = cos_rotator(3, damping_mask=(True, False, True))
        coeffs = LyapCoeffs.ladder(3)
        s = sample_states(spec, rng)
        value, scale = lie_W_expanded(spec, coeffs, s)
        assert np.all(np.abs(lie_W(spec, coeffs, s) - value) <= DUAL_PATH_TOL * scale)

    def test_requires_rotator(self):
        spec = quadratic_oscillator(2)
        with pytest.raises(ValueError):
            eval_W(spec, LyapCoeffs(a=ROTATOR_2_COEFFS), State.of(spec, [0.0, 0.0], [0.0, 0.0]))

    def test_requires_matching_N(self):
        spec = cos_rotator(3)
        with pytest.raises(ValueError):
            eval_W(spec, LyapCoeffs(a=ROTATOR_2_COEFFS), State.of(spec, [0.0] * 3, [0.0] * 3))

    def test_generator_hessian(self):
        spec = cos_rotator(2)
        s = State.of(spec, [1.0, -2.0], [0.4, 1.1])
        assert generator_hessian_p(spec, s, "H", 1) == pytest.approx(1.0)
        assert generator_hessian_p(spec, s, "p1^2", 1) == pytest.approx(2.0)
        assert generator_hessian_p(spec, s, "p1^2", 2) == pytest.approx(0.0)

    def test_potential_sup(self):
        assert potential_sup(cos_rotator(3)) == pytest.approx(6.0)


class TestProofTerms:
    @pytest.mark.parametrize("N", [2, 3])
    def test_xidot_parts_cancel(self, N, rng):
        spec = cos_rotator(N)
        coeffs = LyapCoeffs.ladder(N)
        terms = proof_terms(spec, coeffs, sample_states(spec, rng))
        left, right = terms.I_xidot_left, terms.I_xidot_right
        assert terms.I_xi.shape == left.shape == (N - 1, 40)
        assert terms.I_p.shape == (N - 1, 40)
        np.testing.assert_allclose(left, right, rtol=1e-12)

    def test_xi_term_nonnegative(self, rng):
        """
        For N = 2, I_xi = xi^2 (H (a_1/4 - a_2^2) - C/H), positive for the ladder.
        """
        spec = cos_rotator(2)
        terms = proof_terms(spec, LyapCoeffs.ladder(2), sample_states(spec, rng))
        assert np.all(terms.I_xi >= 0.0)


class TestCalibration:
    def test_passes_first_round(self, rng, mocker):
        trend = mocker.patch(TREND, return_value=(True, None))
        spec = cos_rotator(2)
        coeffs, report = calibrate_coeffs(spec, CalibConfig(samples=60, h_hi=100.0), rng=rng)
        trend.assert_called_once()
        assert report.passed
        assert len(report.rounds) == 1
        assert coeffs.a == LyapCoeffs.ladder(2).a
        assert coeffs.C1 > report.C1_sampled
        assert coeffs.h0 >= 1.0
        assert len(list(report.rows())) == 2

    def test_grows_a_coefficient(self, rng, mocker):
        mocker.patch(TREND, side_effect=[(False, None), (True, None)])
        spec = cos_rotator(2)
        start = LyapCoeffs.ladder(2).a
        coeffs, report = calibrate_coeffs(spec, CalibConfig(samples=60, h_hi=100.0), rng=rng)
        assert len(report.rounds) == 2
        assert report.rounds[0].grown in range(3)
        assert all(new >= old for new, old in zip(coeffs.a, start))
        assert any(new > old for new, old in zip(coeffs.a, start))

    def test_failure_after_max_rounds(self, rng, mocker):
        mocker.patch(TREND, return_value=(False, None))
        with pytest.raises(CalibrationFailed) as error:
            calibrate_coeffs(cos_rotator(2), CalibConfig(samples=60, h_hi=100.0, max_rounds=0), rng=rng)
        assert not error.value.report.passed
        assert len(error.value.report.rounds) == 1
        assert error.value.worst_state.batch_shape == ()

    def test_fixed_coefficients(self, rng, mocker):
        mocker.patch(TREND, return_value=(True, None))
        config = CalibConfig(samples=60, h_hi=100.0, fixed_coeffs=(1e7, 1e3, 10.0))
        coeffs, _ = calibrate_coeffs(cos_rotator(2), config, rng=rng)
        assert coeffs.a == (1e7, 1e3, 10.0)

    def test_fixed_coefficients_length(self, rng):
        with pytest.raises(ValueError):
            calibrate_coeffs(cos_rotator(3), CalibConfig(fixed_coeffs=ROTATOR_2_COEFFS), rng=rng)

    def test_requires_rotator(self, rng):
        with pytest.raises(ValueError):
            calibrate_coeffs(quadratic_oscillator(2), rng=rng)

    @pytest.mark.slow
    @pytest.mark.parametrize("N", [2, 3])
    def test_calibrate_and_verify(self, N, rng):
        spec = cos_rotator(N)
        coeffs, report = calibrate_coeffs(spec, rng=rng)
        assert report.passed
        verification = verify_theorem(spec, coeffs, 10000, rng=rng)
        assert verification.passed, verification.summary()


class TestVerification:
    def test_report_checks(self, rng):
        spec = cos_rotator(2)
        coeffs = dataclasses.replace(LyapCoeffs.ladder(2), C1=1e12, h0=1.0)
        report = verify_theorem(spec, coeffs, 200, rng=rng, h_hi=1000.0)
        assert report.samples == 200
        assert report.check("I_xidot relative").passed
        assert report.check("min I_xi").passed
        assert report.check("dual-path discrepancy").passed
        assert report.check("max(L_F W + H)").passed
        assert report.columns == ("check", "value", "bound", "passed")
        assert report.summary().startswith("verify-lyapunov N=2 on 200 samples")

    def test_energies_in_range(self, rng):
        spec = cos_rotator(2)
        s = sample_states(spec, rng, h_lo=10.0, h_hi=20.0)
        assert np.all((energy(spec, s) >= 10.0 - 1e-9) & (energy(spec, s) <= 20.0 + 1e-9))
