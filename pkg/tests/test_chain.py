import math

import numpy as np
import pytest

from nublado_lyapunov.chain import (
    ChainKind,
    ChainSpec,
    State,
    dissipation,
    energy,
    forces,
    lie_energy,
    lie_xi,
    potential_energy,
    vector_field,
    xi,
)
from nublado_lyapunov.exceptions import ImproperlyConfigured
from nublado_lyapunov.potentials import Potential

from .support.constants import DISSIPATION_TOL, TWO_PI
from .support.specs import cos_potential, cos_rotator, quadratic, quadratic_oscillator


def random_rotor_states(spec, rng, size):
    p = rng.normal(0.0, 2.0, (spec.N, size))
    q = rng.uniform(0.0, TWO_PI, (spec.N, size))
    return State.of(spec, p, q)


class TestChainSpec:
    def test_rotator_defaults(self):
        spec = cos_rotator(3)
        assert spec.kind is ChainKind.ROTATOR
        assert spec.N == 3
        assert spec.damping_mask == (True, False, False)
        assert spec.temperatures == (0.0, 0.0, 0.0)
        assert spec.damped_indices == (0,)

    def test_rotator_shifts_potentials(self):
        spec = ChainSpec.rotator([Potential.trig(0.0, cos=(1.0,))])
        assert spec.interaction[0].shift == pytest.approx(2.0, abs=1e-9)

    def test_rotator_rejects_degenerate_potential(self):
        with pytest.raises(ImproperlyConfigured) as error:
            ChainSpec.rotator([cos_potential(), Potential.trig(0.0, cos=(1.0, 0.25))])
        assert error.value.field == "chain.interaction[1]"

    def test_too_few_particles(self):
        with pytest.raises(ValueError):
            ChainSpec(kind=ChainKind.ROTATOR, N=1, interaction=())

    def test_interaction_count(self):
        with pytest.raises(ValueError):
            ChainSpec(kind=ChainKind.ROTATOR, N=3, interaction=(cos_potential(),))

    def test_pinning_count(self):
        with pytest.raises(ValueError):
            ChainSpec.oscillator([quadratic()], [quadratic()])

    def test_domain_mismatch(self):
        with pytest.raises(ValueError):
            ChainSpec(kind=ChainKind.ROTATOR, N=2, interaction=(quadratic(),))

    def test_temperature_needs_damping(self):
        with pytest.raises(ValueError):
            cos_rotator(2, temperatures=(0.0, 1.0))

    def test_negative_temperature(self):
        with pytest.raises(ValueError):
            cos_rotator(2, temperatures=(-1.0, 0.0))

    def test_two_end_damping(self):
        spec = cos_rotator(3, damping_mask=(True, False, True), temperatures=(1.0, 0.0, 2.0))
        assert spec.damped_indices == (0, 2)
        np.testing.assert_array_equal(spec.temperature, [1.0, 0.0, 2.0])


class TestState:
    def test_rotator_coordinates_reduced(self):
        spec = cos_rotator(2)
        s = State.of(spec, [0.0, 0.0], [TWO_PI + 0.5, -0.5])
        np.testing.assert_allclose(s.q, [0.5, TWO_PI - 0.5])
        assert np.all(s.q < TWO_PI)

    def test_from_lists(self):
        spec = quadratic_oscillator(2)
        s = State.of(spec, [1.0, 0.5], [0.3, 0.1])
        assert s.p.dtype == np.float64
        np.testing.assert_array_equal(s.p, [1.0, 0.5])
        np.testing.assert_array_equal(s.q, [0.3, 0.1])

    def test_integer_lists_become_float(self):
        s = State.of(quadratic_oscillator(2), [1, 0], [0, 2])
        assert s.q.dtype == np.float64

    def test_longdouble_kept(self):
        p = np.array([1.0, 0.5], dtype=np.longdouble)
        s = State.of(quadratic_oscillator(2), p, p)
        assert s.p.dtype == np.longdouble

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            State.of(cos_rotator(2), [0.0, 0.0, 0.0], [0.0, 0.0, 0.0])

    def test_finite_checked(self):
        with pytest.raises(ValueError):
            State.of(quadratic_oscillator(2), [math.nan, 0.0], [0.0, 0.0])

    def test_take(self, rng):
        spec = cos_rotator(2)
        s = random_rotor_states(spec, rng, 5)
        assert s.batch_shape == (5,)
        single = s.take(3)
        assert single.batch_shape == ()
        np.testing.assert_array_equal(single.p, s.p[:, 3])

    def test_vector_round_trip(self):
        spec = quadratic_oscillator(2)
        s = State.of(spec, [1.0, 2.0], [3.0, 4.0])
        np.testing.assert_array_equal(s.to_vector(), [3.0, 4.0, 1.0, 2.0])
        np.testing.assert_array_equal(State.from_vector(spec, s.to_vector()).p, s.p)


class TestEnergy:
    def test_rotator_energy(self):
        spec = cos_rotator(2)
        s = State.of(spec, [1.0, 0.0], [0.0, 0.0])
        assert energy(spec, s) == pytest.approx(3.5)
        assert potential_energy(spec, s) == pytest.approx(3.0)

    def test_oscillator_forces(self):
        """
        U = V = x^2/2 at q = (1, 0): forces (-2, 1).
        """
        spec = quadratic_oscillator(2)
        np.testing.assert_allclose(forces(spec, np.array([1.0, 0.0])), [-2.0, 1.0])

    def test_forces_are_minus_gradient(self, rng):
        spec = cos_rotator(3)
        q = rng.uniform(0.0, TWO_PI, 3)
        h = 1e-6
        gradient = []
        for j in range(3):
            step = np.zeros(3)
            step[j] = h
            up = potential_energy(spec, State(p=np.zeros(3), q=q + step))
            down = potential_energy(spec, State(p=np.zeros(3), q=q - step))
            gradient.append((up - down) / (2.0 * h))
        np.testing.assert_allclose(forces(spec, q), -np.array(gradient), atol=1e-8)

    def test_vector_field(self):
        spec = quadratic_oscillator(2)
        F = vector_field(spec, State.of(spec, [1.0, 2.0], [1.0, 0.0]))
        np.testing.assert_allclose(F.dq, [1.0, 2.0])
        np.testing.assert_allclose(F.dp, [-1.0 - 2.0, 1.0])

    @pytest.mark.parametrize("N", [2, 3, 4])
    def test_dissipation_identity(self, N, rng):
        """
        L_F H computed from grad H . F equals minus the damped p_j^2.
        """
        spec = cos_rotator(N)
        s = random_rotor_states(spec, rng, 1000)
        np.testing.assert_allclose(lie_energy(spec, s), dissipation(spec, s), rtol=0.0, atol=DISSIPATION_TOL)
        np.testing.assert_allclose(dissipation(spec, s), -s.p[0] ** 2)

    def test_two_end_dissipation(self, rng):
        spec = cos_rotator(3, damping_mask=(True, False, True))
        s = random_rotor_states(spec, rng, 100)
        np.testing.assert_allclose(dissipation(spec, s), -(s.p[0] ** 2 + s.p[2] ** 2))
        np.testing.assert_allclose(lie_energy(spec, s), dissipation(spec, s), rtol=0.0, atol=DISSIPATION_TOL)


class TestXi:
    def test_xi_values(self):
        spec = cos_rotator(2)
        s = State.of(spec, [1.0, 0.5], [0.3, 0.1])
        assert xi(spec, s, 1) == pytest.approx(math.sin(0.2))
        assert lie_xi(spec, s, 1) == pytest.approx(0.5 * math.cos(0.2))
        assert xi(spec, s, 0) == 0.0
        assert lie_xi(spec, s, 0) == 0.0

    @pytest.mark.parametrize("j", [-1, 2, 3])
    def test_xi_index_range(self, j):
        spec = cos_rotator(2)
        s = State.of(spec, [0.0, 0.0], [0.0, 0.0])
        with pytest.raises(IndexError):
            xi(spec, s, j)
        with pytest.raises(IndexError):
            lie_xi(spec, s, j)

    def test_xi_needs_rotator(self):
        spec = quadratic_oscillator(2)
        with pytest.raises(ValueError):
            xi(spec, State.of(spec, [0.0, 0.0], [0.0, 0.0]), 1)
