import enum
import logging
from dataclasses import dataclass

import numpy as np

from nublado_lyapunov.potentials import (
    TWO_PI,
    Domain,
    validate_oscillator_potentials,
    validate_rotor_potential,
)
from nublado_lyapunov.exceptions import ImproperlyConfigured

logger = logging.getLogger(__name__)


class ChainKind(enum.Enum):
    ROTATOR = "Rotator"
    OSCILLATOR = "Oscillator"


@dataclass(frozen=True)
class ChainSpec:
    """
    A nearest-neighbour chain of N unit-mass particles.

    Args:
        kind: Rotator (coordinates on the torus) or Oscillator (on the line).
        N: Number of particles, at least 2.
        interaction: N-1 potentials V_1..V_{N-1} of q_j - q_{j+1}.
        pinning: N potentials U_1..U_N (empty for rotators).
        damping_mask: N booleans; defaults to damping on particle 1 only.
        temperatures: N non-negative bath temperatures, zero where undamped.
    """

    kind: ChainKind
    N: int
    interaction: tuple
    pinning: tuple = ()
    damping_mask: tuple | None = None
    temperatures: tuple | None = None

    def __post_init__(self):
        N = self.N
        if not isinstance(N, int) or N < 2:
            raise ValueError(f"A chain needs at least 2 particles, got N={N!r}.")
        interaction = tuple(self.interaction)
        pinning = tuple(self.pinning)
        if len(interaction) != N - 1:
            raise ValueError(f"Expected {N - 1} interaction potentials, got {len(interaction)}.")

        if self.kind is ChainKind.ROTATOR:
            if pinning:
                raise ValueError("Rotator chains carry no pinning potentials.")
            domain = Domain.TORUS
        else:
            if len(pinning) != N:
                raise ValueError(f"Expected {N} pinning potentials, got {len(pinning)}.")
            domain = Domain.LINE
        if any(pot.domain is not domain for pot in interaction + pinning):
            raise ValueError(f"{self.kind.value} potentials must live on the {domain.value.lower()}.")

        mask = self.damping_mask
        if mask is None:
            mask = (True,) + (False,) * (N - 1)
        mask = tuple(bool(m) for m in mask)
        if len(mask) != N:
            raise ValueError(f"damping_mask needs {N} entries, got {len(mask)}.")

        temperatures = self.temperatures
        if temperatures is None:
            temperatures = (0.0,) * N
        temperatures = tuple(float(t) for t in temperatures)
        if len(temperatures) != N:
            raise ValueError(f"temperatures needs {N} entries, got {len(temperatures)}.")
        for j, (t, damped) in enumerate(zip(temperatures, mask), start=1):
            if t < 0.0:
                raise ValueError(f"Temperature of particle {j} is negative.")
            if t > 0.0 and not damped:
                raise ValueError(f"Particle {j} has a temperature but no damping.")

        object.__setattr__(self, "interaction", interaction)
        object.__setattr__(self, "pinning", pinning)
        object.__setattr__(self, "damping_mask", mask)
        object.__setattr__(self, "temperatures", temperatures)

    @classmethod
    def rotator(cls, interaction, *, damping_mask=None, temperatures=None, grid_points=None):
        """
        Build a rotator chain, certifying and shifting each V_j so that V_j >= 1.

        Raises:
            ImproperlyConfigured: A potential fails the non-degeneracy check.
        """
        shifted = []
        for j, pot in enumerate(interaction, start=1):
            report = validate_rotor_potential(pot, grid_points=grid_points, subject=f"V_{j}")
            if not report.passed:
                raise ImproperlyConfigured(
                    f"(V')^2 + (V'')^2 vanishes near x = {report.offending_point!r}",
                    field=f"chain.interaction[{j - 1}]",
                )
            if report.shift:
                logger.info("Shifted V_%d by %r", j, report.shift)
            shifted.append(report.potential)
        return cls(
            kind=ChainKind.ROTATOR,
            N=len(shifted) + 1,
            interaction=tuple(shifted),
            damping_mask=damping_mask,
            temperatures=temperatures,
        )

    @classmethod
    def oscillator(cls, pinning, interaction, *, damping_mask=None, temperatures=None):
        return cls(
            kind=ChainKind.OSCILLATOR,
            N=len(pinning),
            interaction=tuple(interaction),
            pinning=tuple(pinning),
            damping_mask=damping_mask,
            temperatures=temperatures,
        )

    @property
    def is_rotator(self):
        return self.kind is ChainKind.ROTATOR

    @property
    def damping(self):
        """
        Damping coefficients (1.0 where damped) shaped for broadcasting over batches.
        """
        return np.array(self.damping_mask, dtype=float)

    @property
    def temperature(self):
        return np.array(self.temperatures, dtype=float)

    @property
    def damped_indices(self):
        return tuple(j for j, damped in enumerate(self.damping_mask) if damped)

    def validate(self):
        """
        Re-run the applicable potential certification.
        """
        if self.is_rotator:
            return [
                validate_rotor_potential(pot, subject=f"V_{j}")
                for j, pot in enumerate(self.interaction, start=1)
            ]
        return [validate_oscillator_potentials(self)]


def _expand(values, ndim):
    return np.reshape(values, values.shape + (1,) * ndim)


@dataclass(frozen=True, eq=False)
class State:
    """
    A phase point (p, q), or a batch of them along trailing axes.

    Both arrays have shape (N, *batch). Rotator coordinates are kept
    reduced to [0, 2*pi).
    """

    p: np.ndarray
    q: np.ndarray

    @classmethod
    def of(cls, spec, p, q):
        p = np.asarray(p)
        p = p.astype(np.result_type(p.dtype, float), copy=False)
        q = np.asarray(q)
        q = q.astype(np.result_type(q.dtype, float), copy=False)
        if p.shape != q.shape or p.shape[:1] != (spec.N,):
            raise ValueError(f"State arrays must have leading axis {spec.N}; got {p.shape} and {q.shape}.")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("State entries must be finite.")
        if spec.is_rotator:
            q = np.mod(q, TWO_PI)
            q = np.where(q >= TWO_PI, q - TWO_PI, q)
        return cls(p=p, q=q)

    @property
    def batch_shape(self):
        return self.p.shape[1:]

    @property
    def N(self):
        return self.p.shape[0]

    def norm(self):
        """
        Euclidean norm of (p, q) per batch entry.
        """
        return np.sqrt(np.sum(self.p**2, axis=0) + np.sum(self.q**2, axis=0))

    def take(self, index):
        """
        The single state at the given batch index.
        """
        return State(p=self.p[(slice(None),) + np.index_exp[index]], q=self.q[(slice(None),) + np.index_exp[index]])

    def astype(self, dtype):
        return State(p=self.p.astype(dtype), q=self.q.astype(dtype))

    def to_vector(self):
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_vector(cls, spec, y):
        N = spec.N
        return cls.of(spec, y[N : 2 * N], y[:N])


@dataclass(frozen=True, eq=False)
class TangentVector:
    dq: np.ndarray
    dp: np.ndarray

    def to_vector(self):
        return np.concatenate([self.dq, self.dp])


def differences(q):
    """
    q_j - q_{j+1} for j = 1..N-1.
    """
    return q[:-1] - q[1:]


def kinetic_energy(s):
    return 0.5 * np.sum(s.p**2, axis=0)


def potential_energy(spec, s):
    d = differences(s.q)
    total = sum(pot(d[j]) for j, pot in enumerate(spec.interaction))
    if spec.pinning:
        total = total + sum(pot(s.q[j]) for j, pot in enumerate(spec.pinning))
    return total


def energy(spec, s):
    """
    The Hamiltonian: sum p_j^2/2 + sum V_j(q_j - q_{j+1}) (+ sum U_j(q_j)).
    """
    return kinetic_energy(s) + potential_energy(spec, s)


def interaction_forces(spec, q, order=1):
    """
    V_j^{(order)}(q_j - q_{j+1}) stacked along the leading axis.
    """
    d = differences(q)
    return np.stack([pot.eval_deriv(d[j], order) for j, pot in enumerate(spec.interaction)])


def forces(spec, q):
    """
    -dH/dq_j = -U_j'(q_j) + V_{j-1}'(q_{j-1} - q_j) - V_j'(q_j - q_{j+1}).
    """
    dV = interaction_forces(spec, q)
    zero = np.zeros_like(dV[:1])
    total = np.concatenate([zero, dV]) - np.concatenate([dV, zero])
    if spec.pinning:
        total = total - np.stack([pot.eval_deriv(q[j], 1) for j, pot in enumerate(spec.pinning)])
    return total


def vector_field(spec, s):
    """
    The deterministic damped vector field F(s).

    Returns:
        TangentVector with dq = p and dp = -gamma * p + forces.
    """
    damping = _expand(spec.damping, len(s.batch_shape))
    return TangentVector(dq=s.p, dp=-damping * s.p + forces(spec, s.q))


def lie_energy(spec, s):
    """
    grad H . F evaluated term by term (no simplification).
    """
    F = vector_field(spec, s)
    return np.sum(-forces(spec, s.q) * F.dq + s.p * F.dp, axis=0)


def dissipation(spec, s):
    """
    The closed form of L_F H: minus the sum of damped p_j^2.
    """
    damping = _expand(spec.damping, len(s.batch_shape))
    return -np.sum(damping * s.p**2, axis=0)


def _check_xi_index(spec, j):
    if not spec.is_rotator:
        raise ValueError("xi is defined for rotator chains.")
    if not 0 <= j < spec.N:
        raise IndexError(f"xi index {j} out of range 0..{spec.N - 1}")


def xi(spec, s, j):
    """
    xi_j = -V_j'(q_j - q_{j+1}) for j = 1..N-1, with xi_0 = 0.
    """
    _check_xi_index(spec, j)
    if j == 0:
        return np.zeros(s.batch_shape)[()]
    return -spec.interaction[j - 1].eval_deriv(s.q[j - 1] - s.q[j], 1)


def lie_xi(spec, s, j):
    """
    L_F xi_j = -(p_j - p_{j+1}) V_j''(q_j - q_{j+1}).
    """
    _check_xi_index(spec, j)
    if j == 0:
        return np.zeros(s.batch_shape)[()]
    return -(s.p[j - 1] - s.p[j]) * spec.interaction[j - 1].eval_deriv(s.q[j - 1] - s.q[j], 2)
