import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial import polynomial as npoly

from nublado_lyapunov.conf.app_settings import app_settings

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


class PotentialKind(enum.Enum):
    TRIG_POLY = "TrigPoly"
    POLYNOMIAL = "Polynomial"
    MIXED = "Mixed"
    TABULATED = "Tabulated"


class Domain(enum.Enum):
    TORUS = "Torus"
    LINE = "Line"


def _as_coeffs(values):
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class Potential:
    """
    A closed-form potential: polynomial part + trigonometric part + shift.

        V(x) = sum_i poly[i] x**i
               + sum_k (cos[k-1] cos(k x) + sin[k-1] sin(k x))
               + shift

    Torus potentials carry only the constant term of the polynomial part,
    which makes them 2*pi-periodic by construction.
    """

    poly: tuple = (0.0,)
    cos: tuple = ()
    sin: tuple = ()
    shift: float = 0.0
    domain: Domain = Domain.LINE

    def __post_init__(self):
        poly = _as_coeffs(self.poly) or (0.0,)
        cos = _as_coeffs(self.cos)
        sin = _as_coeffs(self.sin)
        # Pad harmonics to a common length.
        size = max(len(cos), len(sin))
        cos = cos + (0.0,) * (size - len(cos))
        sin = sin + (0.0,) * (size - len(sin))
        # Strip trailing zeros so the degree is meaningful.
        while len(poly) > 1 and poly[-1] == 0.0:
            poly = poly[:-1]
        object.__setattr__(self, "poly", poly)
        object.__setattr__(self, "cos", cos)
        object.__setattr__(self, "sin", sin)
        object.__setattr__(self, "shift", float(self.shift))

        values = poly + cos + sin + (self.shift,)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("Potential coefficients must be finite.")
        if self.domain is Domain.TORUS and len(poly) > 1:
            raise ValueError("Torus potentials cannot have a non-constant polynomial part.")

    @classmethod
    def trig(cls, c0=0.0, cos=(), sin=(), *, shift=0.0):
        """
        A trigonometric polynomial on the torus.
        """
        return cls(poly=(c0,), cos=cos, sin=sin, shift=shift, domain=Domain.TORUS)

    @classmethod
    def polynomial(cls, coeffs, *, cos=(), sin=(), shift=0.0):
        """
        A potential on the line; ascending polynomial coefficients plus
        optional bounded trigonometric corrections.
        """
        return cls(poly=coeffs, cos=cos, sin=sin, shift=shift, domain=Domain.LINE)

    @property
    def kind(self):
        has_trig = any(self.cos) or any(self.sin)
        has_poly = self.degree > 0
        if has_trig and has_poly:
            return PotentialKind.MIXED
        if has_trig or self.domain is Domain.TORUS:
            return PotentialKind.TRIG_POLY
        return PotentialKind.POLYNOMIAL

    @property
    def degree(self):
        return len(self.poly) - 1

    @property
    def harmonics(self):
        return len(self.cos)

    def with_shift(self, shift):
        return replace(self, shift=shift)

    def derivative(self, order=1):
        """
        Return the exact derivative of the given order as a Potential.

        The shift and the constant term drop out for order >= 1.
        """
        if order < 0:
            raise ValueError("Derivative order must be non-negative.")
        if order == 0:
            return self
        poly = npoly.polyder(np.array(self.poly), order) if self.degree >= order else (0.0,)
        k = np.arange(1, self.harmonics + 1, dtype=float)
        cos = np.array(self.cos)
        sin = np.array(self.sin)
        for _ in range(order):
            # d/dx (c cos kx + s sin kx) = k s cos kx - k c sin kx
            cos, sin = k * sin, -k * cos
        return Potential(poly=tuple(poly), cos=tuple(cos), sin=tuple(sin), domain=self.domain)

    def trig_bound(self, order=0):
        """
        Upper bound of |d^order/dx^order| of the trigonometric part.
        """
        k = np.arange(1, self.harmonics + 1, dtype=float)
        return float(np.sum(k**order * (np.abs(self.cos) + np.abs(self.sin))))

    def _value(self, x):
        x = np.asarray(x)
        value = npoly.polyval(x, np.array(self.poly, dtype=x.dtype if x.dtype.kind == "f" else float))
        if self.harmonics:
            k = np.arange(1, self.harmonics + 1)
            kx = np.multiply.outer(x, k)
            value = value + np.cos(kx) @ np.array(self.cos) + np.sin(kx) @ np.array(self.sin)
        return value

    def eval_deriv(self, x, order=0):
        """
        Evaluate the k-th derivative at x (scalar or array).

        Args:
            x: Point(s) in the potential's domain.
            order: Derivative order, any non-negative integer.

        Returns:
            float for scalar x, ndarray otherwise.
        """
        if order < 0:
            raise ValueError("Derivative order must be non-negative.")
        if order == 0:
            value = self._value(x) + self.shift
        else:
            value = self.derivative(order)._value(x)
        if np.ndim(value) == 0:
            return float(value) if np.asarray(value).dtype == np.float64 else value[()]
        return value

    def __call__(self, x):
        return self.eval_deriv(x, 0)


def eval_deriv(pot, x, order):
    """
    Exact k-th derivative of a closed-form potential at x.
    """
    return pot.eval_deriv(x, order)


def real_roots(coeffs, *, imag_tol=1e-9):
    """
    Real roots of an ascending-coefficient polynomial.
    """
    coeffs = np.trim_zeros(np.asarray(coeffs, dtype=float), "b")
    if coeffs.size <= 1:
        return np.array([])
    roots = npoly.polyroots(coeffs)
    real = roots[np.abs(roots.imag) <= imag_tol * (1.0 + np.abs(roots.real))].real
    return np.sort(real)


def convexity_radius(pot, *, grid_points=None):
    """
    Certify R >= 0 with V''(x) > 0 for all |x| >= R.

    Beyond the largest real root of p'' - B (p the polynomial part, B a bound
    of the trigonometric second derivative) V'' is positive; inside, a grid
    scan locates the last non-positive point.

    Returns:
        float | None: The radius, or None when V is not convex at infinity.
    """
    grid_points = grid_points or app_settings.GRID_POINTS
    if pot.domain is Domain.TORUS:
        return None
    p2 = npoly.polyder(np.array(pot.poly), 2) if pot.degree >= 2 else np.array([0.0])
    p2 = np.trim_zeros(p2, "b")
    if p2.size == 0 or (p2.size - 1) % 2 == 1 or p2[-1] <= 0.0:
        return None
    bound = pot.trig_bound(2)
    if p2.size == 1 and p2[0] <= bound:
        return None

    shifted = p2.copy()
    shifted[0] -= bound
    roots = real_roots(shifted)
    outer = float(np.max(np.abs(roots))) if roots.size else 0.0

    x = np.linspace(-outer - 1.0, outer + 1.0, 2 * (grid_points // 2) + 1)
    bad = x[pot.eval_deriv(x, 2) <= 0.0]
    if bad.size == 0:
        return 0.0
    spacing = x[1] - x[0]
    return float(np.max(np.abs(bad)) + spacing)


def derivative_diverges(pot):
    """
    Whether U'(x) -> +-inf as x -> +-inf (leading-term analysis).
    """
    if pot.domain is Domain.TORUS or pot.degree < 2:
        return False
    return pot.degree % 2 == 0 and pot.poly[-1] > 0.0


@dataclass(frozen=True)
class ValidationReport:
    """
    Outcome of a potential (or chain) certification.
    """

    subject: str
    passed: bool
    classification: str = ""
    threshold_r: int | None = None
    min_nondegeneracy: float = math.nan
    argmin: float = math.nan
    min_value: float = math.nan
    shift: float = 0.0
    offending_point: float | None = None
    potential: Potential | None = None
    messages: tuple = field(default=())

    columns = (
        "subject",
        "passed",
        "classification",
        "threshold_r",
        "min_nondegeneracy",
        "argmin",
        "min_value",
        "shift",
        "offending_point",
    )

    def rows(self):
        yield (
            self.subject,
            self.passed,
            self.classification,
            self.threshold_r,
            self.min_nondegeneracy,
            self.argmin,
            self.min_value,
            self.shift,
            self.offending_point,
        )

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{self.subject}: {status} {self.classification}".rstrip()]
        lines.extend(f"  {message}" for message in self.messages)
        return "\n".join(lines)


def _refined_min(func, lo, hi, points, factor, rounds, *, periodic=False):
    """
    Grid minimum of func on [lo, hi), refined `rounds` times around the
    best point with `factor` times denser sub-grids.
    """
    x = np.linspace(lo, hi, points, endpoint=not periodic)
    values = func(x)
    i = int(np.argmin(values))
    best_x, best = float(x[i]), float(values[i])
    spacing = x[1] - x[0]
    for _ in range(rounds):
        sub = np.linspace(best_x - spacing, best_x + spacing, 2 * factor + 1)
        sub_values = func(sub)
        j = int(np.argmin(sub_values))
        if sub_values[j] <= best:
            best_x, best = float(sub[j]), float(sub_values[j])
        spacing = sub[1] - sub[0]
    if periodic:
        best_x = best_x % TWO_PI
    return best_x, best


def validate_rotor_potential(pot, *, grid_points=None, floor=None, subject="V"):
    """
    Certify a rotator interaction potential and shift it so that V >= 1.

    Args:
        pot: A Torus potential.
        grid_points: Grid size (default from settings).
        floor: Non-degeneracy floor for min (V')^2 + (V'')^2.
        subject: Label used in the report.

    Returns:
        ValidationReport whose `potential` is the shifted potential.
    """
    if pot.domain is not Domain.TORUS:
        raise ValueError("Rotor potentials must live on the torus.")
    grid_points = grid_points or app_settings.GRID_POINTS
    floor = app_settings.NONDEGENERACY_FLOOR if floor is None else floor
    factor = app_settings.REFINE_FACTOR
    rounds = app_settings.REFINE_ROUNDS

    def nondegeneracy(x):
        return pot.eval_deriv(x, 1) ** 2 + pot.eval_deriv(x, 2) ** 2

    argmin, min_nd = _refined_min(
        nondegeneracy, 0.0, TWO_PI, grid_points, factor, rounds, periodic=True
    )
    _, min_value = _refined_min(pot, 0.0, TWO_PI, grid_points, factor, rounds, periodic=True)

    shift = max(0.0, 1.0 - min_value)
    shifted = pot.with_shift(pot.shift + shift) if shift else pot
    messages = [f"min (V')^2+(V'')^2 = {min_nd!r} at x = {argmin!r}"]
    if shift:
        messages.append(f"shifted by {shift!r} so that V >= 1")

    passed = min_nd > floor
    if not passed:
        messages.append(f"non-degeneracy floor {floor!r} violated at x = {argmin!r}")
        logger.warning("%s fails non-degeneracy at x=%r", subject, argmin)

    return ValidationReport(
        subject=subject,
        passed=passed,
        classification="Rotor",
        min_nondegeneracy=min_nd,
        argmin=argmin,
        min_value=min_value + shift,
        shift=shift,
        offending_point=None if passed else argmin,
        potential=shifted,
        messages=tuple(messages),
    )


def _strictly_convex_at_zero(pot, box, grid_points, floor):
    if pot.domain is Domain.TORUS or not derivative_diverges(pot):
        return False
    radius = convexity_radius(pot, grid_points=grid_points)
    if radius is None:
        return False
    half = max(box, radius)
    x = np.linspace(-half, half, 2 * (grid_points // 2) + 1)
    if np.any(pot.eval_deriv(x, 2) <= floor):
        return False
    scale = 1.0 + abs(pot.eval_deriv(1.0, 1))
    return abs(pot.eval_deriv(0.0, 1)) <= 1e-12 * scale


def validate_oscillator_potentials(spec, *, box=None, grid_points=None, floor=None):
    """
    Classify an oscillator chain and return its order threshold.

    StrictlyConvex: every U_k, V_k strictly convex with minimum at 0
    (threshold 4N-1). GeneralConvexAtInfinity: V_k'' > 0 beyond a certified
    radius, U_k' diverging, and (V_k'')^2 + (V_k''')^2 > 0 on the inner
    window (threshold 3*2^(N+1)-5).

    Returns:
        ValidationReport; `passed` is False when neither set is certified.
    """
    from nublado_lyapunov.chain import ChainKind

    if spec.kind is not ChainKind.OSCILLATOR:
        raise ValueError("Oscillator validation requires an oscillator chain.")
    box = app_settings.CONVEXITY_BOX if box is None else box
    grid_points = grid_points or app_settings.GRID_POINTS
    floor = app_settings.NONDEGENERACY_FLOOR if floor is None else floor
    N = spec.N
    potentials = list(spec.pinning) + list(spec.interaction)

    if all(_strictly_convex_at_zero(pot, box, grid_points, floor) for pot in potentials):
        return ValidationReport(
            subject="chain",
            passed=True,
            classification="StrictlyConvex",
            threshold_r=4 * N - 1,
            messages=("all U_k, V_k strictly convex with minimum at 0",),
        )

    messages = []
    radii = []
    for k, pot in enumerate(spec.interaction, start=1):
        radius = convexity_radius(pot, grid_points=grid_points)
        if radius is None:
            messages.append(f"V_{k} is not convex at infinity")
            continue
        radii.append(radius)
        x = np.linspace(-radius - 1.0, radius + 1.0, 2 * (grid_points // 2) + 1)
        nondegeneracy = pot.eval_deriv(x, 2) ** 2 + pot.eval_deriv(x, 3) ** 2
        i = int(np.argmin(nondegeneracy))
        if nondegeneracy[i] <= floor:
            messages.append(f"(V_{k}'')^2 + (V_{k}''')^2 vanishes near x = {float(x[i])!r}")
    for k, pot in enumerate(spec.pinning, start=1):
        if not derivative_diverges(pot):
            messages.append(f"U_{k}' does not diverge at infinity")

    if messages:
        logger.warning("Oscillator chain fails certification: %s", "; ".join(messages))
        return ValidationReport(
            subject="chain",
            passed=False,
            classification="Uncertified",
            messages=tuple(messages),
        )
    return ValidationReport(
        subject="chain",
        passed=True,
        classification="GeneralConvexAtInfinity",
        threshold_r=3 * 2 ** (N + 1) - 5,
        argmin=max(radii, default=0.0),
        messages=(f"convexity radius R = {max(radii, default=0.0)!r}",),
    )
