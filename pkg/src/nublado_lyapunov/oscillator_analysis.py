import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from nublado_lyapunov.chain import ChainKind, State, energy, forces
from nublado_lyapunov.conf.app_settings import app_settings
from nublado_lyapunov.exceptions import NoConvergence, ThresholdViolation
from nublado_lyapunov.jets import UNRESOLVED, order_of
from nublado_lyapunov.potentials import convexity_radius, real_roots, validate_oscillator_potentials
from nublado_lyapunov.reports import state_hash

logger = logging.getLogger(__name__)

NEAR_EQUILIBRIUM_DISTANCES = 10.0 ** -np.arange(1, 7)
# Shares of generic, resting (p = 0) and near-equilibrium states.
ORDER_MIX = (0.4, 0.4, 0.2)


def _require_oscillator(spec):
    if spec.kind is not ChainKind.OSCILLATOR:
        raise ValueError("Equilibrium analysis requires an oscillator chain.")


def equilibrium_residual(spec, q):
    """
    (U_1' + V_1', U_2' - V_1' + V_2', ..., U_N' - V_{N-1}') at q.

    It vanishes exactly at the equilibria (p = 0, q) of the damped flow.
    """
    _require_oscillator(spec)
    return -forces(spec, np.asarray(q, dtype=float))


def equilibrium_jacobian(spec, q):
    """
    Tridiagonal Jacobian of the residual at a single configuration q.
    """
    _require_oscillator(spec)
    q = np.asarray(q, dtype=float)
    N = spec.N
    d = q[:-1] - q[1:]
    bonds = np.array([pot.eval_deriv(d[j], 2) for j, pot in enumerate(spec.interaction)])
    diagonal = np.array([pot.eval_deriv(q[j], 2) for j, pot in enumerate(spec.pinning)])
    diagonal[:-1] += bonds
    diagonal[1:] += bonds
    jacobian = np.diag(diagonal)
    index = np.arange(N - 1)
    jacobian[index, index + 1] = -bonds
    jacobian[index + 1, index] = -bonds
    return jacobian


@dataclass(frozen=True)
class Certificate:
    """
    Bounds placing every equilibrium in the open box (-b, a)^N.

    Attributes:
        R: Radius beyond which every V_k is convex.
        M: max over |x| <= R of |V_k'(x)|, plus one.
        a: U_k'(x) >= 2M for x >= a, every k.
        b: U_k'(x) <= -2M for x <= -b, every k.
    """

    R: float
    M: float
    a: float
    b: float

    def contains(self, q):
        q = np.asarray(q, dtype=float)
        return np.all((q > -self.b) & (q < self.a), axis=0)


def _threshold(pot, level, *, sign, grid_points):
    """
    Smallest t >= 0 with sign * U'(sign * x) >= level for all x >= t.
    """
    bound = pot.trig_bound(1)
    shifted = np.array(pot.derivative(1).poly, dtype=float)
    shifted[0] -= sign * (level + bound)
    roots = real_roots(shifted)
    outer = float(np.max(np.abs(roots))) if roots.size else 0.0
    t = np.linspace(0.0, outer + 1.0, grid_points)

    def excess(x):
        return sign * pot.eval_deriv(sign * x, 1) - level

    below = np.flatnonzero(excess(t) < 0.0)
    if below.size == 0:
        return 0.0
    i = int(below[-1])
    if i == t.size - 1:
        return float(t[-1])
    return float(optimize.brentq(excess, t[i], t[i + 1]))


def equilibrium_certificate(spec, *, grid_points=None):
    """
    The box bounds (M, a, b) of the equilibrium set.
    """
    _require_oscillator(spec)
    grid_points = grid_points or app_settings.GRID_POINTS
    radii = [convexity_radius(pot, grid_points=grid_points) for pot in spec.interaction]
    R = max((app_settings.CONVEXITY_BOX if r is None else r) for r in radii)
    x = np.linspace(-R, R, grid_points) if R > 0.0 else np.zeros(1)
    M = max(float(np.max(np.abs(pot.eval_deriv(x, 1)))) for pot in spec.interaction) + 1.0
    a = max(_threshold(pot, 2.0 * M, sign=1.0, grid_points=grid_points) for pot in spec.pinning)
    b = max(_threshold(pot, 2.0 * M, sign=-1.0, grid_points=grid_points) for pot in spec.pinning)
    return Certificate(R=float(R), M=M, a=a, b=b)


def _dedupe(points, distance):
    kept = []
    for point in points:
        if all(np.linalg.norm(point - other) > distance for other in kept):
            kept.append(point)
    return kept


@dataclass
class EquilibriumReport:
    """
    Deduplicated equilibria with their residuals and the box certificate.
    """

    classification: str
    certificate: Certificate
    roots: list
    residuals: list
    starts: int
    method: str = "multistart"

    @property
    def columns(self):
        N = len(self.roots[0]) if self.roots else 0
        return ("root",) + tuple(f"q_{k}" for k in range(1, N + 1)) + ("residual",)

    @property
    def passed(self):
        if not self.roots:
            return False
        inside = all(self.certificate.contains(root) for root in self.roots)
        if self.classification == "StrictlyConvex":
            return inside and len(self.roots) == 1
        return inside

    def rows(self):
        for index, (root, residual) in enumerate(zip(self.roots, self.residuals), start=1):
            yield (index,) + tuple(float(value) for value in root) + (float(residual),)

    def summary(self):
        c = self.certificate
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"find-equilibria ({self.method}, {self.starts} starts, {self.classification}): {status}",
            f"  certificate R={c.R!r} M={c.M!r} a={c.a!r} b={c.b!r}",
            f"  {len(self.roots)} root(s)",
        ]
        lines.extend(f"  q={np.array2string(np.asarray(root), precision=12)} residual={res!r}" for root, res in zip(self.roots, self.residuals))
        return "\n".join(lines)


def _polish(spec, guess, box):
    result = optimize.root(
        lambda q: equilibrium_residual(spec, q),
        guess,
        jac=lambda q: equilibrium_jacobian(spec, q),
        method="hybr",
    )
    residual = float(np.max(np.abs(equilibrium_residual(spec, result.x))))
    inside = bool(np.all((result.x > -box.b) & (result.x < box.a)))
    return result.x, residual, inside and residual <= app_settings.ROOT_RESIDUAL_TOL


def _finish(spec, candidates, certificate, starts, classification, method):
    roots = _dedupe([root for root, _ in candidates], app_settings.ROOT_DEDUPE_DISTANCE)
    residuals = [float(np.max(np.abs(equilibrium_residual(spec, root)))) for root in roots]
    if not roots:
        raise NoConvergence(f"No equilibrium found from {starts} start(s) in the certified box.")
    logger.info("Found %d equilibrium(s) from %d start(s)", len(roots), starts)
    return EquilibriumReport(
        classification=classification,
        certificate=certificate,
        roots=roots,
        residuals=residuals,
        starts=starts,
        method=method,
    )


def find_equilibria(spec, box=None, budget=None, *, rng):
    """
    Equilibria of an oscillator chain by multistart root finding.

    Args:
        box: Certificate bounding the search; computed when omitted.
        budget: Number of random starts, NEWTON_STARTS_PER_PARTICLE * N by default.
        rng: numpy Generator.

    Returns:
        EquilibriumReport.

    Raises:
        NoConvergence: No start converged to a root inside the box.
    """
    _require_oscillator(spec)
    validation = validate_oscillator_potentials(spec)
    box = box or equilibrium_certificate(spec)
    budget = budget or app_settings.NEWTON_STARTS_PER_PARTICLE * spec.N
    starts = [np.zeros(spec.N)] + list(rng.uniform(-box.b, box.a, (budget, spec.N)))
    candidates = []
    for guess in starts:
        root, residual, ok = _polish(spec, guess, box)
        if ok:
            candidates.append((root, residual))
    return _finish(spec, candidates, box, len(starts), validation.classification, "multistart")


def brute_force_equilibria(spec, box=None, *, points=201):
    """
    Equilibria of a two-particle chain from a grid scan of the residual.

    Cells over which both residual components change sign seed a polish.
    """
    _require_oscillator(spec)
    if spec.N != 2:
        raise ValueError("The brute-force scan handles two-particle chains.")
    validation = validate_oscillator_potentials(spec)
    box = box or equilibrium_certificate(spec)
    axis = np.linspace(-box.b, box.a, points)
    q1, q2 = np.meshgrid(axis, axis, indexing="ij")
    residual = equilibrium_residual(spec, np.stack([q1.ravel(), q2.ravel()])).reshape(2, points, points)

    def straddles(values):
        corners = np.stack([values[:-1, :-1], values[1:, :-1], values[:-1, 1:], values[1:, 1:]])
        return (corners.min(axis=0) <= 0.0) & (corners.max(axis=0) >= 0.0)

    cells = np.argwhere(straddles(residual[0]) & straddles(residual[1]))
    half = 0.5 * (axis[1] - axis[0])
    candidates = []
    for i, j in cells:
        guess = np.array([axis[i] + half, axis[j] + half])
        root, residual_norm, ok = _polish(spec, guess, box)
        if ok:
            candidates.append((root, residual_norm))
    return _finish(spec, candidates, box, len(cells), validation.classification, "grid scan")


@dataclass
class OrderReport:
    """
    Orders of vanishing of H on a sampled mixture of states.
    """

    kmax: int
    threshold: int | None
    hashes: list = field(default_factory=list)
    kinds: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    orders: list = field(default_factory=list)
    in_box: list = field(default_factory=list)
    cascade_mismatches: int = 0

    columns = ("state", "kind", "H", "order", "resolved", "in_K")

    @property
    def unresolved(self):
        return sum(order == UNRESOLVED for order in self.orders)

    @property
    def max_order(self):
        finite = [order for order in self.orders if order != UNRESOLVED]
        return max(finite, default=None)

    @property
    def passed(self):
        return self.cascade_mismatches == 0

    def rows(self):
        for row in zip(self.hashes, self.kinds, self.energies, self.orders, self.in_box):
            state, kind, H, order, in_K = row
            yield (state, kind, H, order, order != UNRESOLVED, in_K)

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"order-stats on {len(self.orders)} states (kmax={self.kmax}, threshold={self.threshold}): {status}",
            f"  max finite order: {self.max_order}",
            f"  unresolved: {self.unresolved}",
            f"  cascade mismatches: {self.cascade_mismatches}",
        ]
        for kind in dict.fromkeys(self.kinds):
            seen = sorted({o for k, o in zip(self.kinds, self.orders) if k == kind and o != UNRESOLVED})
            lines.append(f"  {kind} orders seen: {seen}")
        return "\n".join(lines)


def _sample_states(spec, budget, certificate, roots, rng):
    N = spec.N
    kind = rng.choice(3, size=budget, p=ORDER_MIX)
    p = np.zeros((N, budget))
    q = np.zeros((N, budget))
    scale = np.ones(budget)

    generic = np.flatnonzero(kind == 0)
    q[:, generic] = rng.uniform(-2.0 * certificate.b, 2.0 * certificate.a, (N, generic.size))
    p[:, generic] = rng.normal(0.0, 1.0, (N, generic.size))

    resting = np.flatnonzero(kind == 1)
    q[:, resting] = rng.uniform(-2.0 * certificate.b, 2.0 * certificate.a, (N, resting.size))

    near = np.flatnonzero(kind == 2)
    base = np.stack(roots)[rng.integers(len(roots), size=near.size)].T
    delta = rng.choice(NEAR_EQUILIBRIUM_DISTANCES, size=near.size)
    direction = rng.standard_normal((2 * N, near.size))
    direction = delta * direction / np.linalg.norm(direction, axis=0)
    q[:, near] = base + direction[:N]
    p[:, near] = direction[N:]
    # Lie derivatives of H vanish quadratically at an equilibrium.
    scale[near] = delta**2

    labels = np.array(["generic", "resting", "near-equilibrium"])[kind]
    return State.of(spec, p, q), scale, labels


def order_statistics(spec, budget, kmax, *, rng, roots=None, certificate=None):
    """
    Order of H over generic, resting and near-equilibrium states.

    Args:
        roots: Known equilibria for the near-equilibrium family; found with
            find_equilibria when omitted.

    Raises:
        ThresholdViolation: A state outside the certified box has no finite
            order up to a kmax at or above the threshold.
    """
    _require_oscillator(spec)
    validation = validate_oscillator_potentials(spec)
    threshold = validation.threshold_r
    certificate = certificate or equilibrium_certificate(spec)
    if roots is None:
        roots = find_equilibria(spec, certificate, rng=rng).roots
    s, scale, labels = _sample_states(spec, budget, certificate, roots, rng)

    result = order_of(spec, s, "H", kmax, scale=scale)
    in_box = np.all(s.p == 0.0, axis=0) & certificate.contains(s.q)
    if threshold is not None and kmax >= threshold:
        bad = (~in_box) & ((result.orders == UNRESOLVED) | (result.orders > threshold))
        if np.any(bad):
            index = int(np.argmax(bad))
            order = int(result.orders[index])
            raise ThresholdViolation(
                f"State outside the certified box has order {order} (threshold {threshold})",
                state=s.take(index),
                order=order,
            )

    report = OrderReport(kmax=kmax, threshold=threshold)
    report.hashes = [state_hash(s.p[:, i], s.q[:, i]) for i in range(budget)]
    report.kinds = list(labels)
    report.energies = [float(h) for h in energy(spec, s)]
    report.orders = [int(o) for o in result.orders]
    report.in_box = [bool(flag) for flag in in_box]

    if spec.damping_mask == (True,) + (False,) * (spec.N - 1):
        report.cascade_mismatches = _cascade_mismatches(spec, s, result, labels == "resting", kmax)
    if report.unresolved:
        logger.info("%d state(s) with unresolved order up to kmax=%d", report.unresolved, kmax)
    return report


def _cascade_mismatches(spec, s, result, resting, kmax, *, margin=1.0e3):
    """
    Resting states where ord(H) != 2 ord(p_1) + 1, with L_F H = -p_1^2.

    States whose first non-vanishing L^m p_1 sits within `margin` of its
    tolerance are skipped.
    """
    momentum = order_of(spec, s, "p1", kmax)
    m = momentum.orders
    index = np.clip(m, 0, kmax)[None]
    value = np.take_along_axis(np.abs(momentum.values), index, axis=0)[0]
    tolerance = np.take_along_axis(np.broadcast_to(momentum.tolerance, momentum.values.shape), index, axis=0)[0]
    usable = resting & (m != UNRESOLVED) & (value > margin * tolerance) & (2 * m + 1 <= kmax)
    usable &= result.orders != UNRESOLVED
    return int(np.sum(usable & (result.orders != 2 * m + 1)))
