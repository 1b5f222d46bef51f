"""
Strict Lyapunov functions from the non-strict energy of an oscillator chain.

Given envelopes phi <= |L W| + sum_{k=2}^r |L^k W|^2 and |L^k W| <= Phi,
tabulated on a log grid of levels w > Q, the function

    W# = A(W) - sum_{k=2}^r B_k(W) L^{k-1} W L^k W

with B_k = 2^((r-k)(r-k+1)) (Phi^2/phi)^(r-k) and A' > Phi^2 sum |B_k'| + Phi B_2 + 1
satisfies L_F W# <= -phi(W)/4 above Q + eps. Here W = H, and the envelopes
are sampled, so a passing certification is statistical evidence.
"""

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize

from nublado_lyapunov.chain import ChainKind, State, forces, potential_energy
from nublado_lyapunov.conf.app_settings import app_settings
from nublado_lyapunov.exceptions import EnvelopeDegenerate, ImproperlyConfigured
from nublado_lyapunov.jets import Observable, lie_derivatives
from nublado_lyapunov.potentials import validate_oscillator_potentials
from nublado_lyapunov.reports import CheckReport, format_cell, read_csv, state_hash
from nublado_lyapunov.sampling import log_uniform, map_batched

logger = logging.getLogger(__name__)

FORMAT_NAME = "nublado-lyapunov/matrosov"
FORMAT_VERSION = 1
HEADER_FILE = "matrosov.json"
TABLE_FILE = "matrosov.csv"

B_CONSISTENCY_TOL = 1e-12
BISECT_ITERATIONS = 80
BRACKET_TRIES = 64
# Shares of generic, resting (p = 0) and balanced (p = 0, L_F p_1 = 0) states.
SLICE_MIX = (0.6, 0.2, 0.2)


@dataclass(frozen=True, eq=False)
class EnergyGrid:
    """
    Levels w = Q + offsets, offsets log-spaced over [eps/2, w_max - Q].
    """

    Q: float
    eps: float
    w_max: float
    levels: np.ndarray

    @classmethod
    def build(cls, Q, eps, w_max, *, per_decade=None):
        if eps <= 0.0:
            raise ValueError("eps must be positive.")
        if w_max <= Q + eps:
            raise ValueError(f"w_max={w_max!r} must exceed Q + eps = {Q + eps!r}.")
        per_decade = per_decade or app_settings.LEVELS_PER_DECADE
        span = math.log10((w_max - Q) / (eps / 2.0))
        count = max(2, int(math.ceil(per_decade * span)) + 1)
        offsets = np.geomspace(eps / 2.0, w_max - Q, count)
        return cls(Q=float(Q), eps=float(eps), w_max=float(w_max), levels=Q + offsets)

    def __len__(self):
        return len(self.levels)


@dataclass(frozen=True, eq=False)
class Envelopes:
    levels: np.ndarray
    m: np.ndarray
    M: np.ndarray
    phi: np.ndarray
    Phi: np.ndarray
    clamped: np.ndarray
    samples: int


@dataclass(frozen=True, eq=False)
class MatrosovData:
    """
    Tables of the construction on the level grid.

    Attributes:
        B: Array of shape (r-1, levels); row k-2 holds B_k.
        A: Node values of the piecewise-linear A.
        b_consistency: Largest relative gap between the closed-form and the
            recursive B_k.
    """

    r: int
    Q: float
    eps: float
    levels: np.ndarray
    phi: np.ndarray
    Phi: np.ndarray
    B: np.ndarray
    A: np.ndarray
    m: np.ndarray
    M: np.ndarray
    clamped: np.ndarray
    b_consistency: float = 0.0
    observable: str = "H"

    @property
    def w_max(self):
        return float(self.levels[-1])

    @property
    def log_offsets(self):
        return np.log(self.levels - self.Q)

    def Bk(self, k):
        if not 2 <= k <= self.r:
            raise IndexError(f"B_{k} out of range 2..{self.r}")
        return self.B[k - 2]

    def A_slopes(self):
        return np.diff(self.A) / np.diff(self.levels)


def default_order(spec):
    """
    r = 7 for a strictly convex two-particle chain, 3 * 2^(N+1) - 5 otherwise.
    """
    if spec.N == 2:
        if validate_oscillator_potentials(spec).classification == "StrictlyConvex":
            return 7
    return 3 * 2 ** (spec.N + 1) - 5


def _require_oscillator(spec):
    if spec.kind is not ChainKind.OSCILLATOR:
        raise ValueError("The strict Lyapunov construction is built for oscillator chains.")


def _potential(spec, q):
    return potential_energy(spec, State(p=np.zeros_like(q), q=q))


def potential_minimizer(spec, *, rng=None, starts=8):
    """
    A global minimizer of U over a few local searches.
    """

    def fun(x):
        q = x[:, None]
        return float(_potential(spec, q)[0]), -forces(spec, q)[:, 0]

    rng = rng or np.random.default_rng(0)
    guesses = [np.zeros(spec.N)] + [rng.normal(0.0, 1.0, spec.N) for _ in range(starts)]
    best = None
    for guess in guesses:
        result = optimize.minimize(fun, guess, jac=True, method="BFGS")
        if best is None or result.fun < best.fun:
            best = result
    return best.x


def _bisect(func, lo, hi, iterations=BISECT_ITERATIONS):
    """
    Vectorised bisection of func on [lo, hi] where func changes sign.
    """
    f_lo = func(lo)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        f_mid = func(mid)
        move = (f_mid > 0.0) == (f_lo > 0.0)
        lo = np.where(move, mid, lo)
        f_lo = np.where(move, f_mid, f_lo)
        hi = np.where(move, hi, mid)
    return 0.5 * (lo + hi)


def _grow_upper(func, lo, hi):
    """
    Push hi away from lo until func(hi) > 0.

    Returns:
        (hi, ok) where ok marks the entries that got bracketed.
    """
    for _ in range(BRACKET_TRIES):
        short = func(hi) <= 0.0
        if not np.any(short):
            break
        hi = np.where(short, lo + 2.0 * (hi - lo), hi)
    return hi, func(hi) > 0.0


def _unit_vectors(rng, dim, size):
    g = rng.standard_normal((dim, size))
    return g / np.linalg.norm(g, axis=0)


class LevelSampler:
    """
    States on prescribed energy levels.

    Coordinates come from a bisection along a ray from the potential minimum
    to a target potential energy; momenta are then scaled along a random
    direction in closed form, |p| = sqrt(2 (w - U(q))).
    """

    def __init__(self, spec, rng):
        _require_oscillator(spec)
        self.spec = spec
        self.rng = rng
        self.origin = potential_minimizer(spec, rng=rng)
        self.floor = float(_potential(spec, self.origin[:, None])[0])

    def _ray(self, directions, target):
        origin = self.origin[:, None]

        def excess(c):
            return _potential(self.spec, origin + c * directions) - target

        lo = np.zeros(target.shape)
        hi, ok = _grow_upper(excess, lo, np.ones(target.shape))
        c = _bisect(excess, lo, hi)
        return origin + c * directions, ok

    def generic(self, levels):
        N = self.spec.N
        size = levels.shape[0]
        share = self.rng.uniform(0.0, 1.0, size)
        target = self.floor + share * (levels - self.floor)
        q, ok = self._ray(_unit_vectors(self.rng, N, size), target)
        kinetic = np.maximum(levels - _potential(self.spec, q), 0.0)
        p = np.sqrt(2.0 * kinetic) * _unit_vectors(self.rng, N, size)
        return p, q, ok

    def resting(self, levels):
        q, ok = self._ray(_unit_vectors(self.rng, self.spec.N, levels.shape[0]), levels)
        return np.zeros_like(q), q, ok

    def _balance_first(self, rest):
        """
        q_1 with L_F p_1 = 0 at p = 0, given q_2..q_N.
        """
        spec = self.spec

        def pull(x):
            return -forces(spec, np.concatenate([x[None, :], rest]))[0]

        centre = np.full(rest.shape[1], self.origin[0])
        radius = 1.0 + np.abs(rest[0] - centre)
        for _ in range(BRACKET_TRIES):
            open_ = (pull(centre - radius) >= 0.0) | (pull(centre + radius) <= 0.0)
            if not np.any(open_):
                break
            radius = np.where(open_, 2.0 * radius, radius)
        return _bisect(pull, centre - radius, centre + radius)

    def balanced(self, levels):
        N = self.spec.N
        size = levels.shape[0]
        directions = _unit_vectors(self.rng, N - 1, size)
        base = self.origin[1:, None]

        def place(c):
            rest = base + c * directions
            return np.concatenate([self._balance_first(rest)[None, :], rest])

        def excess(c):
            return _potential(self.spec, place(c)) - levels

        lo = np.zeros(size)
        ok = excess(lo) <= 0.0
        hi, bracketed = _grow_upper(excess, lo, np.ones(size))
        c = _bisect(excess, lo, hi)
        q = place(c)
        return np.zeros_like(q), q, ok & bracketed

    def sample(self, levels):
        """
        A mixture of generic, resting and balanced states, one per entry of levels.

        Returns:
            (State, ok): the states projected successfully and the mask
            selecting them from `levels`.
        """
        levels = np.asarray(levels, dtype=float)
        kind = self.rng.choice(3, size=levels.shape[0], p=SLICE_MIX)
        p = np.zeros((self.spec.N, levels.shape[0]))
        q = np.zeros_like(p)
        ok = levels > self.floor
        for index, method in enumerate((self.generic, self.resting, self.balanced)):
            chosen = np.flatnonzero((kind == index) & ok)
            if chosen.size:
                p_part, q_part, ok_part = method(levels[chosen])
                p[:, chosen], q[:, chosen] = p_part, q_part
                ok[chosen] &= ok_part
        dropped = int(np.sum(~ok))
        if dropped:
            logger.info("Dropped %d state(s) that could not be projected onto their level", dropped)
        return State(p=p[:, ok], q=q[:, ok]), ok


def _lie_table(spec, s, kmax):
    return map_batched(lambda part: lie_derivatives(spec, part, "H", kmax), s)


def envelope_terms(values, r):
    """
    |L W| + sum_{k=2}^r |L^k W|^2 and max_{1<=k<=r+1} |L^k W| per state.
    """
    lower = np.abs(values[1]) + np.sum(values[2 : r + 1] ** 2, axis=0)
    upper = np.max(np.abs(values[1 : r + 2]), axis=0)
    return lower, upper


def _neighbourhood(values, reduce):
    padded = np.concatenate([values[:1], values, values[-1:]])
    return reduce(reduce(padded[:-2], padded[1:-1]), padded[2:])


def estimate_envelopes(spec, W, r, grid, budget, *, rng, safety_low=None, safety_high=None):
    """
    Sampled envelopes phi and Phi on every grid level.

    Args:
        W: Observable; only the energy H is supported.
        r: Number of Lie derivatives entering the lower envelope.
        grid: EnergyGrid.
        budget: States per level.
        rng: numpy Generator.

    Returns:
        Envelopes.

    Raises:
        EnvelopeDegenerate: The sampled lower envelope vanishes on some level.
    """
    _require_oscillator(spec)
    if Observable.coerce(W).name != "H" or Observable.coerce(W).power != 1:
        raise ValueError("Level sets are sampled for W = H only.")
    if r < 2:
        raise ValueError("r must be at least 2.")
    safety_low = app_settings.ENVELOPE_SAFETY_LOW if safety_low is None else safety_low
    safety_high = app_settings.ENVELOPE_SAFETY_HIGH if safety_high is None else safety_high

    sampler = LevelSampler(spec, rng)
    level_index = np.repeat(np.arange(len(grid)), budget)
    s, ok = sampler.sample(grid.levels[level_index])
    level_index = level_index[ok]
    logger.info("Estimating envelopes on %d levels from %d states (r=%d)", len(grid), level_index.size, r)

    values = _lie_table(spec, s, r + 1)
    lower, upper = envelope_terms(values, r)
    m = np.full(len(grid), np.inf)
    M = np.zeros(len(grid))
    np.minimum.at(m, level_index, lower)
    np.maximum.at(M, level_index, upper)

    empty = np.flatnonzero(~np.isfinite(m))
    if empty.size:
        raise ValueError(f"No state could be placed on level w={grid.levels[empty[0]]!r}.")
    degenerate = m <= app_settings.ZERO_TOL * (1.0 + M**2)
    if np.any(degenerate):
        level = float(grid.levels[np.argmax(degenerate)])
        raise EnvelopeDegenerate(level)

    phi = safety_low * _neighbourhood(m, np.minimum)
    Phi = safety_high * _neighbourhood(M, np.maximum)
    clamped = phi > Phi**2
    if np.any(clamped):
        logger.info("Clamped phi to Phi^2 on %d level(s)", int(np.sum(clamped)))
    phi = np.minimum(phi, Phi**2)
    return Envelopes(levels=grid.levels, m=m, M=M, phi=phi, Phi=Phi, clamped=clamped, samples=int(level_index.size))


def build_B(r, phi, Phi):
    """
    B_2..B_r in closed form, and the largest relative gap to the recursion
    B_{k-1} = 4 B_k^2 / B_{k+1} started from B_r = 1, B_{r-1} = 4 Phi^2 / phi.

    Returns:
        (B, gap) with B of shape (r-1, levels).
    """
    ratio = np.asarray(Phi, dtype=float) ** 2 / np.asarray(phi, dtype=float)
    n = r - np.arange(2, r + 1)
    log2_B = (n * (n + 1))[:, None] + n[:, None] * np.log2(ratio)[None, :]
    with np.errstate(over="ignore"):
        B = np.exp2(log2_B)
    if not np.all(np.isfinite(B)):
        raise OverflowError(f"B_k tables overflow for r={r}; tighten the envelopes or lower r.")

    recursive = np.empty_like(B)
    recursive[-1] = 1.0
    if r > 2:
        recursive[-2] = 4.0 * ratio
    for k in range(r - 2, 1, -1):
        recursive[k - 2] = 4.0 * recursive[k - 1] ** 2 / recursive[k]
    gap = float(np.max(np.abs(recursive - B) / B))
    return B, gap


def _cell_bounds(values):
    return np.maximum(values[..., :-1], values[..., 1:])


def a_condition(levels, Q, phi, Phi, B, *, inflation=None):
    """
    Per-cell right-hand side Phi^2 sum |B_k'| + Phi B_2 + 1, each factor at
    its larger cell endpoint, with |B_k'| from the log-linear interpolant
    inflated by `inflation`.
    """
    inflation = app_settings.DERIVATIVE_INFLATION if inflation is None else inflation
    x = np.log(levels - Q)
    log_slope = np.abs(np.diff(np.log(B), axis=-1)) / np.diff(x)
    derivative = inflation * _cell_bounds(B) * log_slope / (levels[:-1] - Q)
    Phi_cell = _cell_bounds(Phi)
    return Phi_cell**2 * np.sum(derivative, axis=0) + Phi_cell * _cell_bounds(B[0]) + 1.0


def build_A(data):
    """
    Node values of A: cell slopes one above the A' condition, A(Q + eps) = 0,
    then raised by the running maximum of sum_k B_k Phi^2 + w - A so that
    W# >= W.
    """
    levels = data.levels
    slopes = a_condition(levels, data.Q, data.phi, data.Phi, data.B) + 1.0
    A = np.concatenate([[0.0], np.cumsum(slopes * np.diff(levels))])
    A = A - np.interp(data.Q + data.eps, levels, A)
    deficit = np.sum(data.B, axis=0) * data.Phi**2 + levels - A
    A = A + np.maximum.accumulate(np.maximum(deficit, 0.0))
    return A


def assemble(envelopes, grid, r):
    """
    MatrosovData from sampled envelopes: B_k tables, then A.
    """
    B, gap = build_B(r, envelopes.phi, envelopes.Phi)
    if gap > B_CONSISTENCY_TOL:
        logger.warning("Closed-form and recursive B_k differ by %r", gap)
    data = MatrosovData(
        r=r,
        Q=grid.Q,
        eps=grid.eps,
        levels=grid.levels,
        phi=envelopes.phi,
        Phi=envelopes.Phi,
        B=B,
        A=np.zeros(len(grid)),
        m=envelopes.m,
        M=envelopes.M,
        clamped=envelopes.clamped,
        b_consistency=gap,
    )
    return dataclasses.replace(data, A=build_A(data))


def build_matrosov(spec, r, grid, budget, *, rng):
    envelopes = estimate_envelopes(spec, "H", r, grid, budget, rng=rng)
    return assemble(envelopes, grid, r)


def table_report(data):
    """
    Sanity checks of freshly built tables: positive envelopes, an increasing A,
    B_k >= 1 with B_k <= sqrt(B_{k-1} B_{k+1}) / 2 for 3 <= k <= r-1, and
    agreeing B_k constructions.
    """
    report = CheckReport(title=f"matrosov-build r={data.r}", samples=len(data.levels))
    report.add("min phi", float(np.min(data.phi)), 0.0, bool(np.all(data.phi > 0.0)))
    report.add("min Phi^2 - phi", float(np.min(data.Phi**2 - data.phi)), 0.0, bool(np.all(data.Phi**2 >= data.phi)))
    report.add("min A slope", float(np.min(data.A_slopes())), 1.0, bool(np.all(data.A_slopes() >= 1.0)))
    report.add("min B_k", float(np.min(data.B)), 1.0, bool(np.all(data.B >= 1.0)))
    if data.r >= 4:
        B = data.B
        ratio = float(np.max(B[1:-1] / (0.5 * np.sqrt(B[:-2]) * np.sqrt(B[2:]))))
        report.add("max B_k / (sqrt(B_{k-1} B_{k+1}) / 2)", ratio, 1.0, ratio <= 1.0 + B_CONSISTENCY_TOL)
    report.add("B_k closed form vs recursion", data.b_consistency, B_CONSISTENCY_TOL, data.b_consistency <= B_CONSISTENCY_TOL)
    report.add("clamped levels", int(np.sum(data.clamped)), len(data.levels))
    report.note(f"levels w in [{float(data.levels[0])!r}, {data.w_max!r}], Q={data.Q!r}, eps={data.eps!r}")
    return report


@dataclass(frozen=True, eq=False)
class TableLookup:
    """
    Interpolated tables at a batch of levels.

    B and dB have shape (r-1, *batch); extrapolated marks w > w_max.
    """

    phi: np.ndarray
    Phi: np.ndarray
    A: np.ndarray
    dA: np.ndarray
    B: np.ndarray
    dB: np.ndarray
    extrapolated: np.ndarray


def lookup(data, w):
    """
    Log-linear interpolation in log(w - Q) for phi, Phi, B_k; piecewise-linear
    A. Both extend linearly past the grid ends.
    """
    w = np.asarray(w, dtype=float)
    xs = data.log_offsets
    x = np.log(np.maximum(w - data.Q, np.finfo(float).tiny))
    i = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
    width = xs[i + 1] - xs[i]
    t = (x - xs[i]) / width

    def loglinear(table):
        lo, hi = np.log(table[..., i]), np.log(table[..., i + 1])
        return np.exp(lo + t * (hi - lo)), (hi - lo) / width

    phi, _ = loglinear(data.phi)
    Phi, _ = loglinear(data.Phi)
    B, log_slope = loglinear(data.B)
    dB = B * log_slope / (w - data.Q)
    slopes = data.A_slopes()
    dA = slopes[i]
    A = data.A[i] + dA * (w - data.levels[i])
    return TableLookup(phi=phi, Phi=Phi, A=A, dA=dA, B=B, dB=dB, extrapolated=w > data.w_max)


def _cutoff(data, w):
    """
    Smoothstep chi(w): 0 below Q + eps/2, 1 above Q + eps. Returns (chi, chi').
    """
    half = data.eps / 2.0
    t = np.clip((w - data.Q - half) / half, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t) / half


def _assemble_sharp(data, values):
    """
    W# and L_F W# from W and its Lie derivatives up to order r+1.
    """
    r = data.r
    w = values[0]
    tables = lookup(data, np.where(w > data.Q, w, data.Q + data.eps / 2.0))
    if np.any(tables.extrapolated):
        logger.warning("Extrapolating Matrosov tables above w_max=%r for %d state(s)", data.w_max, int(np.sum(tables.extrapolated)))

    correction = np.zeros_like(w)
    lie_correction = np.zeros_like(w)
    for k in range(2, r + 1):
        B, dB = tables.B[k - 2], tables.dB[k - 2]
        pair = values[k - 1] * values[k]
        correction = correction + B * pair
        if values.shape[0] > r + 1:
            lie_pair = values[k] ** 2 + values[k - 1] * values[k + 1]
            lie_correction = lie_correction + dB * values[1] * pair + B * lie_pair
    inner = tables.A - correction
    lie_inner = tables.dA * values[1] - lie_correction

    chi, dchi = _cutoff(data, w)
    sharp = np.where(w > data.Q, chi * inner, 0.0)
    lie_sharp = np.where(w > data.Q, dchi * values[1] * inner + chi * lie_inner, 0.0)
    return sharp, lie_sharp, tables


def eval_Wsharp(spec, data, s):
    """
    W#(s); zero where W(s) <= Q.
    """
    _require_oscillator(spec)
    values = _lie_table(spec, s, data.r)
    return _assemble_sharp(data, values)[0]


def lie_Wsharp(spec, data, s):
    """
    L_F W#(s) from the jet values L^k W, k <= r+1, and the analytic
    derivatives of the interpolated tables.
    """
    _require_oscillator(spec)
    values = _lie_table(spec, s, data.r + 1)
    return _assemble_sharp(data, values)[1]


class CertReport(CheckReport):
    """
    Strictness of W#, the envelope hypotheses and properness on fresh samples.
    """

    def __init__(self, r, samples):
        super().__init__(title=f"certify-strictness r={r}", samples=samples)
        self.r = r
        self.failures = []


def certify_strictness(spec, data, budget, *, rng, failure_limit=20):
    """
    Check L_F W# <= -phi(W)/4 on fresh states with W in (Q + eps, w_max].

    Returns:
        CertReport; FAIL when the conclusion or an envelope hypothesis fails
        on some sample.
    """
    _require_oscillator(spec)
    sampler = LevelSampler(spec, rng)
    targets = data.Q + log_uniform(rng, data.eps, data.w_max - data.Q, budget)
    s, ok = sampler.sample(targets)
    targets = targets[ok]
    inside = targets > data.Q + data.eps
    s, targets = State(p=s.p[:, inside], q=s.q[:, inside]), targets[inside]
    logger.info("Certifying strictness on %d states", targets.size)

    values = _lie_table(spec, s, data.r + 1)
    sharp, lie_sharp, tables = _assemble_sharp(data, values)
    report = CertReport(data.r, int(targets.size))

    excess = lie_sharp + tables.phi / 4.0
    worst = float(np.max(excess)) if excess.size else -math.inf
    report.add("max(L_F W# + phi(W)/4)", worst, 0.0, worst <= 0.0)

    lower, upper = envelope_terms(values, data.r)
    below = lower < tables.phi
    above = upper > tables.Phi
    report.add("lower envelope violations", int(np.sum(below)), 0, not np.any(below))
    report.add("upper envelope violations", int(np.sum(above)), 0, not np.any(above))

    proper = sharp - (values[0] - data.Q - data.eps)
    report.add("min(W# - (W - Q - eps))", float(np.min(proper)) if proper.size else 0.0, 0.0, not np.any(proper < 0.0))
    report.add("B_k closed form vs recursion", data.b_consistency, B_CONSISTENCY_TOL, data.b_consistency <= B_CONSISTENCY_TOL)

    failing = np.flatnonzero((excess > 0.0) | below | above)
    for index in failing[:failure_limit]:
        report.failures.append(state_hash(s.p[:, index], s.q[:, index]))
    if failing.size:
        report.note(f"{failing.size} failing state(s): {', '.join(report.failures)}")
    report.note("envelopes are sampled; a pass is statistical evidence, not a proof")
    if not report.passed:
        logger.warning("Strictness certification failed on %d state(s)", failing.size)
    return report


def _table_columns(r):
    return ("w", "m", "M", "phi", "Phi", "clamped", "A") + tuple(f"B_{k}" for k in range(2, r + 1))


def save_matrosov(data, directory):
    """
    Write the header (JSON) and the tables (CSV) into a directory.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "r": data.r,
        "Q": data.Q,
        "eps": data.eps,
        "observable": data.observable,
        "levels": len(data.levels),
        "b_consistency": data.b_consistency,
    }
    (directory / HEADER_FILE).write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    lines = [",".join(_table_columns(data.r))]
    for i in range(len(data.levels)):
        row = (data.levels[i], data.m[i], data.M[i], data.phi[i], data.Phi[i], bool(data.clamped[i]), data.A[i])
        row = row + tuple(data.B[:, i])
        lines.append(",".join(format_cell(value) for value in row))
    (directory / TABLE_FILE).write_text("# matrosov tables\n" + "\n".join(lines) + "\n", encoding="utf-8")
    return directory


def load_matrosov(directory):
    """
    Read tables written by save_matrosov.

    Raises:
        ImproperlyConfigured: Unknown format, version or column layout.
    """
    directory = Path(directory)
    header = json.loads((directory / HEADER_FILE).read_text(encoding="utf-8"))
    if header.get("format") != FORMAT_NAME:
        raise ImproperlyConfigured(f"not a Matrosov table: {header.get('format')!r}", field="matrosov.format")
    if header.get("version") != FORMAT_VERSION:
        raise ImproperlyConfigured(f"unsupported version {header.get('version')!r}", field="matrosov.version")
    r = int(header["r"])
    _, columns, rows = read_csv(directory / TABLE_FILE)
    if columns != _table_columns(r):
        raise ImproperlyConfigured(f"unexpected columns {columns!r}", field="matrosov.columns")
    if len(rows) != header["levels"]:
        raise ImproperlyConfigured(f"expected {header['levels']} levels, found {len(rows)}", field="matrosov.levels")

    def column(name):
        return np.array([float(row[columns.index(name)]) for row in rows])

    return MatrosovData(
        r=r,
        Q=float(header["Q"]),
        eps=float(header["eps"]),
        levels=column("w"),
        phi=column("phi"),
        Phi=column("Phi"),
        B=np.stack([column(f"B_{k}") for k in range(2, r + 1)]),
        A=column("A"),
        m=column("m"),
        M=column("M"),
        clamped=np.array([row[columns.index("clamped")] == "true" for row in rows]),
        b_consistency=float(header["b_consistency"]),
        observable=header.get("observable", "H"),
    )
