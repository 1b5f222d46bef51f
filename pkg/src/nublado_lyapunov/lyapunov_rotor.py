"""
The explicit Lyapunov function of a damped rotator chain

    W = a_0 H^g0 - sum_{j=1}^{N-1} (a_{2j-1} H^alpha_{2j-1} p_j xi_j
                                    + a_{2j} H^alpha_{2j} xi_j L_F xi_j)

with g0 = 2N - 1 and alpha_k = 2(N - 1) - k, its coefficient calibration and
the empirical checks of L_F W <= -H + C1.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from nublado_lyapunov.chain import ChainKind, dissipation, energy, lie_xi, vector_field, xi
from nublado_lyapunov.conf.app_settings import app_settings
from nublado_lyapunov.exceptions import CalibrationFailed
from nublado_lyapunov.fits import nonincreasing_trend
from nublado_lyapunov.jets import directional_jet, energy_jet, lie_derivatives, lie_xi_jet, observable_jet, xi_jet
from nublado_lyapunov.reports import CheckReport
from nublado_lyapunov.sampling import energy_tiers, map_batched, states_at_energy, tiered_energies

logger = logging.getLogger(__name__)

DUAL_PATH_TOL = 1e-10
XIDOT_TOL = 1e-12


@dataclass(frozen=True)
class LyapCoeffs:
    """
    Coefficients a_0..a_{2N-2} of W plus the calibrated constants.

    Out-of-range coefficients follow the conventions a_{2N-1} = a_{2N} = 0
    and Gamma_N = 0; out-of-range exponents are -inf (H^-inf = 0).
    """

    a: tuple
    h0: float = 1.0
    C1: float = math.nan

    def __post_init__(self):
        a = tuple(float(v) for v in self.a)
        if len(a) < 3 or len(a) % 2 == 0:
            raise ValueError(f"Expected 2N-1 >= 3 coefficients, got {len(a)}.")
        if not all(math.isfinite(v) and v > 0.0 for v in a):
            raise ValueError("Lyapunov coefficients must be finite and positive.")
        object.__setattr__(self, "a", a)

    @classmethod
    def ladder(cls, N, *, seed=None, kappa=None):
        """
        Coefficients built downward from a_{2N-2} = seed.
        """
        seed = app_settings.COEFF_SEED if seed is None else seed
        a = [1.0] * (2 * N - 1)
        a[-1] = float(seed)
        return cls(a=enforce_ladder(a, kappa))

    @property
    def N(self):
        return (len(self.a) + 1) // 2

    @property
    def gamma0(self):
        return 2 * self.N - 1

    def alpha(self, k):
        if 1 <= k <= 2 * self.N - 2:
            return 2 * (self.N - 1) - k
        return None

    @property
    def alphas(self):
        return tuple(self.alpha(k) for k in range(1, 2 * self.N - 1))

    def coeff(self, k):
        return self.a[k] if 0 <= k <= 2 * self.N - 2 else 0.0

    def Gamma(self, j):
        if j == self.N:
            return 0.0
        return 2.0 * self.a[2 * j - 1] / self.a[2 * j]

    @property
    def Gammas(self):
        return tuple(self.Gamma(j) for j in range(1, self.N))

    def violations(self):
        """
        Broken coefficient invariants, as messages.
        """
        messages = [f"a_{k} = {v!r} < 1" for k, v in enumerate(self.a) if v < 1.0]
        for j in range(1, self.N):
            if self.a[2 * j - 1] < 2.0 * self.a[2 * j]:
                messages.append(f"a_{2 * j - 1} < 2 a_{2 * j}")
        return messages

    def to_dict(self):
        return {"N": self.N, "a": list(self.a), "h0": self.h0, "C1": self.C1}

    @classmethod
    def from_dict(cls, data):
        coeffs = cls(a=tuple(data["a"]), h0=data.get("h0", 1.0), C1=data.get("C1", math.nan))
        if "N" in data and data["N"] != coeffs.N:
            raise ValueError(f"Coefficient count does not match N={data['N']}.")
        return coeffs


def enforce_ladder(a, kappa=None):
    """
    Raise coefficients until, for j = N-1 down to 1,

        a_{2j-1} >= max(2 a_{2j}, kappa (a_{2j+1} + a_{2j}^2))
        a_{2j-2} >= kappa a_{2j-1}^2 / a_{2j}

    with a_{2N-1} = 0. Coefficients are never lowered.
    """
    kappa = app_settings.KAPPA if kappa is None else kappa
    a = [max(1.0, float(v)) for v in a]
    N = (len(a) + 1) // 2
    for j in range(N - 1, 0, -1):
        upper = a[2 * j + 1] if 2 * j + 1 < len(a) else 0.0
        a[2 * j - 1] = max(a[2 * j - 1], 2.0 * a[2 * j], kappa * (upper + a[2 * j] ** 2))
        a[2 * j - 2] = max(a[2 * j - 2], kappa * a[2 * j - 1] ** 2 / a[2 * j])
    return tuple(a)


def _require_rotator(spec, coeffs):
    if spec.kind is not ChainKind.ROTATOR:
        raise ValueError("The rotator Lyapunov function needs a rotator chain.")
    if coeffs.N != spec.N:
        raise ValueError(f"Coefficients are for N={coeffs.N}, chain has N={spec.N}.")


def _hpow(H, exponent):
    if exponent is None:
        return np.zeros_like(H)
    return H**exponent


def eval_W(spec, coeffs, s):
    """
    W at s from the closed forms of H, xi_j and L_F xi_j.
    """
    _require_rotator(spec, coeffs)
    H = energy(spec, s)
    W = coeffs.a[0] * H**coeffs.gamma0
    for j in range(1, spec.N):
        xi_j = xi(spec, s, j)
        W = W - (
            coeffs.a[2 * j - 1] * H ** coeffs.alpha(2 * j - 1) * s.p[j - 1] * xi_j
            + coeffs.a[2 * j] * H ** coeffs.alpha(2 * j) * xi_j * lie_xi(spec, s, j)
        )
    return W


def W_jet(spec, coeffs, sj):
    """
    W evaluated on coordinate jets.
    """
    _require_rotator(spec, coeffs)
    H = energy_jet(spec, sj)
    W = H**coeffs.gamma0 * coeffs.a[0]
    for j in range(1, spec.N):
        xi_j = xi_jet(spec, sj, j)
        W = W - (
            H ** coeffs.alpha(2 * j - 1) * sj.p_jet(j) * xi_j * coeffs.a[2 * j - 1]
            + H ** coeffs.alpha(2 * j) * xi_j * lie_xi_jet(spec, sj, j) * coeffs.a[2 * j]
        )
    return W


def lie_W(spec, coeffs, s):
    """
    L_F W at s through the jet engine.
    """
    _require_rotator(spec, coeffs)
    return lie_derivatives(spec, s, "W", 1, coeffs=coeffs)[1]


def lie_W_expanded(spec, coeffs, s):
    """
    L_F W from the hand-expanded formula, for any damping mask.

    With D = sum of damped p_j^2 (so L_F H = -D) and
    L_F p_j = -gamma_j p_j - xi_{j-1} + xi_j:

        L_F W = -a_0 g0 H^(g0-1) D
                - sum_j a_{2j-1} (-alpha H^(alpha-1) D p_j xi_j
                                  + H^alpha (xi_j L_F p_j + p_j L_F xi_j))
                - sum_j a_{2j} (-beta H^(beta-1) D xi_j L_F xi_j
                                + H^beta ((L_F xi_j)^2 + xi_j L_F^2 xi_j))

    Returns:
        (value, scale) where scale is the sum of absolute values of the terms.
    """
    _require_rotator(spec, coeffs)
    N = spec.N
    H = energy(spec, s)
    D = -dissipation(spec, s)
    dp = vector_field(spec, s).dp
    g0 = coeffs.gamma0

    terms = [-coeffs.a[0] * g0 * H ** (g0 - 1) * D]
    for j in range(1, N):
        A, alpha = coeffs.a[2 * j - 1], coeffs.alpha(2 * j - 1)
        B, beta = coeffs.a[2 * j], coeffs.alpha(2 * j)
        pot = spec.interaction[j - 1]
        d = s.q[j - 1] - s.q[j]
        p_j, p_next = s.p[j - 1], s.p[j]
        xi_j = xi(spec, s, j)
        lxi_j = lie_xi(spec, s, j)
        llxi_j = -((p_j - p_next) ** 2) * pot.eval_deriv(d, 3) - (dp[j - 1] - dp[j]) * pot.eval_deriv(d, 2)

        terms.append(A * alpha * H ** (alpha - 1) * D * p_j * xi_j)
        terms.append(-A * H**alpha * xi_j * dp[j - 1])
        terms.append(-A * H**alpha * p_j * lxi_j)
        if beta:
            terms.append(B * beta * H ** (beta - 1) * D * xi_j * lxi_j)
        terms.append(-B * H**beta * lxi_j**2)
        terms.append(-B * H**beta * xi_j * llxi_j)

    value = sum(terms)
    scale = sum(np.abs(term) for term in terms)
    return value, scale


def generator_hessian_p(spec, s, f, j, *, coeffs=None):
    """
    d^2 f / dp_j^2 at s, read off a directional jet.
    """
    sj = directional_jet(s, j, order=2)
    return observable_jet(spec, sj, f, coeffs=coeffs).derivatives()[2]


@dataclass(frozen=True, eq=False)
class ProofTerms:
    """
    Audit quantities of the decomposition L_F W <= -(I_p1 + I_xi + I_xidot + I_p).

    Per-bond arrays have a leading axis of length N-1; `I_p` runs over
    particles 2..N.
    """

    H: np.ndarray
    p1_sq: np.ndarray
    I_p1: np.ndarray
    p1_floor: np.ndarray
    I_xi: np.ndarray
    I_xidot_left: np.ndarray
    I_xidot_right: np.ndarray
    I_p: np.ndarray

    @property
    def I_xidot(self):
        return self.I_xidot_left - self.I_xidot_right

    @property
    def I_xi_total(self):
        return np.sum(self.I_xi, axis=0)

    @property
    def I_p_total(self):
        return np.sum(self.I_p, axis=0)


def proof_terms(spec, coeffs, s, *, C=None):
    """
    Evaluate the decomposition terms with the audit constant C.

    I_xidot is returned as its two parts, whose difference vanishes when
    Gamma_j = 2 a_{2j-1} / a_{2j}.
    """
    _require_rotator(spec, coeffs)
    C = app_settings.AUDIT_C if C is None else C
    N = spec.N
    a, alpha = coeffs.coeff, coeffs.alpha
    H = energy(spec, s)
    p1_sq = s.p[0] ** 2

    def hp(k, offset=0.0):
        exponent = alpha(k)
        return _hpow(H, None if exponent is None else exponent + offset)

    correction = sum(
        a(2 * j - 1) * alpha(2 * j - 1) * hp(2 * j - 1, -0.5) + a(2 * j) * alpha(2 * j) * hp(2 * j, -0.5)
        for j in range(1, N)
    )
    I_p1 = p1_sq * (
        a(0) * coeffs.gamma0 * H ** (coeffs.gamma0 - 1)
        - C * correction
        - a(1) * hp(1)
        - coeffs.Gamma(1) * a(1) * hp(1, 1.0)
        - C * hp(2, -1.0) * (p1_sq + 1.0)
        - C * a(2) * hp(2)
    )
    p1_floor = H ** (coeffs.gamma0 - 1) * p1_sq / 2.0

    I_xi, left, right = [], [], []
    for j in range(1, N):
        xi_j = xi(spec, s, j)
        lxi_j = lie_xi(spec, s, j)
        I_xi.append(
            xi_j**2
            * (
                a(2 * j - 1) / 4.0 * hp(2 * j - 1)
                - a(2 * j + 1) * hp(2 * j + 1)
                - a(2 * j) ** 2 * hp(2 * j, 1.0)
                - C * (hp(2 * j - 2, -1.0) + hp(2 * j, -1.0) + hp(2 * j + 2, -1.0))
            )
        )
        left.append(lxi_j**2 * a(2 * j) / 2.0 * hp(2 * j))
        right.append(lxi_j**2 / coeffs.Gamma(j) * a(2 * j - 1) * hp(2 * j - 1, -1.0))

    I_p = []
    for j in range(2, N + 1):
        p_sq = s.p[j - 1] ** 2
        I_p.append(
            p_sq
            * (
                a(2 * j - 2) * hp(2 * j - 2) / C
                - coeffs.Gamma(j) * a(2 * j - 1) * hp(2 * j - 1, 1.0)
                - C * p_sq * (hp(2 * j - 2, -1.0) + hp(2 * j, -1.0))
            )
        )

    return ProofTerms(
        H=H,
        p1_sq=p1_sq,
        I_p1=I_p1,
        p1_floor=p1_floor,
        I_xi=np.array(I_xi),
        I_xidot_left=np.array(left),
        I_xidot_right=np.array(right),
        I_p=np.array(I_p),
    )


def potential_sup(spec):
    """
    Upper bound of the total potential energy (sum of sup V_j).
    """
    return sum(pot.poly[0] + pot.shift + pot.trig_bound(0) for pot in spec.interaction)


@dataclass(frozen=True)
class CalibConfig:
    """
    Calibration budget; None falls back to the lab settings.
    """

    samples: int | None = None
    h_lo: float = 10.0
    h_hi: float = 1.0e4
    growth_factor: float | None = None
    max_rounds: int | None = None
    seed_coeff: float | None = None
    kappa: float | None = None
    tiers_per_decade: int | None = None
    fixed_coeffs: tuple | None = None
    split: str = "sphere"


@dataclass(frozen=True)
class RoundRecord:
    round: int
    a: tuple
    tier_edges: tuple
    tier_max: tuple
    tier_counts: tuple
    slope: float
    slope_upper: float
    passed: bool
    grown: int | None = None


@dataclass
class CalibrationReport:
    """
    Per-round, per-tier maxima of L_F W + H and the slope test outcome.
    """

    N: int
    rounds: list = field(default_factory=list)
    coeffs: LyapCoeffs | None = None
    C1_sampled: float = math.nan
    passed: bool = False

    columns = ("round", "tier_lo", "tier_hi", "samples", "max_lie_W_plus_H", "slope", "slope_upper", "passed", "a")

    def rows(self):
        for record in self.rounds:
            a = " ".join(repr(v) for v in record.a)
            for t, (count, value) in enumerate(zip(record.tier_counts, record.tier_max)):
                yield (
                    record.round,
                    record.tier_edges[t],
                    record.tier_edges[t + 1],
                    count,
                    value,
                    record.slope,
                    record.slope_upper,
                    record.passed,
                    a,
                )

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        lines = [f"calibrate N={self.N}: {status} after {len(self.rounds)} round(s)"]
        if self.coeffs is not None:
            lines.append(f"  a = {list(self.coeffs.a)!r}")
            lines.append(f"  C1 = {self.coeffs.C1!r} (sampled max {self.C1_sampled!r}), h0 = {self.coeffs.h0!r}")
        return "\n".join(lines)


def _lie_W_plus_H(spec, coeffs):
    def evaluate(part):
        return lie_W(spec, coeffs, part) + energy(spec, part)

    return evaluate


def _tier_maxima(values, tier_index, tiers):
    maxima = np.full(tiers, -np.inf)
    counts = np.zeros(tiers, dtype=int)
    for t in range(tiers):
        selected = values[tier_index == t]
        counts[t] = selected.size
        if selected.size:
            maxima[t] = float(np.max(selected))
    return maxima, counts


def _growth_index(spec, coeffs, state):
    """
    The coefficient whose audit term is most negative at the worst state.
    """
    terms = proof_terms(spec, coeffs, state)
    candidates = [(float(terms.I_p1 - terms.p1_floor), 0)]
    candidates += [(float(terms.I_xi[j - 1]), 2 * j - 1) for j in range(1, spec.N)]
    candidates += [(float(terms.I_p[j - 2]), 2 * j - 2) for j in range(2, spec.N + 1)]
    value, index = min(candidates)
    return index if value < 0.0 else 2 * spec.N - 2


def _sandwich_floor(coeffs, H, W):
    ratio = W / (coeffs.a[0] * H**coeffs.gamma0)
    bad = (ratio < 0.5) | (ratio > 2.0)
    return max(1.0, 2.0 * float(np.max(H[bad]))) if np.any(bad) else 1.0


def calibrate_coeffs(spec, config=None, *, rng):
    """
    Search coefficients for which L_F W + H stays bounded above.

    Starting from the ladder (or `config.fixed_coeffs`), each round samples
    log-tiered energies in [h_lo, h_hi], evaluates L_F W + H and tests
    that the per-tier maxima do not grow with log H. On failure the
    coefficient with the most negative audit term at the worst state is
    multiplied by the growth factor and the ladder is re-enforced.

    Returns:
        (LyapCoeffs, CalibrationReport); C1 is the sampled maximum inflated
        by C1_MARGIN, h0 the energy above which the sandwich holds.

    Raises:
        CalibrationFailed: The slope test still fails after max_rounds.
    """
    if spec.kind is not ChainKind.ROTATOR:
        raise ValueError("Calibration needs a rotator chain.")
    config = config or CalibConfig()
    samples = config.samples or app_settings.CALIBRATION_SAMPLES
    growth = config.growth_factor or app_settings.GROWTH_FACTOR
    max_rounds = app_settings.MAX_ROUNDS if config.max_rounds is None else config.max_rounds
    kappa = config.kappa or app_settings.KAPPA

    if config.fixed_coeffs is not None:
        coeffs = LyapCoeffs(a=tuple(config.fixed_coeffs))
        if coeffs.N != spec.N:
            raise ValueError(f"fixed_coeffs needs {2 * spec.N - 1} entries.")
    else:
        coeffs = LyapCoeffs.ladder(spec.N, seed=config.seed_coeff, kappa=kappa)

    edges = energy_tiers(config.h_lo, config.h_hi, config.tiers_per_decade)
    energies, tier_index = tiered_energies(rng, edges, samples)
    states = states_at_energy(spec, energies, rng, split=config.split)
    H = energy(spec, states)
    centers = np.log10(np.sqrt(edges[:-1] * edges[1:]))

    report = CalibrationReport(N=spec.N)
    for round_ in range(max_rounds + 1):
        values = map_batched(_lie_W_plus_H(spec, coeffs), states)
        maxima, counts = _tier_maxima(values, tier_index, len(edges) - 1)
        passed, fit = nonincreasing_trend(centers, maxima)
        record = RoundRecord(
            round=round_,
            a=coeffs.a,
            tier_edges=tuple(edges),
            tier_max=tuple(maxima),
            tier_counts=tuple(counts),
            slope=math.nan if fit is None else fit.slope,
            slope_upper=math.nan if fit is None else fit.upper,
            passed=passed,
        )
        logger.info("Calibration round %d: slope upper bound %r", round_, record.slope_upper)
        worst = int(np.argmax(values))

        if passed:
            report.rounds.append(record)
            C1_sampled = float(np.max(values))
            W = eval_W(spec, coeffs, states)
            coeffs = dataclasses.replace(
                coeffs,
                C1=C1_sampled + app_settings.C1_MARGIN * (1.0 + abs(C1_sampled)),
                h0=_sandwich_floor(coeffs, H, W),
            )
            report.coeffs = coeffs
            report.C1_sampled = C1_sampled
            report.passed = True
            return coeffs, report

        if round_ == max_rounds:
            report.rounds.append(record)
            break
        index = _growth_index(spec, coeffs, states.take(worst))
        report.rounds.append(dataclasses.replace(record, grown=index))
        a = list(coeffs.a)
        a[index] *= growth
        coeffs = LyapCoeffs(a=enforce_ladder(a, kappa))
        logger.info("Grew a_%d by %r", index, growth)

    worst_state = states.take(worst)
    logger.warning("Calibration failed after %d round(s)", len(report.rounds))
    raise CalibrationFailed(
        f"L_F W + H still grows with H after {len(report.rounds)} round(s); "
        f"worst value {float(values[worst])!r} at H={float(H[worst])!r}",
        report=report,
        worst_state=worst_state,
    )


class VerificationReport(CheckReport):
    """
    Named checks of the dissipation inequality, the sandwich, the proof
    audits and the dual-path agreement on a fresh sample.
    """

    def __init__(self, N, samples):
        super().__init__(title=f"verify-lyapunov N={N}", samples=samples)
        self.N = N


def verify_theorem(spec, coeffs, budget, *, rng, h_lo=10.0, h_hi=1.0e4, split="simplex", tiers_per_decade=None):
    """
    Check calibrated coefficients on fresh states.

    Args:
        spec: Rotator ChainSpec.
        coeffs: Calibrated LyapCoeffs (C1 and h0 set).
        budget: Number of fresh states.
        rng: numpy Generator.

    Returns:
        VerificationReport (never raises on a failed check).
    """
    _require_rotator(spec, coeffs)
    edges = energy_tiers(h_lo, h_hi, tiers_per_decade)
    energies, tier_index = tiered_energies(rng, edges, budget)
    s = states_at_energy(spec, energies, rng, split=split)
    N = spec.N
    H = energy(spec, s)
    W = eval_W(spec, coeffs, s)

    def evaluate(part):
        value, scale = lie_W_expanded(spec, coeffs, part)
        return lie_W(spec, coeffs, part), value, scale

    lw, lw_expanded, scale = map_batched(evaluate, s)
    report = VerificationReport(N=N, samples=int(H.size))

    dissipation_excess = lw + H
    report.add("max(L_F W + H)", np.max(dissipation_excess), coeffs.C1, np.max(dissipation_excess) <= coeffs.C1)
    centers = np.log10(np.sqrt(edges[:-1] * edges[1:]))
    maxima, _ = _tier_maxima(dissipation_excess, tier_index, len(edges) - 1)
    trend_ok, fit = nonincreasing_trend(centers, maxima)
    report.add("tier max slope upper 95%", math.nan if fit is None else fit.upper, 0.0, trend_ok)

    ratio = W / (coeffs.a[0] * H**coeffs.gamma0)
    above = H >= coeffs.h0
    violations = int(np.sum(((ratio < 0.5) | (ratio > 2.0)) & above))
    report.add("sandwich violations (H >= h0)", violations, 0, violations == 0)
    sandwich_C = float(np.max(np.abs(ratio[above] - 1.0) * H[above] ** 1.5)) if np.any(above) else 0.0
    report.add("sandwich C in 1 +- C H^-3/2", sandwich_C, math.inf)

    implied_C2 = (2.0 * coeffs.a[0]) ** (-1.0 / coeffs.gamma0)
    usable = above & (W > 0.0)
    empirical_C2 = float(np.min((coeffs.C1 - lw[usable]) / W[usable] ** (1.0 / coeffs.gamma0))) if np.any(usable) else math.inf
    report.add("C2 empirical", empirical_C2, implied_C2, empirical_C2 >= implied_C2)

    terms = proof_terms(spec, coeffs, s)
    left, right = terms.I_xidot_left, terms.I_xidot_right
    relative = np.abs(left - right) / np.maximum(np.abs(left) + np.abs(right), np.finfo(float).tiny)
    report.add("I_xidot relative", np.max(relative), XIDOT_TOL, np.max(relative) <= XIDOT_TOL)
    report.add("min I_xi", np.min(terms.I_xi), 0.0, np.min(terms.I_xi) >= 0.0)
    ip_constant = float(np.max(H - terms.p1_sq / 2.0 - terms.I_p_total))
    ip_bound = potential_sup(spec) + app_settings.AUDIT_C
    report.add("I_p constant in I_p >= H - C - p1^2/2", ip_constant, ip_bound, ip_constant <= ip_bound)
    if np.any(above):
        margin = float(np.min((terms.I_p1 - terms.p1_floor)[above]))
        report.add("min I_p1 - H^(g0-1) p1^2/2 (H >= h0)", margin, 0.0, margin >= 0.0)

    sqrt_H = np.sqrt(H)
    pxi = max(float(np.max(np.abs(s.p[j - 1] * xi(spec, s, j)) / sqrt_H)) for j in range(1, N))
    xilxi = max(float(np.max(np.abs(xi(spec, s, j) * lie_xi(spec, s, j)) / sqrt_H)) for j in range(1, N))
    report.add("max |p_j xi_j| / sqrt(H)", pxi, math.inf)
    report.add("max |xi_j L_F xi_j| / sqrt(H)", xilxi, math.inf)

    discrepancy = float(np.max(np.abs(lw - lw_expanded) / np.maximum(scale, np.finfo(float).tiny)))
    report.add("dual-path discrepancy", discrepancy, DUAL_PATH_TOL, discrepancy <= DUAL_PATH_TOL)

    if not report.passed:
        logger.warning("Verification failed: %s", ", ".join(c.name for c in report.checks if not c.passed))
    return report
