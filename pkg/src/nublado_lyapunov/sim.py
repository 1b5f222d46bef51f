"""
Time integration of damped chains, their Langevin counterparts, and the
experiments built on trajectories: the generator check and the energy decay
scan.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate as scipy_integrate

from nublado_lyapunov.chain import State, energy, forces
from nublado_lyapunov.conf.app_settings import app_settings
from nublado_lyapunov.exceptions import StepUnderflow, WindowEmpty
from nublado_lyapunov.fits import fit_slope
from nublado_lyapunov.jets import Observable, lie_derivatives
from nublado_lyapunov.lyapunov_rotor import eval_W, generator_hessian_p
from nublado_lyapunov.sampling import states_at_energy

logger = logging.getLogger(__name__)

STEP_FLOOR = 1e-14
MONOTONE_SLACK = 1e-8
LEDGER_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    """
    Sampled energies along one trajectory, or an ensemble of them.

    For ensembles H, W and dissipated carry a leading member axis and
    `final` is batched.

    Attributes:
        dissipated: Running integral of the damped p_j^2.
        partial: The run stopped at the wall-clock cap before t_end.
    """

    times: np.ndarray
    H: np.ndarray
    dissipated: np.ndarray
    final: State
    W: np.ndarray | None = None
    seed: object = None
    partial: bool = False
    stochastic: bool = False
    meta: dict = field(default_factory=dict)

    columns = ("t", "H", "W", "ledger")

    @property
    def ledger(self):
        """
        H(0) - H(t) - int sum_damped p_j^2, zero for exact deterministic flows.
        """
        H0 = self.H[..., :1]
        return H0 - self.H - self.dissipated

    @property
    def ledger_error(self):
        scale = max(float(np.max(np.abs(self.dissipated))), np.finfo(float).tiny)
        return float(np.max(np.abs(self.ledger))) / scale

    def is_monotone(self, slack=MONOTONE_SLACK):
        steps = np.diff(self.H, axis=-1)
        return bool(np.all(steps <= slack * np.maximum(np.abs(self.H[..., :-1]), 1.0)))

    @property
    def passed(self):
        if self.stochastic:
            return bool(np.all(np.isfinite(self.H)))
        return self.is_monotone() and self.ledger_error <= LEDGER_TOL

    def rows(self):
        H = self.H if self.H.ndim == 1 else self.H.mean(axis=0)
        ledger = self.ledger if self.H.ndim == 1 else self.ledger.mean(axis=0)
        W = self.W
        if W is not None and W.ndim > 1:
            W = W.mean(axis=0)
        for i, t in enumerate(self.times):
            yield (t, H[i], None if W is None else W[i], ledger[i])

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        kind = "simulate-sde" if self.stochastic else "simulate"
        lines = [f"{kind} to t={float(self.times[-1])!r}: {status}"]
        if self.H.ndim > 1:
            lines.append(f"  ensemble of {self.H.shape[0]} trajectories, seed {self.seed!r}")
        lines.append(f"  H: {float(np.mean(self.H[..., 0]))!r} -> {float(np.mean(self.H[..., -1]))!r}")
        if not self.stochastic:
            lines.append(f"  monotone: {self.is_monotone()}, ledger relative error {self.ledger_error!r}")
        if self.partial:
            lines.append("  stopped at the wall-clock cap")
        return "\n".join(lines)


def integrate_field(fun, y0, t_end, tol, *, sample_times=None, method=None, t_start=0.0, horizon=None):
    """
    Integrate y' = fun(t, y) with an embedded Runge-Kutta pair.

    Returns:
        (times, Y) with Y of shape (dim, len(times)).

    Raises:
        StepUnderflow: The accepted step fell below 1e-14 * horizon (the
            full run length, t_end by default), or the solver gave up.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive.")
    method = method or app_settings.INTEGRATOR_METHOD
    y0 = np.asarray(y0, dtype=float)
    times = np.asarray([t_end] if sample_times is None else sample_times, dtype=float)
    if t_end == t_start:
        return times, np.repeat(y0[:, None], times.size, axis=1)
    solution = scipy_integrate.solve_ivp(
        fun, (t_start, t_end), y0, method=method, rtol=tol, atol=tol, dense_output=True
    )
    if solution.status < 0:
        raise StepUnderflow(solution.message)
    steps = np.diff(solution.t)
    horizon = t_end if horizon is None else horizon
    if steps.size > 1 and np.min(steps[:-1]) < STEP_FLOOR * abs(horizon):
        raise StepUnderflow(f"Step size {float(np.min(steps[:-1]))!r} below {STEP_FLOOR} * {horizon!r}")
    return times, solution.sol(times)


def _augmented_field(spec):
    N = spec.N
    damping = spec.damping

    def fun(t, y):
        q, p = y[:N], y[N : 2 * N]
        dp = -damping * p + forces(spec, q)
        return np.concatenate([p, dp, [np.sum(damping * p**2)]])

    return fun


def integrate(spec, s0, t_end, tol=1e-10, *, sample_times=None, coeffs=None, wall_clock=None, method=None):
    """
    Integrate the damped flow from a single state.

    Sample times are visited segment by segment so that a wall-clock cap
    (seconds) can stop the run early; the record is then marked partial.

    Args:
        coeffs: LyapCoeffs; when given, W is recorded too (rotators).

    Returns:
        TrajectoryRecord including the energy ledger.
    """
    if t_end < 0.0:
        raise ValueError("t_end must be non-negative.")
    times = np.unique(np.concatenate([[0.0], np.linspace(0.0, t_end, 101) if sample_times is None else sample_times]))
    times = times[(times >= 0.0) & (times <= t_end)]
    fun = _augmented_field(spec)
    y = np.concatenate([s0.q, s0.p, [0.0]])
    Y = [y]
    started = time.monotonic()
    partial = False
    for t_a, t_b in zip(times[:-1], times[1:]):
        _, values = integrate_field(fun, y, t_b, tol, method=method, t_start=t_a, horizon=t_end)
        y = values[:, -1]
        Y.append(y)
        if wall_clock is not None and time.monotonic() - started > wall_clock:
            partial = t_b < times[-1]
            if partial:
                logger.info("Wall-clock cap reached at t=%r of %r", t_b, t_end)
            break
    Y = np.stack(Y, axis=1)
    times = times[: Y.shape[1]]
    N = spec.N
    states = State(p=Y[N : 2 * N], q=Y[:N])
    W = eval_W(spec, coeffs, states) if coeffs is not None else None
    return TrajectoryRecord(
        times=times,
        H=energy(spec, states),
        dissipated=Y[2 * N],
        final=State.of(spec, Y[N : 2 * N, -1], Y[:N, -1]),
        W=W,
        partial=partial,
        meta={"method": method or app_settings.INTEGRATOR_METHOD, "tol": tol},
    )


def spawn_generators(seed, size):
    """
    Independent Generators from one SeedSequence.
    """
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(size)]


def _noise_block(generators, steps, N):
    return np.stack([rng.standard_normal((steps, N)) for rng in generators], axis=-1)


def integrate_sde(spec, s0, t_end, dt, seed, *, members=None, record_every=None, coeffs=None, block=1024):
    """
    Euler-Maruyama for the chain coupled to Langevin baths.

        dq = p dt,  dp = (-gamma p + forces) dt + sqrt(2 T) dB on damped sites

    Args:
        seed: Integer seed. With `members`, each trajectory gets its own
            stream spawned from it, so a member's path does not depend on the
            ensemble size.
        members: Ensemble size; None runs a single trajectory.
        record_every: Steps between records (default: about 100 records).

    Returns:
        TrajectoryRecord; ensemble arrays have a leading member axis.

    Raises:
        FloatingPointError: The state left the floating-point range.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive.")
    steps = int(round(t_end / dt))
    size = 1 if members is None else members
    generators = spawn_generators(seed, size)
    N = spec.N
    damping = spec.damping[:, None]
    amplitude = np.sqrt(2.0 * spec.temperature * dt)[:, None]
    record_every = record_every or max(1, steps // 100)

    p = np.repeat(np.asarray(s0.p, dtype=float)[:, None], size, axis=1)
    q = np.repeat(np.asarray(s0.q, dtype=float)[:, None], size, axis=1)
    dissipated = np.zeros(size)
    times, Hs, Ds, Ws = [], [], [], []

    def record(step):
        s = State(p=p, q=q)
        times.append(step * dt)
        Hs.append(energy(spec, s))
        Ds.append(dissipated.copy())
        if coeffs is not None:
            Ws.append(eval_W(spec, coeffs, s))

    record(0)
    for start in range(0, steps, block):
        noise = _noise_block(generators, min(block, steps - start), N)
        for offset in range(noise.shape[0]):
            dissipated = dissipated + dt * np.sum(damping * p**2, axis=0)
            p, q = p + dt * (-damping * p + forces(spec, q)) + amplitude * noise[offset], q + dt * p
            step = start + offset + 1
            if step % record_every == 0 or step == steps:
                record(step)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise FloatingPointError(f"Euler-Maruyama state overflowed before t={(start + block) * dt!r}")

    H = np.stack(Hs, axis=-1)
    D = np.stack(Ds, axis=-1)
    W = np.stack(Ws, axis=-1) if Ws else None
    if members is None:
        H, D, W = H[0], D[0], None if W is None else W[0]
        final = State.of(spec, p[:, 0], q[:, 0])
    else:
        final = State.of(spec, p, q)
    return TrajectoryRecord(
        times=np.array(times),
        H=H,
        dissipated=D,
        final=final,
        W=W,
        seed=seed,
        stochastic=True,
        meta={"method": "euler-maruyama", "dt": dt},
    )


def _evaluate(spec, f, s, coeffs):
    return lie_derivatives(spec, s, f, 0, coeffs=coeffs)[0]


def generator(spec, f, s, *, coeffs=None):
    """
    L f = L_F f + sum_j T_j d^2 f / dp_j^2 at a single state.
    """
    value = lie_derivatives(spec, s, f, 1, coeffs=coeffs)[1]
    for j, temperature in enumerate(spec.temperatures, start=1):
        if temperature:
            value = value + temperature * generator_hessian_p(spec, s, f, j, coeffs=coeffs)
    return value


@dataclass
class GenReport:
    """
    Monte-Carlo generator estimates against the analytic value.
    """

    observable: str
    analytic: float
    rows_: list = field(default_factory=list)
    fit: object = None
    linear: bool = False
    consistent: bool = False
    positive: bool | None = None
    decomposition: dict = field(default_factory=dict)

    columns = ("dt", "estimate", "analytic", "bias", "stderr")

    @property
    def passed(self):
        if self.positive is False:
            return False
        return self.linear and self.consistent

    def rows(self):
        for dt, estimate, stderr in self.rows_:
            yield (dt, estimate, self.analytic, estimate - self.analytic, stderr)

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        lines = [f"generator-check for {self.observable}: {status}", f"  analytic: {self.analytic!r}"]
        for dt, estimate, analytic, bias, stderr in self.rows():
            lines.append(f"  dt={dt!r}: estimate {estimate!r}, bias {bias!r} +- {stderr!r}")
        if self.fit is not None:
            lines.append(f"  bias slope {self.fit.slope!r}, R^2 {self.fit.r_squared!r}")
        if self.positive is not None:
            lines.append(f"  L W > 0: {self.positive}")
        for name, value in self.decomposition.items():
            lines.append(f"  {name}: {value!r}")
        return "\n".join(lines)


def generator_check(spec, f, s, dt_list, ensemble, *, seed, coeffs=None):
    """
    Compare (E f(X_dt) - f(s)) / dt over one Euler-Maruyama step with L f(s).

    Antithetic noise pairs and the same noise for every dt keep the
    estimates comparable across dt.

    Returns:
        GenReport; passes when the bias is linear in dt (R^2 >= 0.9, or
        indistinguishable from zero) and its dt -> 0 limit lies within three
        standard errors. For W (with coeffs) L W must also be positive.
    """
    f = Observable.coerce(f)
    dt_list = sorted(float(dt) for dt in dt_list)
    pairs = max(1, ensemble // 2)
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((spec.N, pairs))
    p0 = np.asarray(s.p, dtype=float)[:, None]
    q0 = np.asarray(s.q, dtype=float)[:, None]
    drift = -spec.damping[:, None] * p0 + forces(spec, q0)
    base = float(_evaluate(spec, f, State(p=p0, q=q0), coeffs)[0])
    analytic = float(generator(spec, f, s, coeffs=coeffs))
    report = GenReport(observable=str(f), analytic=analytic)

    for dt in dt_list:
        amplitude = np.sqrt(2.0 * spec.temperature * dt)[:, None]
        q1 = q0 + dt * p0
        values = [
            _evaluate(spec, f, State(p=p0 + dt * drift + sign * amplitude * xi, q=np.repeat(q1, pairs, axis=1)), coeffs)
            for sign in (1.0, -1.0)
        ]
        paired = 0.5 * (values[0] + values[1])
        estimate = (float(np.mean(paired)) - base) / dt
        stderr = float(np.std(paired, ddof=1)) / math.sqrt(pairs) / dt if pairs > 1 else 0.0
        report.rows_.append((dt, estimate, stderr))

    biases = np.array([estimate - analytic for _, estimate, _ in report.rows_])
    errors = np.array([stderr for _, _, stderr in report.rows_])
    if len(dt_list) >= 2:
        report.fit = fit_slope(dt_list, biases)
        flat = np.max(np.abs(biases)) <= 3.0 * np.max(errors)
        report.linear = bool(report.fit.r_squared >= 0.9 or flat)
        limit = abs(report.fit.intercept)
        slack = 0.1 * abs(report.fit.slope) * dt_list[0] + 1e-12 * (1.0 + abs(analytic))
        report.consistent = bool(limit <= 3.0 * errors[0] + slack)
    else:
        report.linear = True
        report.consistent = bool(abs(biases[0]) <= 3.0 * errors[0])

    if f.name == "W" and coeffs is not None:
        H = float(energy(spec, s))
        report.decomposition["L_F W"] = float(lie_derivatives(spec, s, f, 1, coeffs=coeffs)[1])
        for j, temperature in enumerate(spec.temperatures, start=1):
            if temperature:
                hessian = float(generator_hessian_p(spec, s, f, j, coeffs=coeffs))
                report.decomposition[f"T_{j} d2W/dp_{j}^2"] = temperature * hessian
        report.decomposition["a_0 g0 H^(g0-1)"] = coeffs.a[0] * coeffs.gamma0 * H ** (coeffs.gamma0 - 1)
        report.positive = analytic > 0.0
    return report


@dataclass(frozen=True)
class DecayProtocol:
    """
    Initial-condition families and run controls of a decay scan.

    Attributes:
        families: "fast" puts all kinetic energy on particle N, "spread"
            splits it uniformly at random.
        eps: Window constant; the window is [H0^(g0-5/2)/eps, eps H0^(g0-1)].
        wall_clock: Seconds per trajectory before the run is cut short.
    """

    families: tuple = ("fast", "spread")
    ensemble: int = 4
    eps: float | None = None
    tol: float = 1e-9
    window_points: int = 8
    wall_clock: float | None = None
    slope_margin: float = 0.4

    @property
    def window_eps(self):
        return app_settings.DECAY_EPS if self.eps is None else self.eps


def decay_window(H0, gamma0, eps):
    """
    The time window [H0^(g0-5/2) / eps, eps H0^(g0-1)] of the energy decay bound.

    Raises:
        WindowEmpty: The lower end is not below the upper end.
    """
    t_lo, t_hi = H0 ** (gamma0 - 2.5) / eps, eps * H0 ** (gamma0 - 1.0)
    if t_lo >= t_hi:
        raise WindowEmpty(H0, t_lo, t_hi)
    return t_lo, t_hi


@dataclass
class DecayRow:
    H0: float
    family: str
    status: str
    t_lo: float
    t_hi: float
    t_reached: float = math.nan
    rho: float = math.nan
    rho_scaled: float = math.nan
    in_window: bool = False
    W_monotone: bool | None = None
    W_constant: float = math.nan


@dataclass
class DecayReport:
    """
    Effective energy decay rates rho(H0) = (H0 - H_t)/t measured inside the
    decay window, and the one-sided bound rho >= C H0^-(2N-3).
    """

    N: int
    predicted_slope: float
    slope_margin: float
    rows_: list = field(default_factory=list)
    fit: object = None

    columns = (
        "H0",
        "family",
        "status",
        "t_lo",
        "t_hi",
        "t_reached",
        "rho",
        "rho_H0^(2N-3)",
        "in_window",
        "W_monotone",
        "W_C",
    )

    def _measured(self, family=None):
        return [row for row in self.rows_ if row.status != "WindowEmpty" and (family is None or row.family == family)]

    @property
    def bound_constant(self):
        """
        The largest C with rho >= C H0^-(2N-3) on every measured row.
        """
        values = [row.rho_scaled for row in self._measured() if np.isfinite(row.rho_scaled)]
        return min(values, default=math.nan)

    @property
    def passed(self):
        measured = self._measured()
        if not measured:
            return True
        if not all(np.isfinite(row.rho) and row.rho > 0.0 for row in measured):
            return False
        if self.fit is None:
            return self.bound_constant > 0.0
        low = self.predicted_slope - self.slope_margin
        return self.bound_constant > 0.0 and low <= self.fit.slope <= 0.0

    def rows(self):
        for row in self.rows_:
            yield (
                row.H0,
                row.family,
                row.status,
                row.t_lo,
                row.t_hi,
                row.t_reached,
                row.rho,
                row.rho_scaled,
                row.in_window,
                row.W_monotone,
                row.W_constant,
            )

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        lines = [f"decay-scan N={self.N}: {status}", f"  predicted slope {self.predicted_slope!r} (one-sided)"]
        lines.append(f"  bound constant C = {self.bound_constant!r}")
        if self.fit is not None:
            lines.append(f"  fitted slope {self.fit.slope!r} [{self.fit.lower!r}, {self.fit.upper!r}] (95%)")
        for row in self.rows_:
            if row.status == "WindowEmpty":
                lines.append(f"  H0={row.H0!r} {row.family}: empty window [{row.t_lo!r}, {row.t_hi!r}]")
        return "\n".join(lines)


def _window_times(t_lo, t_hi, points):
    lead = np.geomspace(max(t_lo * 1e-2, 1e-3), t_lo, 4, endpoint=False)
    return np.concatenate([lead, np.geomspace(t_lo, t_hi, points)])


def _measure(spec, coeffs, s0, H0, window, protocol):
    t_lo, t_hi = window
    record = integrate(
        spec,
        s0,
        t_hi,
        protocol.tol,
        sample_times=_window_times(t_lo, t_hi, protocol.window_points),
        coeffs=coeffs,
        wall_clock=protocol.wall_clock,
    )
    times, H, W = record.times, record.H, record.W
    inside = np.flatnonzero(times >= t_lo * (1.0 - 1e-12))
    last = int(inside[-1]) if inside.size else len(times) - 1
    rho = (H0 - H[last]) / times[last] if times[last] > 0.0 else math.nan

    W0 = W[0]
    awake = H[:-1] > coeffs.h0
    monotone = bool(np.all((np.diff(W) <= MONOTONE_SLACK * abs(W0))[awake]))
    later = times > 0.0
    W_constant = float(np.min((W0 - W[later]) / (times[later] * W0 ** (1.0 / coeffs.gamma0)))) if np.any(later) else math.nan
    return times[last], rho, bool(inside.size), monotone, W_constant


def decay_scan(spec, coeffs, H0_list, protocol=None, *, seed):
    """
    Energy decay rates of a rotator chain over initial energies H0.

    Each (H0, family) runs `protocol.ensemble` trajectories from random
    coordinates; rho is averaged over them.

    Returns:
        DecayReport. Empty windows become WindowEmpty rows.
    """
    if not spec.is_rotator:
        raise ValueError("The decay scan runs on rotator chains.")
    protocol = protocol or DecayProtocol()
    N = spec.N
    gamma0 = coeffs.gamma0
    report = DecayReport(N=N, predicted_slope=-(2.0 * N - 3.0), slope_margin=protocol.slope_margin)
    streams = np.random.SeedSequence(seed).spawn(len(H0_list) * len(protocol.families))

    for index, (H0, family) in enumerate((H0, family) for H0 in H0_list for family in protocol.families):
        H0 = float(H0)
        try:
            window = decay_window(H0, gamma0, protocol.window_eps)
        except WindowEmpty as error:
            logger.info("%s", error)
            report.rows_.append(DecayRow(H0=H0, family=family, status="WindowEmpty", t_lo=error.t_lo, t_hi=error.t_hi))
            continue

        rng = np.random.default_rng(streams[index])
        split = "fast" if family == "fast" else "simplex"
        states = states_at_energy(spec, np.full(protocol.ensemble, H0), rng, split=split)
        logger.info("Decay run H0=%r family=%s window [%r, %r]", H0, family, *window)
        results = [_measure(spec, coeffs, states.take(m), H0, window, protocol) for m in range(protocol.ensemble)]
        reached, rho, in_window, monotone, W_constant = zip(*results)
        mean_rho = float(np.mean(rho))
        report.rows_.append(
            DecayRow(
                H0=H0,
                family=family,
                status="ok" if all(in_window) else "partial",
                t_lo=window[0],
                t_hi=window[1],
                t_reached=float(min(reached)),
                rho=mean_rho,
                rho_scaled=mean_rho * H0 ** (2 * N - 3),
                in_window=all(in_window),
                W_monotone=all(monotone),
                W_constant=float(min(W_constant)),
            )
        )

    primary = [row for row in report._measured(protocol.families[0]) if np.isfinite(row.rho) and row.rho > 0.0]
    if len(primary) >= 2:
        report.fit = fit_slope(np.log(np.array([row.H0 for row in primary])), np.log(np.array([row.rho for row in primary])))
    return report
