"""
Taylor-mode transport of chain flows and iterated Lie derivatives.

The k-th Lie derivative of an observable g along the damped vector field is
k! times the k-th time-Taylor coefficient of g(x(t)) at t = 0:

    L_F^k g(x) = k! [g(x(t))]_k

`propagate` builds the coefficients of the flow one order at a time; each
new order only costs one convolution per product node, so K orders cost
O(K^2) per node. Observables are then evaluated with truncated series
arithmetic (`Jet`).
"""

import logging
import math
import re
from dataclasses import dataclass

import numpy as np

from nublado_lyapunov.chain import State
from nublado_lyapunov.conf.app_settings import app_settings
from nublado_lyapunov.exceptions import JetOverflow

logger = logging.getLogger(__name__)

UNRESOLVED = -1


def _factorials(order, ndim):
    values = np.array([math.factorial(k) for k in range(order + 1)], dtype=float)
    return values.reshape((order + 1,) + (1,) * ndim)


def _lift(coeffs, ndim):
    """
    Pad trailing batch axes so that coeffs carries `ndim` batch dimensions.
    """
    missing = ndim - (coeffs.ndim - 1)
    return coeffs.reshape(coeffs.shape + (1,) * missing) if missing > 0 else coeffs


def _convolve(f, g):
    ndim = max(f.ndim, g.ndim) - 1
    f, g = _lift(f, ndim), _lift(g, ndim)
    order = min(len(f), len(g)) - 1
    shape = (order + 1,) + np.broadcast_shapes(f.shape[1:], g.shape[1:])
    out = np.zeros(shape, dtype=np.result_type(f, g))
    for k in range(order + 1):
        out[k] = np.sum(f[: k + 1] * g[k::-1], axis=0)
    return out


class Jet:
    """
    Truncated power series c_0 + c_1 t + ... + c_K t^K of a scalar signal.

    Coefficients are stored with shape (K+1, *batch); arithmetic broadcasts
    over the batch axes and truncates at the smaller order.
    """

    __slots__ = ("coeffs",)

    def __init__(self, coeffs):
        self.coeffs = np.asarray(coeffs)

    @classmethod
    def constant(cls, value, order):
        value = np.asarray(value)
        coeffs = np.zeros((order + 1,) + value.shape, dtype=np.result_type(value, float))
        coeffs[0] = value
        return cls(coeffs)

    @property
    def order(self):
        return len(self.coeffs) - 1

    @property
    def value(self):
        return self.coeffs[0]

    def derivatives(self):
        """
        Time derivatives k! c_k.
        """
        return self.coeffs * _factorials(self.order, self.coeffs.ndim - 1)

    def __add__(self, other):
        if isinstance(other, Jet):
            ndim = max(self.coeffs.ndim, other.coeffs.ndim) - 1
            order = min(self.order, other.order)
            return Jet(_lift(self.coeffs[: order + 1], ndim) + _lift(other.coeffs[: order + 1], ndim))
        other = np.asarray(other)
        coeffs = _lift(self.coeffs, other.ndim)
        shape = coeffs.shape[:1] + np.broadcast_shapes(coeffs.shape[1:], other.shape)
        coeffs = np.broadcast_to(coeffs, shape).astype(np.result_type(coeffs, other, float))
        coeffs[0] = coeffs[0] + other
        return Jet(coeffs)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.coeffs)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Jet) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet):
            return Jet(_convolve(self.coeffs, other.coeffs))
        other = np.asarray(other)
        return Jet(_lift(self.coeffs, other.ndim) * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            raise TypeError("Division by a jet is not supported.")
        return Jet(self.coeffs / np.asarray(other))

    def __pow__(self, n):
        if not isinstance(n, (int, np.integer)) or n < 0:
            raise ValueError("Jets support non-negative integer powers only.")
        result = Jet.constant(np.ones_like(self.value), self.order)
        base = self
        while n:
            if n & 1:
                result = result * base
            n >>= 1
            if n:
                base = base * base
        return result

    def sin_cos(self):
        """
        Series of sin(u) and cos(u) by the coupled recursion

            s_k = (1/k) sum_{j=1}^k j u_j c_{k-j}
            c_k = -(1/k) sum_{j=1}^k j u_j s_{k-j}
        """
        u = self.coeffs
        s = np.zeros_like(u, dtype=np.result_type(u, float))
        c = np.zeros_like(s)
        s[0], c[0] = np.sin(u[0]), np.cos(u[0])
        for k in range(1, self.order + 1):
            ju = np.arange(1, k + 1).reshape((k,) + (1,) * (u.ndim - 1)) * u[1 : k + 1]
            s[k] = np.sum(ju * c[k - 1 :: -1][:k], axis=0) / k
            c[k] = -np.sum(ju * s[k - 1 :: -1][:k], axis=0) / k
        return Jet(s), Jet(c)

    def sin(self):
        return self.sin_cos()[0]

    def cos(self):
        return self.sin_cos()[1]

    def __repr__(self):
        return f"Jet(order={self.order}, coeffs={self.coeffs!r})"


def compose(pot, u):
    """
    Evaluate a closed-form potential on a jet.
    """
    poly = pot.poly
    result = Jet.constant(np.full_like(u.value, poly[-1], dtype=np.result_type(u.coeffs, float)), u.order)
    for a in reversed(poly[:-1]):
        result = result * u + a
    for m, (c, s) in enumerate(zip(pot.cos, pot.sin), start=1):
        if c == 0.0 and s == 0.0:
            continue
        sin_m, cos_m = (u * float(m)).sin_cos()
        result = result + cos_m * c + sin_m * s
    return result + pot.shift


# Incremental series used by `propagate`. Each node produces coefficient k
# from coefficients <= k of its inputs, so the flow can be grown one order
# at a time.


class _Series:
    def __init__(self):
        self._coeffs = []

    def __getitem__(self, k):
        while len(self._coeffs) <= k:
            self._coeffs.append(self._next(len(self._coeffs)))
        return self._coeffs[k]

    def _next(self, k):
        raise NotImplementedError


class _Given(_Series):
    def push(self, value):
        self._coeffs.append(value)

    def _next(self, k):
        raise LookupError(f"Coefficient {k} has not been pushed yet.")


class _Linear(_Series):
    def __init__(self, terms, constant=0.0):
        super().__init__()
        self.terms = terms
        self.constant = constant

    def _next(self, k):
        total = self.constant if k == 0 else 0.0
        for weight, series in self.terms:
            total = total + weight * series[k]
        return total


class _Product(_Series):
    def __init__(self, a, b):
        super().__init__()
        self.a = a
        self.b = b

    def _next(self, k):
        return sum(self.a[i] * self.b[k - i] for i in range(k + 1))


class _SinCos:
    def __init__(self, u, m):
        self.u = u
        self.m = float(m)
        self.s = []
        self.c = []
        self.sin = _View(self, self.s)
        self.cos = _View(self, self.c)

    def extend(self, k):
        while len(self.s) <= k:
            n = len(self.s)
            if n == 0:
                x = self.m * self.u[0]
                self.s.append(np.sin(x))
                self.c.append(np.cos(x))
                continue
            ju = [j * self.m * self.u[j] for j in range(1, n + 1)]
            s = sum(ju[j - 1] * self.c[n - j] for j in range(1, n + 1)) / n
            c = -sum(ju[j - 1] * self.s[n - j] for j in range(1, n + 1)) / n
            self.s.append(s)
            self.c.append(c)


class _View(_Series):
    def __init__(self, owner, values):
        super().__init__()
        self.owner = owner
        self.values = values

    def __getitem__(self, k):
        self.owner.extend(k)
        return self.values[k]


def _compose_series(pot, u):
    poly = pot.poly
    acc = _Linear([], constant=poly[-1])
    for a in reversed(poly[:-1]):
        acc = _Linear([(1.0, _Product(acc, u))], constant=a)
    terms = [(1.0, acc)]
    for m, (c, s) in enumerate(zip(pot.cos, pot.sin), start=1):
        if c == 0.0 and s == 0.0:
            continue
        trig = _SinCos(u, m)
        if c:
            terms.append((c, trig.cos))
        if s:
            terms.append((s, trig.sin))
    return _Linear(terms, constant=pot.shift)


@dataclass(frozen=True, eq=False)
class StateJet:
    """
    Taylor coefficients of every coordinate of the flow through a state.

    Attributes:
        p, q: Arrays of shape (K+1, N, *batch).
        order: K.
        overflow: True when a coefficient left the floating-point range.
    """

    p: np.ndarray
    q: np.ndarray
    order: int
    overflow: bool = False

    @property
    def seed(self):
        return State(p=self.p[0], q=self.q[0])

    def p_jet(self, j):
        return Jet(self.p[:, j - 1])

    def q_jet(self, j):
        return Jet(self.q[:, j - 1])

    def difference_jet(self, j):
        return Jet(self.q[:, j - 1] - self.q[:, j])


def _working_dtype(extended):
    if extended is None:
        extended = app_settings.EXTENDED_PRECISION
    return np.longdouble if extended else np.float64


def propagate(spec, s, order, *, extended=None):
    """
    Taylor coefficients of the damped flow through s up to the given order.

    The recursion is q_{k+1} = p_k / (k+1) and p_{k+1} = [F_p]_k / (k+1),
    where [F_p]_k is the k-th coefficient of the force series.

    Args:
        spec: ChainSpec.
        s: State (single or batched).
        order: K >= 0.
        extended: Use np.longdouble; defaults to the EXTENDED_PRECISION setting.

    Returns:
        StateJet, with `overflow` set if coefficients stopped being finite.
    """
    if order < 0:
        raise ValueError("Jet order must be non-negative.")
    dtype = _working_dtype(extended)
    s = s.astype(dtype)
    N = spec.N
    batch = s.batch_shape

    q = [_Given() for _ in range(N)]
    p = [_Given() for _ in range(N)]
    for j in range(N):
        q[j].push(s.q[j])
        p[j].push(s.p[j])

    d = [_Linear([(1.0, q[j]), (-1.0, q[j + 1])]) for j in range(N - 1)]
    dV = [_compose_series(pot.derivative(1), d[j]) for j, pot in enumerate(spec.interaction)]
    dU = [_compose_series(pot.derivative(1), q[j]) for j, pot in enumerate(spec.pinning)]

    force = []
    for j in range(N):
        terms = []
        if spec.damping_mask[j]:
            terms.append((-1.0, p[j]))
        if j > 0:
            terms.append((1.0, dV[j - 1]))
        if j < N - 1:
            terms.append((-1.0, dV[j]))
        if dU:
            terms.append((-1.0, dU[j]))
        force.append(_Linear(terms))

    P = np.zeros((order + 1, N) + batch, dtype=dtype)
    Q = np.zeros_like(P)
    P[0], Q[0] = s.p, s.q
    overflow = False
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(order):
            dp = [force[j][k] / (k + 1) for j in range(N)]
            dq = [p[j][k] / (k + 1) for j in range(N)]
            for j in range(N):
                P[k + 1, j] = dp[j]
                Q[k + 1, j] = dq[j]
                p[j].push(P[k + 1, j])
                q[j].push(Q[k + 1, j])
            if not (np.all(np.isfinite(P[k + 1])) and np.all(np.isfinite(Q[k + 1]))):
                overflow = True
                P[k + 2 :] = np.nan
                Q[k + 2 :] = np.nan
                logger.warning("Jet overflow at order %d", k + 1)
                break
    return StateJet(p=P, q=Q, order=order, overflow=overflow)


def directional_jet(s, index, *, order=2, momentum=True):
    """
    Coordinate jets of the straight line s + t e_index.

    Evaluating an observable on it yields the derivatives of that observable
    along e_index (a momentum direction by default), e.g. d^2 f / dp_j^2.
    """
    N = s.N
    if not 1 <= index <= N:
        raise IndexError(f"Coordinate index {index} out of range 1..{N}")
    P = np.zeros((order + 1,) + s.p.shape, dtype=s.p.dtype)
    Q = np.zeros_like(P)
    P[0], Q[0] = s.p, s.q
    target = P if momentum else Q
    if order >= 1:
        target[1, index - 1] = 1.0
    return StateJet(p=P, q=Q, order=order)


_OBSERVABLE_RE = re.compile(r"^(H|W|p|q|xi|lxi)(\d+)?(?:\^(\d+))?$")


@dataclass(frozen=True)
class Observable:
    """
    An observable addressable by name: H, W, p<j>, q<j>, xi<j>, lxi<j>,
    optionally raised to an integer power (e.g. "p1^2").
    """

    name: str
    index: int | None = None
    power: int = 1

    @classmethod
    def parse(cls, text):
        match = _OBSERVABLE_RE.match(str(text).strip())
        if not match:
            raise ValueError(f"Unknown observable {text!r}")
        name, index, power = match.groups()
        if name in ("H", "W"):
            if index is not None:
                raise ValueError(f"Observable {name} takes no index.")
        elif index is None:
            raise ValueError(f"Observable {name} needs a particle index.")
        return cls(name=name, index=None if index is None else int(index), power=int(power or 1))

    @classmethod
    def coerce(cls, value):
        return value if isinstance(value, Observable) else cls.parse(value)

    def __str__(self):
        text = self.name + ("" if self.index is None else str(self.index))
        return text if self.power == 1 else f"{text}^{self.power}"


def xi_jet(spec, sj, j):
    if j == 0:
        return Jet(np.zeros_like(sj.p[:, 0]))
    return -compose(spec.interaction[j - 1].derivative(1), sj.difference_jet(j))


def lie_xi_jet(spec, sj, j):
    if j == 0:
        return Jet(np.zeros_like(sj.p[:, 0]))
    second = compose(spec.interaction[j - 1].derivative(2), sj.difference_jet(j))
    return -(sj.p_jet(j) - sj.p_jet(j + 1)) * second


def energy_jet(spec, sj):
    total = Jet(np.zeros_like(sj.p[:, 0]))
    for j in range(1, spec.N + 1):
        total = total + sj.p_jet(j) * sj.p_jet(j) * 0.5
    for j, pot in enumerate(spec.interaction, start=1):
        total = total + compose(pot, sj.difference_jet(j))
    for j, pot in enumerate(spec.pinning, start=1):
        total = total + compose(pot, sj.q_jet(j))
    return total


def observable_jet(spec, sj, g, *, coeffs=None):
    """
    Evaluate an observable on coordinate jets.

    Args:
        spec: ChainSpec.
        sj: StateJet (a flow jet or a directional jet).
        g: Observable or its textual name.
        coeffs: LyapCoeffs, required for W.
    """
    g = Observable.coerce(g)
    N = spec.N
    if g.name == "H":
        jet = energy_jet(spec, sj)
    elif g.name == "W":
        if coeffs is None:
            raise ValueError("Observable W needs Lyapunov coefficients.")
        from nublado_lyapunov.lyapunov_rotor import W_jet

        jet = W_jet(spec, coeffs, sj)
    elif g.name in ("p", "q"):
        if not 1 <= g.index <= N:
            raise IndexError(f"{g} out of range 1..{N}")
        jet = sj.p_jet(g.index) if g.name == "p" else sj.q_jet(g.index)
    else:
        if not spec.is_rotator:
            raise ValueError("xi observables are defined for rotator chains.")
        if not 0 <= g.index < N:
            raise IndexError(f"{g} out of range 0..{N - 1}")
        jet = xi_jet(spec, sj, g.index) if g.name == "xi" else lie_xi_jet(spec, sj, g.index)
    return jet if g.power == 1 else jet**g.power


def lie_derivatives(spec, s, g, kmax, *, coeffs=None, extended=None):
    """
    L_F^k g(s) for k = 0..kmax.

    Returns:
        Array of shape (kmax+1, *batch).

    Raises:
        JetOverflow: A coefficient overflowed.
    """
    if kmax < 0:
        raise ValueError("kmax must be non-negative.")
    sj = propagate(spec, s, kmax, extended=extended)
    if sj.overflow:
        raise JetOverflow(f"Flow coefficients overflow below order {kmax} for {g}")
    with np.errstate(over="ignore", invalid="ignore"):
        values = observable_jet(spec, sj, g, coeffs=coeffs).derivatives()
    if not np.all(np.isfinite(values)):
        raise JetOverflow(f"Lie derivatives of {g} overflow below order {kmax}")
    return values


def taylor_coefficients(vector_field, x0, order):
    """
    Taylor coefficients of the solution of x' = f(x) through x0.

    Args:
        vector_field: Maps a list of Jets (one per coordinate) to a list of
            Jets or constants.
        x0: Initial point.
        order: Number of coefficients beyond the initial value.

    Returns:
        Array of shape (order+1, dim).
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    coeffs = np.zeros((order + 1,) + x0.shape)
    coeffs[0] = x0
    for k in range(order):
        jets = [Jet(coeffs[: k + 1, i]) for i in range(len(x0))]
        field = vector_field(jets)
        for i, component in enumerate(field):
            if not isinstance(component, Jet):
                component = Jet.constant(component, k)
            coeffs[k + 1, i] = component.coeffs[k] / (k + 1)
    return coeffs


def lie_derivatives_of(vector_field, g, x0, kmax):
    """
    L_f^k g(x0) for a vector field and observable written on jets.
    """
    coeffs = taylor_coefficients(vector_field, x0, kmax)
    jets = [Jet(coeffs[:, i]) for i in range(coeffs.shape[1])]
    return g(jets).derivatives()


@dataclass(frozen=True, eq=False)
class OrderResult:
    """
    Order of vanishing per state; UNRESOLVED (-1) where no Lie derivative up
    to kmax exceeds the tolerance.
    """

    orders: np.ndarray
    kmax: int
    values: np.ndarray
    tolerance: np.ndarray

    @property
    def resolved(self):
        return self.orders != UNRESOLVED

    @property
    def order(self):
        order = int(self.orders)
        return None if order == UNRESOLVED else order

    def label(self):
        order = self.order
        return f"Unresolved({self.kmax})" if order is None else str(order)


def first_nonvanishing(values, norm, zero_tol, *, scale=1.0, start=0):
    """
    Index of the first |values[k]| > zero_tol * scale * (1 + norm^k), k >= start.

    Returns:
        (orders, tolerance); orders is UNRESOLVED where nothing exceeds.
    """
    kmax = len(values) - 1
    ndim = values.ndim - 1
    k = np.arange(kmax + 1).reshape((kmax + 1,) + (1,) * ndim)
    norm = np.asarray(norm, dtype=float)
    tolerance = zero_tol * np.asarray(scale, dtype=float) * (1.0 + norm**k)
    exceeds = np.abs(values) > tolerance
    exceeds[:start] = False
    found = np.any(exceeds, axis=0)
    orders = np.where(found, np.argmax(exceeds, axis=0), UNRESOLVED)
    return orders, tolerance


def order_of(spec, s, g, kmax, zero_tol=None, *, coeffs=None, scale=1.0, start=None, extended=None):
    """
    Smallest k <= kmax with |L_F^k g(s)| > zero_tol * scale * (1 + |s|^k).

    Counting starts at k = 1 for H and W (their value never vanishes) and at
    k = 0 otherwise. With EXTENDED_PRECISION enabled, unresolved states are
    re-run in long double.

    Returns:
        OrderResult; never reports an infinite order.
    """
    g = Observable.coerce(g)
    zero_tol = app_settings.ZERO_TOL if zero_tol is None else zero_tol
    if start is None:
        start = 1 if g.name in ("H", "W") and g.power == 1 else 0
    values = lie_derivatives(spec, s, g, kmax, coeffs=coeffs, extended=False if extended is None else extended)
    orders, tolerance = first_nonvanishing(values, s.norm(), zero_tol, scale=scale, start=start)

    rerun = app_settings.EXTENDED_PRECISION if extended is None else False
    if rerun and np.any(orders == UNRESOLVED):
        logger.info("Re-running %d unresolved state(s) in extended precision", int(np.sum(orders == UNRESOLVED)))
        values = lie_derivatives(spec, s, g, kmax, coeffs=coeffs, extended=True)
        orders, tolerance = first_nonvanishing(values, s.norm(), zero_tol, scale=scale, start=start)
    return OrderResult(orders=orders, kmax=kmax, values=values, tolerance=tolerance)
