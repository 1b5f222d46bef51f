"""
Experiment files.

An experiment is one TOML document: a `[chain]` table with
`[[chain.interaction]]` / `[[chain.pinning]]` potentials, an optional
`[state]`, one table per command and a `[nublado_lyapunov]` table of
setting overrides. Parsing produces frozen dataclasses; every schema
violation raises ImproperlyConfigured naming the offending field.
"""

import dataclasses
import logging
import tomllib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nublado_lyapunov.chain import ChainKind, ChainSpec, State
from nublado_lyapunov.conf.app_settings import SETTINGS_DICT_NAME
from nublado_lyapunov.exceptions import ImproperlyConfigured
from nublado_lyapunov.potentials import Potential

logger = logging.getLogger(__name__)

POTENTIAL_KEYS = {"kind", "c0", "cos", "sin", "poly", "shift"}


@dataclass(frozen=True)
class ChainConfig:
    kind: ChainKind
    interaction: tuple
    pinning: tuple = ()
    damping: tuple | None = None
    temperatures: tuple | None = None

    def raw(self):
        """
        The chain exactly as declared (rotator potentials not shifted).
        """
        return ChainSpec(
            kind=self.kind,
            N=len(self.interaction) + 1,
            interaction=self.interaction,
            pinning=self.pinning,
            damping_mask=self.damping,
            temperatures=self.temperatures,
        )

    def build(self):
        """
        The chain ready for analysis: rotator potentials certified and shifted.
        """
        if self.kind is ChainKind.ROTATOR:
            return ChainSpec.rotator(self.interaction, damping_mask=self.damping, temperatures=self.temperatures)
        return self.raw()


@dataclass(frozen=True)
class StateConfig:
    p: tuple
    q: tuple


@dataclass(frozen=True)
class CoeffsConfig:
    a: tuple
    h0: float = 1.0
    C1: float = float("nan")


@dataclass(frozen=True)
class CalibrationConfig:
    samples: int = 10000
    h_lo: float = 10.0
    h_hi: float = 1.0e4
    growth_factor: float | None = None
    max_rounds: int | None = None
    seed_coeff: float | None = None
    kappa: float | None = None
    tiers_per_decade: int | None = None
    split: str = "sphere"
    coeffs: tuple | None = None


@dataclass(frozen=True)
class VerificationConfig:
    samples: int = 10000
    h_lo: float = 10.0
    h_hi: float = 1.0e4
    split: str = "simplex"
    tiers_per_decade: int | None = None


@dataclass(frozen=True)
class EnvelopesConfig:
    Q: float = 1.0
    eps: float = 0.5
    w_max: float = 1.0e3
    r: int | None = None
    budget: int = 64
    levels_per_decade: int | None = None
    directory: str = "matrosov"


@dataclass(frozen=True)
class CertificationConfig:
    budget: int = 10000
    directory: str = "matrosov"
    corrupt_phi: float = 1.0


@dataclass(frozen=True)
class EquilibriaConfig:
    budget: int | None = None
    brute_force: bool = False
    points: int = 201


@dataclass(frozen=True)
class OrderStatsConfig:
    budget: int = 10000
    kmax: int | None = None


@dataclass(frozen=True)
class SimulateConfig:
    t_end: float = 10.0
    tol: float = 1e-10
    samples: int = 101
    H0: float = 100.0
    split: str = "simplex"


@dataclass(frozen=True)
class SdeConfig:
    t_end: float = 10.0
    dt: float = 1e-3
    members: int | None = None
    H0: float = 10.0
    split: str = "simplex"


@dataclass(frozen=True)
class GeneratorConfig:
    observable: str = "H"
    dt: tuple = (1e-3, 2e-3, 4e-3)
    ensemble: int = 10000
    H0: float = 10.0
    split: str = "simplex"


@dataclass(frozen=True)
class DecayConfig:
    H0: tuple = (1.0e2, 1.0e3, 1.0e4)
    families: tuple = ("fast", "spread")
    ensemble: int = 4
    eps: float | None = None
    tol: float = 1e-9
    window_points: int = 8


BLOCKS = {
    "calibration": CalibrationConfig,
    "verification": VerificationConfig,
    "envelopes": EnvelopesConfig,
    "certification": CertificationConfig,
    "equilibria": EquilibriaConfig,
    "order_stats": OrderStatsConfig,
    "simulate": SimulateConfig,
    "sde": SdeConfig,
    "generator": GeneratorConfig,
    "decay": DecayConfig,
}

TOP_LEVEL = {"seed", "output_dir", "chain", "state", "coeffs", SETTINGS_DICT_NAME} | set(BLOCKS)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    A parsed experiment file.

    Attributes:
        source: The raw bytes, hashed into every report.
        blocks: Command tables by name, defaults filled in.
    """

    chain: ChainConfig
    source: bytes = b""
    path: str | None = None
    seed: int = 0
    output_dir: str | None = None
    state: StateConfig | None = None
    coeffs: CoeffsConfig | None = None
    settings: dict = field(default_factory=dict)
    blocks: dict = field(default_factory=dict)

    def block(self, name):
        return self.blocks.get(name) or BLOCKS[name]()

    def initial_state(self, spec):
        if self.state is None:
            return None
        try:
            return State.of(spec, np.array(self.state.p, dtype=float), np.array(self.state.q, dtype=float))
        except ValueError as error:
            raise ImproperlyConfigured(str(error), field="state") from error


def _type_name(hint):
    return getattr(hint, "__name__", str(hint))


def _coerce(value, hint, path):
    """
    Check a TOML value against a dataclass field annotation.
    """
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = [arg for arg in typing.get_args(hint) if arg is not type(None)]
        errors = []
        for option in options:
            try:
                return _coerce(value, option, path)
            except ImproperlyConfigured as error:
                errors.append(error)
        raise errors[0]
    if hint is tuple or origin is tuple:
        if not isinstance(value, list):
            raise ImproperlyConfigured(f"expected a list, got {value!r}", field=path)
        args = typing.get_args(hint)
        item = args[0] if args else None
        if item is None:
            return tuple(float(v) if isinstance(v, int) and not isinstance(v, bool) else v for v in value)
        return tuple(_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ImproperlyConfigured(f"expected a boolean, got {value!r}", field=path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ImproperlyConfigured(f"expected an integer, got {value!r}", field=path)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ImproperlyConfigured(f"expected a number, got {value!r}", field=path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ImproperlyConfigured(f"expected a string, got {value!r}", field=path)
        return value
    raise ImproperlyConfigured(f"unsupported field type {_type_name(hint)}", field=path)


def parse_block(cls, table, path):
    """
    Build a block dataclass from a TOML table, rejecting unknown keys.
    """
    if not isinstance(table, dict):
        raise ImproperlyConfigured("expected a table", field=path)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ImproperlyConfigured(f"unknown key(s) {', '.join(unknown)}", field=path)
    values = {name: _coerce(value, hints[name], f"{path}.{name}") for name, value in table.items()}
    required = [f.name for f in dataclasses.fields(cls) if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING]
    missing = [name for name in required if name not in values]
    if missing:
        raise ImproperlyConfigured(f"missing key(s) {', '.join(missing)}", field=path)
    return cls(**values)


def _numbers(table, key, path):
    value = table.get(key, [])
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ImproperlyConfigured(f"expected a list of numbers, got {value!r}", field=f"{path}.{key}")
    return [float(v) for v in value]


def parse_potential(table, path, *, kind):
    """
    A closed-form potential from its table.

    Rotator potentials take c0, cos and sin (Fourier coefficients of
    harmonics 1, 2, ...); oscillator potentials take poly (ascending
    coefficients) plus optional cos and sin.
    """
    if not isinstance(table, dict):
        raise ImproperlyConfigured("expected a table", field=path)
    declared = table.get("kind", "TrigPoly" if kind is ChainKind.ROTATOR else "Polynomial")
    if declared == "Tabulated":
        raise ImproperlyConfigured("tabulated potentials are not supported", field=f"{path}.kind")
    if declared not in ("TrigPoly", "Polynomial", "Mixed"):
        raise ImproperlyConfigured(f"unknown potential kind {declared!r}", field=f"{path}.kind")
    unknown = sorted(set(table) - POTENTIAL_KEYS)
    if unknown:
        raise ImproperlyConfigured(f"unknown key(s) {', '.join(unknown)}", field=path)
    shift = _coerce(table.get("shift", 0.0), float, f"{path}.shift")
    cos = _numbers(table, "cos", path)
    sin = _numbers(table, "sin", path)
    try:
        if kind is ChainKind.ROTATOR:
            if "poly" in table:
                raise ValueError("rotator potentials are trigonometric polynomials; use c0, cos and sin")
            c0 = _coerce(table.get("c0", 0.0), float, f"{path}.c0")
            return Potential.trig(c0, cos, sin, shift=shift)
        if "c0" in table:
            raise ValueError("oscillator potentials take their constant term in poly")
        return Potential.polynomial(_numbers(table, "poly", path), cos=cos, sin=sin, shift=shift)
    except ValueError as error:
        raise ImproperlyConfigured(str(error), field=path) from error


def parse_chain(table):
    path = "chain"
    if not isinstance(table, dict):
        raise ImproperlyConfigured("expected a table", field=path)
    unknown = sorted(set(table) - {"kind", "N", "interaction", "pinning", "damping", "temperatures"})
    if unknown:
        raise ImproperlyConfigured(f"unknown key(s) {', '.join(unknown)}", field=path)
    try:
        kind = ChainKind(table.get("kind", "Rotator"))
    except ValueError:
        raise ImproperlyConfigured(f"unknown chain kind {table.get('kind')!r}", field=f"{path}.kind") from None

    interaction = table.get("interaction", [])
    pinning = table.get("pinning", [])
    if not isinstance(interaction, list) or not interaction:
        raise ImproperlyConfigured("at least one interaction potential is required", field=f"{path}.interaction")
    interaction = tuple(parse_potential(t, f"{path}.interaction[{i}]", kind=kind) for i, t in enumerate(interaction))
    pinning = tuple(parse_potential(t, f"{path}.pinning[{i}]", kind=kind) for i, t in enumerate(pinning))
    N = len(interaction) + 1
    if "N" in table and _coerce(table["N"], int, f"{path}.N") != N:
        raise ImproperlyConfigured(f"N={table['N']} but {len(interaction)} interaction potential(s) given", field=f"{path}.N")
    damping = _coerce(table["damping"], tuple[bool, ...], f"{path}.damping") if "damping" in table else None
    temperatures = _coerce(table["temperatures"], tuple[float, ...], f"{path}.temperatures") if "temperatures" in table else None

    chain = ChainConfig(kind=kind, interaction=interaction, pinning=pinning, damping=damping, temperatures=temperatures)
    try:
        chain.raw()
    except ValueError as error:
        raise ImproperlyConfigured(str(error), field=path) from error
    return chain


def parse_config(data, *, source=b"", path=None):
    """
    ExperimentConfig from a decoded TOML mapping.
    """
    unknown = sorted(set(data) - TOP_LEVEL)
    if unknown:
        raise ImproperlyConfigured(f"unknown table(s) {', '.join(unknown)}", field="config")
    if "chain" not in data:
        raise ImproperlyConfigured("missing [chain] table", field="chain")
    settings = data.get(SETTINGS_DICT_NAME, {})
    if not isinstance(settings, dict):
        raise ImproperlyConfigured("expected a table", field=SETTINGS_DICT_NAME)
    return ExperimentConfig(
        chain=parse_chain(data["chain"]),
        source=source,
        path=path,
        seed=_coerce(data.get("seed", 0), int, "seed"),
        output_dir=_coerce(data["output_dir"], str, "output_dir") if "output_dir" in data else None,
        state=parse_block(StateConfig, data["state"], "state") if "state" in data else None,
        coeffs=parse_block(CoeffsConfig, data["coeffs"], "coeffs") if "coeffs" in data else None,
        settings=dict(settings),
        blocks={name: parse_block(cls, data[name], name) for name, cls in BLOCKS.items() if name in data},
    )


def load_config(path):
    """
    Read and parse an experiment file.

    Raises:
        ImproperlyConfigured: Unreadable file, TOML syntax error (with line
            and column) or schema violation.
    """
    path = Path(path)
    try:
        source = path.read_bytes()
    except OSError as error:
        raise ImproperlyConfigured(f"cannot read {path}: {error.strerror}", field="config") from error
    try:
        data = tomllib.loads(source.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as error:
        raise ImproperlyConfigured(str(error), field=str(path)) from error
    logger.debug("Loaded experiment %s", path)
    return parse_config(data, source=source, path=str(path))
