"""
Command-line experiment runner.

    nublado-lyapunov <command> --config experiment.toml [--seed N] [--out DIR]
                     [--threads N] [--wall-clock MINUTES]

Every command writes `<command>.csv` and `<command>.txt` into the output
directory. Exit status: 0 when the report passes, 2 when it fails, 1 for
configuration or usage errors.
"""

import argparse
import dataclasses
import json
import logging
import logging.config
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nublado_lyapunov import __version__
from nublado_lyapunov.chain import ChainKind, State
from nublado_lyapunov.conf.app_settings import OUTPUT_DIR_ENV, app_settings
from nublado_lyapunov.config import load_config
from nublado_lyapunov.exceptions import CalibrationFailed, ImproperlyConfigured, LyapunovLabError
from nublado_lyapunov.jets import Observable
from nublado_lyapunov.lyapunov_rotor import CalibConfig, LyapCoeffs, calibrate_coeffs, verify_theorem
from nublado_lyapunov.matrosov import (
    HEADER_FILE,
    EnergyGrid,
    LevelSampler,
    build_matrosov,
    certify_strictness,
    default_order,
    load_matrosov,
    save_matrosov,
    table_report,
)
from nublado_lyapunov.oscillator_analysis import brute_force_equilibria, find_equilibria, order_statistics
from nublado_lyapunov.potentials import validate_oscillator_potentials, validate_rotor_potential
from nublado_lyapunov.reports import ReportGroup, config_hash, write_csv, write_summary
from nublado_lyapunov.sampling import KINETIC_SPLITS, states_at_energy
from nublado_lyapunov.sim import DecayProtocol, decay_scan, generator_check, integrate, integrate_sde

logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_USAGE = 1
EXIT_FAIL = 2

DEFAULT_OUTPUT_DIR = "reports"
COEFFS_FILE = "coeffs.json"
DECAY_FAMILIES = ("fast", "spread")


@dataclass
class Run:
    """
    One command invocation: the parsed experiment plus resolved flags.

    Attributes:
        wall_clock: Seconds, or None for no cap.
    """

    command: str
    config: object
    seed: int
    out: Path
    wall_clock: float | None = None

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    @property
    def digest(self):
        return config_hash(self.config.source, self.seed)

    def spec(self):
        return self.config.chain.build()


def _require_split(split, field):
    if split not in KINETIC_SPLITS:
        raise ImproperlyConfigured(f"unknown split {split!r}; expected one of {KINETIC_SPLITS}", field=field)


def _initial_state(run, spec, H0, split, field):
    """
    The [state] table when given, otherwise a random state at energy H0.
    """
    s = run.config.initial_state(spec)
    if s is not None:
        return s
    if spec.is_rotator:
        _require_split(split, f"{field}.split")
        return states_at_energy(spec, np.array([H0]), run.rng, split=split).take(0)
    sampler = LevelSampler(spec, run.rng)
    if H0 <= sampler.floor:
        raise ImproperlyConfigured(f"H0={H0!r} is below the minimum energy {sampler.floor!r}", field=f"{field}.H0")
    p, q, ok = sampler.generic(np.array([float(H0)]))
    if not ok[0]:
        raise ImproperlyConfigured(f"no state found at H0={H0!r}", field=f"{field}.H0")
    return State.of(spec, p[:, 0], q[:, 0])


def _coeffs(run, spec, *, required):
    """
    Lyapunov coefficients from the [coeffs] table or a previous calibrate run.
    """
    path = run.out / COEFFS_FILE
    try:
        if run.config.coeffs is not None:
            table = run.config.coeffs
            coeffs = LyapCoeffs(a=table.a, h0=table.h0, C1=table.C1)
        elif path.exists():
            coeffs = LyapCoeffs.from_dict(json.loads(path.read_text(encoding="utf-8")))
        elif required:
            raise ImproperlyConfigured(f"no [coeffs] table and no {path}; run calibrate first", field="coeffs")
        else:
            return None
    except ValueError as error:
        raise ImproperlyConfigured(str(error), field="coeffs") from error
    if coeffs.N != spec.N:
        raise ImproperlyConfigured(f"coefficients are for N={coeffs.N}, chain has N={spec.N}", field="coeffs")
    return coeffs


def run_validate(run):
    chain = run.config.chain
    if chain.kind is ChainKind.ROTATOR:
        reports = [validate_rotor_potential(pot, subject=f"V_{j}") for j, pot in enumerate(chain.interaction, start=1)]
    else:
        reports = chain.raw().validate()
    return ReportGroup("validate", reports)


def run_simulate(run):
    block = run.config.block("simulate")
    spec = run.spec()
    s0 = _initial_state(run, spec, block.H0, block.split, "simulate")
    coeffs = _coeffs(run, spec, required=False) if spec.is_rotator else None
    return integrate(
        spec,
        s0,
        block.t_end,
        block.tol,
        sample_times=np.linspace(0.0, block.t_end, block.samples),
        coeffs=coeffs,
        wall_clock=run.wall_clock,
    )


def run_simulate_sde(run):
    block = run.config.block("sde")
    spec = run.spec()
    s0 = _initial_state(run, spec, block.H0, block.split, "sde")
    coeffs = _coeffs(run, spec, required=False) if spec.is_rotator else None
    return integrate_sde(spec, s0, block.t_end, block.dt, run.seed, members=block.members, coeffs=coeffs)


def _save_coeffs(run, coeffs):
    path = run.out / COEFFS_FILE
    path.write_text(json.dumps(coeffs.to_dict(), indent=2) + "\n", encoding="utf-8")
    logger.info("Saved coefficients to %s", path)


def run_calibrate(run):
    block = run.config.block("calibration")
    _require_split(block.split, "calibration.split")
    config = CalibConfig(
        samples=block.samples,
        h_lo=block.h_lo,
        h_hi=block.h_hi,
        growth_factor=block.growth_factor,
        max_rounds=block.max_rounds,
        seed_coeff=block.seed_coeff,
        kappa=block.kappa,
        tiers_per_decade=block.tiers_per_decade,
        fixed_coeffs=block.coeffs,
        split=block.split,
    )
    coeffs, report = calibrate_coeffs(run.spec(), config, rng=run.rng)
    _save_coeffs(run, coeffs)
    return report


def run_verify(run):
    block = run.config.block("verification")
    _require_split(block.split, "verification.split")
    spec = run.spec()
    coeffs = _coeffs(run, spec, required=True)
    if not math.isfinite(coeffs.C1):
        raise ImproperlyConfigured("C1 is not set; run calibrate first", field="coeffs.C1")
    return verify_theorem(
        spec,
        coeffs,
        block.samples,
        rng=run.rng,
        h_lo=block.h_lo,
        h_hi=block.h_hi,
        split=block.split,
        tiers_per_decade=block.tiers_per_decade,
    )


def run_matrosov_build(run):
    block = run.config.block("envelopes")
    spec = run.spec()
    try:
        grid = EnergyGrid.build(block.Q, block.eps, block.w_max, per_decade=block.levels_per_decade)
    except ValueError as error:
        raise ImproperlyConfigured(str(error), field="envelopes") from error
    r = block.r or default_order(spec)
    logger.info("Building Matrosov tables with r=%d on %d levels", r, len(grid))
    data = build_matrosov(spec, r, grid, block.budget, rng=run.rng)
    save_matrosov(data, run.out / block.directory)
    return table_report(data)


def run_matrosov_certify(run):
    block = run.config.block("certification")
    directory = run.out / block.directory
    if not (directory / HEADER_FILE).exists():
        raise ImproperlyConfigured(f"no tables in {directory}; run matrosov-build first", field="certification.directory")
    data = load_matrosov(directory)
    if block.corrupt_phi != 1.0:
        logger.warning("Negative control: phi scaled by %r", block.corrupt_phi)
        data = dataclasses.replace(data, phi=data.phi * block.corrupt_phi)
    return certify_strictness(run.spec(), data, block.budget, rng=run.rng)


def run_equilibria(run):
    block = run.config.block("equilibria")
    spec = run.spec()
    if block.brute_force:
        return brute_force_equilibria(spec, points=block.points)
    return find_equilibria(spec, budget=block.budget, rng=run.rng)


def run_order_stats(run):
    block = run.config.block("order_stats")
    spec = run.spec()
    kmax = block.kmax
    if kmax is None:
        kmax = validate_oscillator_potentials(spec).threshold_r
        if kmax is None:
            raise ImproperlyConfigured("the chain is not certified; set kmax explicitly", field="order_stats.kmax")
    return order_statistics(spec, block.budget, kmax, rng=run.rng)


def run_decay_scan(run):
    block = run.config.block("decay")
    unknown = sorted(set(block.families) - set(DECAY_FAMILIES))
    if unknown:
        raise ImproperlyConfigured(f"unknown famil(ies) {', '.join(unknown)}", field="decay.families")
    spec = run.spec()
    coeffs = _coeffs(run, spec, required=True)
    runs = len(block.H0) * len(block.families) * block.ensemble
    protocol = DecayProtocol(
        families=block.families,
        ensemble=block.ensemble,
        eps=block.eps,
        tol=block.tol,
        window_points=block.window_points,
        wall_clock=None if run.wall_clock is None else run.wall_clock / max(runs, 1),
    )
    return decay_scan(spec, coeffs, block.H0, protocol, seed=run.seed)


def run_generator_check(run):
    block = run.config.block("generator")
    try:
        observable = Observable.parse(block.observable)
    except ValueError as error:
        raise ImproperlyConfigured(str(error), field="generator.observable") from error
    spec = run.spec()
    coeffs = _coeffs(run, spec, required=observable.name == "W")
    s = _initial_state(run, spec, block.H0, block.split, "generator")
    return generator_check(spec, observable, s, block.dt, block.ensemble, seed=run.seed, coeffs=coeffs)


COMMANDS = {
    "validate": run_validate,
    "simulate": run_simulate,
    "simulate-sde": run_simulate_sde,
    "calibrate": run_calibrate,
    "verify-lyapunov": run_verify,
    "matrosov-build": run_matrosov_build,
    "matrosov-certify": run_matrosov_certify,
    "equilibria": run_equilibria,
    "order-stats": run_order_stats,
    "decay-scan": run_decay_scan,
    "generator-check": run_generator_check,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nublado-lyapunov",
        description="Lyapunov-function experiments on damped rotator and oscillator chains.",
    )
    parser.add_argument("command", choices=list(COMMANDS), help="Experiment to run.")
    parser.add_argument("--config", type=Path, required=True, help="Experiment TOML file.")
    parser.add_argument("--seed", type=int, default=None, help="Random seed (overrides the file's seed).")
    parser.add_argument("--out", type=Path, default=None, help=f"Output directory (or ${OUTPUT_DIR_ENV}).")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads for batched evaluation.")
    parser.add_argument("--wall-clock", type=float, default=None, help="Wall-clock budget in minutes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def output_dir(args, config):
    """
    --out, then the environment override, then the file's output_dir.
    """
    if args.out is not None:
        return args.out
    if os.environ.get(OUTPUT_DIR_ENV):
        return Path(os.environ[OUTPUT_DIR_ENV])
    return Path(config.output_dir or DEFAULT_OUTPUT_DIR)


def prepare(args):
    """
    Load the experiment, install settings and logging, and resolve flags.
    """
    config = load_config(args.config)
    overrides = dict(config.settings)
    if args.threads is not None:
        if args.threads < 1:
            raise ImproperlyConfigured("must be at least 1", field="--threads")
        overrides["THREADS"] = args.threads
    app_settings.configure(overrides)
    logging.config.dictConfig(app_settings.LOGGING)

    seed = config.seed if args.seed is None else args.seed
    if not 0 <= seed < 2**64:
        raise ImproperlyConfigured(f"seed must be an unsigned 64-bit integer, got {seed!r}", field="seed")
    if args.wall_clock is not None and args.wall_clock <= 0.0:
        raise ImproperlyConfigured("must be positive", field="--wall-clock")
    out = output_dir(args, config)
    out.mkdir(parents=True, exist_ok=True)
    wall_clock = None if args.wall_clock is None else 60.0 * args.wall_clock
    return Run(command=args.command, config=config, seed=seed, out=out, wall_clock=wall_clock)


def emit(run, report):
    """
    Write the CSV and summary of a report; return the exit status.
    """
    csv_path = write_csv(run.out / f"{run.command}.csv", report, name=run.command, digest=run.digest)
    write_summary(run.out / f"{run.command}.txt", report)
    status = "PASS" if report.passed else "FAIL"
    logger.info("%s: %s (%s)", run.command, status, csv_path)
    return EXIT_PASS if report.passed else EXIT_FAIL


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return EXIT_PASS if exit_.code in (0, None) else EXIT_USAGE

    try:
        run = prepare(args)
    except (ImproperlyConfigured, OSError) as error:
        logger.error("%s", error)
        return EXIT_USAGE

    try:
        report = COMMANDS[run.command](run)
    except CalibrationFailed as error:
        logger.error("%s", error)
        if error.report is not None:
            emit(run, error.report)
        return EXIT_FAIL
    except ImproperlyConfigured as error:
        logger.error("%s", error)
        return EXIT_USAGE
    except (LyapunovLabError, OverflowError, FloatingPointError) as error:
        logger.error("%s: %s", type(error).__name__, error)
        return EXIT_FAIL
    except ValueError as error:
        logger.error("%s", error)
        return EXIT_USAGE
    return emit(run, report)


if __name__ == "__main__":
    sys.exit(main())
