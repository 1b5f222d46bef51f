from dataclasses import dataclass

from nublado_lyapunov.conf.base import AppSettings
from nublado_lyapunov.exceptions import ImproperlyConfigured

# The name of the experiment-file table that overrides these settings.
SETTINGS_DICT_NAME = "nublado_lyapunov"

# Environment variable that may redirect report output.
OUTPUT_DIR_ENV = "NUBLADO_LYAPUNOV_OUTPUT_DIR"

DEFAULT_LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "simple": {"format": "{levelname} {message}", "style": "{"},
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "simple",
        },
    },
    "loggers": {
        "nublado_lyapunov": {
            "handlers": ["console"],
            "level": "INFO",
            "propagate": True,
        },
    },
}

# The app settings default values.
SETTINGS_DEFAULTS = {
    # Rotor potential certification
    "GRID_POINTS": 4096,
    "REFINE_FACTOR": 4,
    "REFINE_ROUNDS": 3,
    "NONDEGENERACY_FLOOR": 1e-8,
    # Oscillator potential certification
    "CONVEXITY_BOX": 10.0,
    # Rotator coefficient calibration
    "KAPPA": 8.0,
    "COEFF_SEED": 10.0,
    "GROWTH_FACTOR": 4.0,
    "MAX_ROUNDS": 6,
    "TIERS_PER_DECADE": 2,
    "AUDIT_C": 1.0,
    "C1_MARGIN": 0.1,
    "CALIBRATION_SAMPLES": 10000,
    # Jets
    "ZERO_TOL": 1e-9,
    "EXTENDED_PRECISION": False,
    # Matrosov construction
    "ENVELOPE_SAFETY_LOW": 0.5,
    "ENVELOPE_SAFETY_HIGH": 2.0,
    "LEVELS_PER_DECADE": 64,
    "DERIVATIVE_INFLATION": 2.0,
    # Equilibria
    "NEWTON_STARTS_PER_PARTICLE": 32,
    "ROOT_DEDUPE_DISTANCE": 1e-6,
    "ROOT_RESIDUAL_TOL": 1e-10,
    # Simulation
    "DECAY_EPS": 0.05,
    "INTEGRATOR_METHOD": "DOP853",
    "THREADS": 1,
    "LOGGING": DEFAULT_LOGGING,
}


@dataclass(frozen=True)
class AppData:
    GRID_POINTS: int
    REFINE_FACTOR: int
    REFINE_ROUNDS: int
    NONDEGENERACY_FLOOR: float
    CONVEXITY_BOX: float
    KAPPA: float
    COEFF_SEED: float
    GROWTH_FACTOR: float
    MAX_ROUNDS: int
    TIERS_PER_DECADE: int
    AUDIT_C: float
    C1_MARGIN: float
    CALIBRATION_SAMPLES: int
    ZERO_TOL: float
    EXTENDED_PRECISION: bool
    ENVELOPE_SAFETY_LOW: float
    ENVELOPE_SAFETY_HIGH: float
    LEVELS_PER_DECADE: int
    DERIVATIVE_INFLATION: float
    NEWTON_STARTS_PER_PARTICLE: int
    ROOT_DEDUPE_DISTANCE: float
    ROOT_RESIDUAL_TOL: float
    DECAY_EPS: float
    INTEGRATOR_METHOD: str
    THREADS: int
    LOGGING: dict

    def __post_init__(self):
        for name, default in SETTINGS_DEFAULTS.items():
            value = getattr(self, name)
            # bool is an int subclass; keep the two apart.
            if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                object.__setattr__(self, name, float(value))
            elif isinstance(default, bool) != isinstance(value, bool) or not isinstance(value, type(default)):
                raise ImproperlyConfigured(
                    f"expected {type(default).__name__}, got {value!r}",
                    field=f"{SETTINGS_DICT_NAME}.{name}",
                )


app_settings = AppSettings(
    defaults=SETTINGS_DEFAULTS,
    settings_dict_name=SETTINGS_DICT_NAME,
    cls=AppData,
)
