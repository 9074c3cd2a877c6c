"""
Constants and configuration for grbLMM

Defaults are read from config/grblmm.toon; if the file is missing or
malformed the in-code DEFAULTS below are used instead.
"""

import copy
import os

from toon_parser import load_toon_file, ToonParseError

VERSION = "1.0.0"
FIT_FORMAT_VERSION = "1"

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "config")
DEFAULT_CONFIG_FILE = os.path.join(CONFIG_DIR, "grblmm.toon")

DEFAULTS = {
    "boost": {
        "nu": 0.1,
        "m_stop": 1000,
        "stopping": "cv",
        "k": 10,
        "seed": 0,
        "variance_estimator": "mean_square",
        "slope_interactions": False,
        "gamma_every": 1,
        "workers": 1,
    },
    "numerics": {
        "sigma2_floor": 1e-10,
        "q_floor": 1e-10,
        "init_tol": 1e-6,
        "init_max_rounds": 200,
        "monotonicity_tol": 1e-9,
        "degenerate_tol": 1e-12,
    },
    "cli": {
        "aic_max_n": 2000,
    },
    "simulation": {
        "design": "random_intercepts",
        "n": 50,
        "n_i": 10,
        "p": 10,
        "tau": 0.4,
        "sigma": 0.4,
        "replications": 20,
        "seed": 1,
        "m_stop": 1000,
        "nu": 0.1,
        "k": 10,
    },
}


def _merge(base, override):
    """Recursively overlay parsed config values onto the defaults"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path=None):
    """Load a TOON config file layered over DEFAULTS"""
    if path is None:
        try:
            return _merge(DEFAULTS, load_toon_file(DEFAULT_CONFIG_FILE))
        except (ToonParseError, OSError):
            return copy.deepcopy(DEFAULTS)
    return _merge(DEFAULTS, load_toon_file(path))


CONFIG = load_config()

BOOST = CONFIG["boost"]
NUMERICS = CONFIG["numerics"]
SIMULATION = CONFIG["simulation"]

SIGMA2_FLOOR = NUMERICS["sigma2_floor"]
Q_FLOOR = NUMERICS["q_floor"]
INIT_TOL = NUMERICS["init_tol"]
INIT_MAX_ROUNDS = NUMERICS["init_max_rounds"]
MONOTONICITY_TOL = NUMERICS["monotonicity_tol"]
DEGENERATE_TOL = NUMERICS["degenerate_tol"]
AIC_MAX_N = CONFIG["cli"]["aic_max_n"]

STOPPING_RULES = ("cv", "aic", "none")
VARIANCE_ESTIMATORS = ("mean_square", "centered")
DESIGNS = ("random_intercepts", "random_slopes", "constant_covariate")

# Informative fixed effects of the simulation designs (intercept first)
TRUE_INTERCEPT = 1.0
TRUE_SLOPES = (2.0, 4.0, 3.0, 5.0)
SLOPE_CORRELATION = 0.6

EXIT_OK = 0
EXIT_ARGUMENT = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
