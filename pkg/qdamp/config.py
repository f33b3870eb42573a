import logging
import os

from dotenv import load_dotenv

load_dotenv()


def _env_float(name, default):
    """Read a float override from the environment (QDAMP_ prefix)."""
    value = os.environ.get(f'QDAMP_{name}')
    return float(value) if value is not None else default


def _env_int(name, default):
    value = os.environ.get(f'QDAMP_{name}')
    return int(value) if value is not None else default


class Config:
    """Base configuration class."""

    # Logging
    LOG_LEVEL = os.environ.get('QDAMP_LOG_LEVEL', 'INFO')
    LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

    # Grids and guards
    MAX_GRID_POINTS = 2 ** 22
    DENSE_LIMIT = 4096              # largest N^D for dense kernels
    DENSE_STEP_LIMIT = 1024         # CN steps factor densely up to this size
    MAX_DERIVATIVE_ORDER = 6
    BOUNDARY_MARGIN = _env_float('BOUNDARY_MARGIN', 0.05)
    BOUNDARY_MASS_THRESHOLD = _env_float('BOUNDARY_MASS_THRESHOLD', 1e-8)

    # Solvers
    CN_RESIDUAL_TOL = 1e-11
    LAMBDA_RESIDUAL_TOL = 1e-10
    GMRES_RTOL = 1e-13
    SOLVER_MAXITER = 2000
    BLOWUP_FACTOR = 10.0
    GROWTH_RATE_SLACK = _env_float('GROWTH_RATE_SLACK', 1e-4)
    MONOTONE_TOL = 1e-10

    # Power iteration
    POWER_ITERS = _env_int('POWER_ITERS', 300)
    POWER_TOL = 1e-12
    POWER_CONVERGED_TOL = 1e-4

    # Symbols and finite differences
    FD_STEP = 1e-4                  # derivative step, scaled by (1 + |x|)
    FD_STEP_HIGH = 2e-3             # step for derivative orders >= 2
    TIME_FD_STEP = 1e-5
    PARAM_FD_STEP = 1e-5            # scaled by (1 + |rho|)
    GROWTH_EXPONENT_TOL = 0.5
    DELTA_MARGIN_TOL = 0.1
    DEFAULT_CHI = 'gaussian'

    # Scans
    PARAMETRIX_EXPONENT = -0.5
    PARAMETRIX_BAND = (-0.65, -0.35)
    PARAMETRIX_FIT_EXCLUSION = 10.0  # drop mu within this factor of C1*
    REMAINDER_FLOOR = 1e-11
    COMMUTATOR_BAND_RATIO = 3.0
    DIVERGENCE_SLOPE_TOL = -0.15
    SENSITIVITY_MIN_ORDER = 0.9
    SENSITIVITY_RATIO_SLACK = 0.2   # successive error ratios within (1 +- slack) * tau step
    REFINEMENT_TOL = 0.10           # N -> 2N, dt -> dt/2

    # Runs
    DEFAULT_SEED = _env_int('SEED', 20240101)
    DEFAULT_THREADS = _env_int('THREADS', 1)
    OUTPUT_DIRECTORY = os.environ.get('QDAMP_OUTPUT', 'out')

    @staticmethod
    def init_app(app):
        level = getattr(logging, str(app.config['LOG_LEVEL']).upper(), logging.INFO)
        logger = logging.getLogger('qdamp')
        logger.setLevel(level)
        if not logger.handlers:
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter(app.config['LOG_FORMAT']))
            logger.addHandler(handler)


class DevelopmentConfig(Config):
    """Development configuration."""
    DEBUG = True


class TestingConfig(Config):
    """Testing configuration."""
    TESTING = True
    LOG_LEVEL = 'WARNING'
    POWER_ITERS = 200
    DEFAULT_SEED = 7


class ProductionConfig(Config):
    """Production configuration."""
    DEBUG = False
    LOG_LEVEL = os.environ.get('QDAMP_LOG_LEVEL', 'WARNING')


config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'production': ProductionConfig,
    'default': DevelopmentConfig
}


def get_setting(name):
    """
    Look up a setting from the active Flask app, falling back to the
    default configuration class when no application context is pushed.
    """
    from flask import current_app, has_app_context

    if has_app_context() and name in current_app.config:
        return current_app.config[name]
    return getattr(config['default'], name)
