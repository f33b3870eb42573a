"""
Weighted Sobolev norms ||f||_{a,M} and the dual-side norms obtained from
powers of Lambda_M = Op(mu' + |xi|^2 / 2m + <x>^{2(M+1)}).
"""
import logging
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.sparse.linalg import cg

from qdamp.config import get_setting
from qdamp.errors import SolverError
from qdamp.models import EquivalenceBand, NormSpec
from qdamp.modules.field import assert_boundary_clean, inner_product, l2_norm, multi_indices, spectral_derivative
from qdamp.modules.quantize import garding_floor, quantize_poly
from qdamp.modules.symbols import lambda_m_symbol
from qdamp.utils.workers import map_ordered

logger = logging.getLogger(__name__)


def sobolev_norm(f, spec):
    """
    ||f|| + sum_{|alpha| <= 2a} ||d^alpha f|| + ||<x>^{2a(M+1)} f||; level 0 is plain L2.
    """
    if spec.a < 0:
        raise ValueError(f'sobolev_norm needs a >= 0, got {spec.a}; use dual_norm')
    assert_boundary_clean(f, where='sobolev_norm')
    if spec.a == 0:
        return l2_norm(f)

    total = l2_norm(f)
    for alpha in multi_indices(f.grid.dim, 2 * spec.a):
        total += l2_norm(spectral_derivative(f, alpha))
    weight = f.grid.bracket() ** (2 * spec.a * (spec.M + 1))
    total += l2_norm(f.with_values(weight * f.values))
    return float(total)


def lambda_m_operator(grid, spec):
    return quantize_poly(lambda_m_symbol(grid.dim, spec.M, spec.mu_prime, spec.mass), grid)


@lru_cache(maxsize=32)
def _cholesky(grid, M, mu_prime, mass):
    spec = NormSpec(a=1, M=M, mu_prime=mu_prime, mass=mass)
    A = lambda_m_operator(grid, spec).to_dense()
    return linalg.cho_factor(0.5 * (A + A.conj().T))


def _solve_lambda(f, spec):
    grid = f.grid
    if grid.size <= get_setting('DENSE_LIMIT'):
        factor = _cholesky(grid, float(spec.M), float(spec.mu_prime), float(spec.mass))
        return f.with_values(linalg.cho_solve(factor, f.flat).reshape(grid.shape))

    op = lambda_m_operator(grid, spec)
    rhs = f.flat
    solution, info = cg(op.as_linear_operator(), rhs, rtol=1e-13, atol=0.0,
                        maxiter=get_setting('SOLVER_MAXITER'))
    scale = max(np.linalg.norm(rhs), 1e-300)
    residual = float(np.linalg.norm(op.matvec(solution) - rhs) / scale)
    if residual > get_setting('LAMBDA_RESIDUAL_TOL'):
        logger.error('Lambda_M solve stopped with residual %.2e (info=%s)', residual, info)
        raise SolverError(f'Lambda_M inverse did not converge (residual {residual:.2e})',
                          residual=residual)
    return f.with_values(solution.reshape(grid.shape))


def lambda_M_power_apply(f, spec, p):
    """Apply Lambda_M^p for p in {-1, 0, 1}."""
    if p not in (-1, 0, 1):
        raise ValueError(f'power must be -1, 0 or 1, got {p}')
    if p == 0:
        return f
    if p == 1:
        return lambda_m_operator(f.grid, spec)(f)
    return _solve_lambda(f, spec)


def dual_norm(f, spec):
    """||Lambda_M^{-1} f||, the equivalent norm of the level -1 space."""
    if spec.a != -1:
        raise ValueError(f'dual_norm supports a = -1 only, got {spec.a}')
    if not np.any(f.values):
        return 0.0
    return l2_norm(lambda_M_power_apply(f, spec, -1))


def admissible_mu_prime(grid, spec):
    """
    Return (mu', raised). mu' is raised above the discrete floor when the
    Hermitian part of Lambda_M is not positive on the grid.
    """
    floor = garding_floor(lambda_m_operator(grid, spec))
    if floor > 0:
        return spec.mu_prime, False
    raised = spec.mu_prime - floor + 1.0
    logger.warning('Lambda_M floor %.3g is not positive; mu\' raised from %g to %g',
                   floor, spec.mu_prime, raised)
    return raised, True


def norm_equivalence_report(spec, ensemble, threads=None):
    """Ratios ||f||_{a,M} / ||Lambda_M^a f|| over an ensemble of states."""
    if spec.a < 1:
        raise ValueError(f'equivalence report needs a >= 1, got {spec.a}')
    ensemble = list(ensemble)
    if not ensemble:
        raise ValueError('ensemble must not be empty')

    def ratio(f):
        g = f
        for _ in range(spec.a):
            g = lambda_M_power_apply(g, spec, 1)
        return sobolev_norm(f, spec) / l2_norm(g)

    ratios = np.array(map_ordered(ratio, ensemble, threads))
    band = EquivalenceBand(ratios, float(ratios.min()), float(ratios.max()), float(np.median(ratios)))
    logger.info('equivalence band %s over %d states: [%.4g, %.4g]',
                spec.label, len(ratios), band.minimum, band.maximum)
    return band


def norm_table(states, spec):
    """One row per state: (state, a, M, value)."""
    rows = []
    for i, f in enumerate(states):
        value = dual_norm(f, spec) if spec.a < 0 else sobolev_norm(f, spec)
        rows.append({'state': i, 'a': spec.a, 'M': spec.M, 'value': value})
    return pd.DataFrame(rows, columns=['state', 'a', 'M', 'value'])


def duality_constant(f, g, spec):
    """|(f, g)| / (||Lambda_M^{-1} f|| * ||Lambda_M g||)."""
    dual = NormSpec(a=-1, M=spec.M, mu_prime=spec.mu_prime, mass=spec.mass)
    denominator = dual_norm(f, dual) * l2_norm(lambda_M_power_apply(g, spec, 1))
    if denominator == 0:
        return 0.0
    return float(abs(inner_product(f, g)) / denominator)
