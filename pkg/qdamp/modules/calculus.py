"""
Operator-calculus diagnostics on dense kernels: the parametrix of mu + H and
the decay of its remainder in mu, the resolvent, commutators of the cutoff
with Lambda, and the Q_a operators of the energy method.

Grids here stay within DENSE_LIMIT; these are correctness instruments.
"""
import logging
from functools import lru_cache

import numpy as np
from scipy import linalg, stats

from qdamp.config import get_setting
from qdamp.errors import FitError, ParameterDomainError
from qdamp.models import ScanReport
from qdamp.modules import quantize as q
from qdamp.modules.evolve import cutoff_operator, regularized_operator
from qdamp.modules.field import l2_norm
from qdamp.modules.symbols import (
    SymbolExpr, default_box, fit_lower_bound_constants, lambda_symbol, sample_lattice, symmetrized_symbol,
)
from qdamp.utils.parsers import GENERAL
from qdamp.utils.workers import map_ordered

logger = logging.getLogger(__name__)

Q_LEVELS = (-1, 1, 2)


@lru_cache(maxsize=16)
def lower_bound_constants(problem):
    """
    (C0*, C1*) of the problem's Hamiltonian symbol. When h does not dominate
    the weight, C0* = 0 and C1* is the sampled depth of h below zero.
    """
    box = default_box(problem.grid)
    try:
        return fit_lower_bound_constants(problem.potentials, problem.growth, box)
    except FitError as e:
        x, xi, _ = sample_lattice(box, problem.grid.dim, 21)
        depth = max(0.0, -min(float(np.min(np.real(problem.hamiltonian_symbol(t, x, xi)))) for t in box.times))
        logger.warning('%s; using C0*=0, C1*=%.3g', e.message, depth)
        return 0.0, depth


def admissible_floor(problem):
    """C1* + C0*/2, the smallest mu the parametrix construction accepts."""
    c0, c1 = lower_bound_constants(problem)
    return c1 + 0.5 * c0


# ==================== PARAMETRIX ====================

def parametrix_symbol(h_s, mu, floor=None):
    """p_mu = 1 / (mu + h_s)."""
    if floor is not None and mu < floor:
        raise ParameterDomainError(f'mu={mu:g} is below the admissible floor {floor:.6g}')
    if not mu > 0:
        raise ParameterDomainError(f'mu must be positive, got {mu:g}')

    def p(t, x, xi):
        return 1.0 / (mu + np.asarray(h_s._func(t, x, xi)))
    return SymbolExpr(p, GENERAL, f'p_mu({mu:g})', h_s.dim, time_dependent=h_s.time_dependent, real=h_s.real)


def parametrix_operator(problem, mu, t=0.0):
    """Left-ordered Op(p_mu) as a dense kernel."""
    symbol = parametrix_symbol(symmetrized_symbol(problem.potentials), mu, admissible_floor(problem))
    return q.quantize_dense(symbol, problem.grid, t, ordering='standard')


def remainder_matrix(H, P, mu):
    """(mu + H) P - I."""
    R = mu * P + H @ P
    R[np.diag_indices_from(R)] -= 1.0
    return R


def remainder_norm(problem, mu, iters=None, t=0.0, seed=None):
    """||(mu + H) Op(p_mu) - I|| by power iteration with `iters` iterations."""
    P = parametrix_operator(problem, mu, t)
    H = problem.hamiltonian(t).to_dense()
    R = q.dense_handle(remainder_matrix(H, P.matrix, mu), problem.grid, t, label=f'R_mu({mu:g})')
    return q.op_norm_estimate(R, iters=iters, seed=seed).value


def decay_report(mus, norms, shift=0.0, extras=None):
    """
    Fit log ||R_mu|| against log(mu - shift) on the points outside the exclusion
    zone. The verdict needs the slope inside the band and strictly decreasing
    norms; bound_consistent records the one-sided reading (slope at most the
    upper edge) on its own.
    """
    expected = get_setting('PARAMETRIX_EXPONENT')
    band = tuple(get_setting('PARAMETRIX_BAND'))
    floor = get_setting('REMAINDER_FLOOR')
    report = ScanReport('mu', np.asarray(mus, dtype=float), np.asarray(norms, dtype=float),
                        expected=expected, band=band, extras=dict(extras or {}))
    for mu, value in zip(report.values, report.norms):
        logger.info('mu=%g remainder %.4e', mu, value)

    if np.max(report.norms) <= floor:
        report.skipped = True
        report.passed = True
        report.notes.append('remainder at rounding floor; slope test skipped')
        return report

    mask = (report.values > get_setting('PARAMETRIX_FIT_EXCLUSION') * shift) & (report.norms > floor)
    report.fit_mask = mask
    if mask.sum() < 4:
        raise FitError(f'decay fit needs 4 points outside the exclusion zone, got {int(mask.sum())}')
    x = np.log(report.values[mask] - shift)
    y = np.log(report.norms[mask])
    fit = stats.linregress(x, y)
    if not np.isfinite(fit.slope):
        raise FitError('degenerate decay regression')

    report.slope = float(fit.slope)
    report.intercept = float(fit.intercept)
    report.half_width = float(stats.t.ppf(0.975, mask.sum() - 2) * fit.stderr)
    report.within_band = band[0] <= report.slope <= band[1]
    report.bound_consistent = report.slope <= band[1]
    decreasing = bool(np.all(np.diff(report.norms[mask]) < 0))
    report.extras['decreasing'] = decreasing
    report.extras['residuals'] = y - (fit.intercept + fit.slope * x)
    report.passed = report.within_band and decreasing
    if not report.passed:
        logger.warning('remainder decay slope %.3f (band %s), decreasing=%s', report.slope, band, decreasing)
    return report


def check_mu_list(mus):
    mus = np.array(sorted(float(m) for m in mus))
    if len(mus) < 5:
        raise ValueError(f'decay scan needs at least 5 mu values, got {len(mus)}')
    if mus[0] <= 0 or np.log10(mus[-1] / mus[0]) < 2 - 1e-9:
        raise ValueError('mu values must be positive and span at least two decades')
    return mus


def remainder_decay_scan(problem, mu_list, iters=None, t=0.0, threads=None, seed=None):
    """||R_mu|| over mu_list with the log-log decay fit against mu - C1*."""
    mus = check_mu_list(mu_list)
    c0, c1 = lower_bound_constants(problem)
    floor = c1 + 0.5 * c0
    if mus[0] < floor:
        raise ParameterDomainError(f'mu={mus[0]:g} is below the admissible floor {floor:.6g}')

    H = problem.hamiltonian(t).to_dense()
    h_s = symmetrized_symbol(problem.potentials)

    def norm(mu):
        P = q.quantize_dense(parametrix_symbol(h_s, mu), problem.grid, t, ordering='standard')
        R = q.dense_handle(remainder_matrix(H, P.matrix, mu), problem.grid, t)
        return q.op_norm_estimate(R, iters=iters, seed=seed).value

    norms = np.array(map_ordered(norm, mus, threads))
    return decay_report(mus, norms, shift=c1, extras={'C0': c0, 'C1': c1, 'floor': floor})


# ==================== RESOLVENT ====================

def resolvent_apply(problem, mu, f, t=0.0):
    """Solve (mu + H(t)) g = f directly."""
    H = problem.hamiltonian(t)
    shifted = H + mu
    if problem.grid.size <= get_setting('DENSE_LIMIT'):
        g = linalg.solve(shifted.to_dense(), f.flat)
    else:
        g = q.solve_iterative(shifted, f.flat, where='resolvent')
    return f.with_values(g.reshape(problem.grid.shape))


def neumann_resolvent(problem, mu, f, terms=10, t=0.0):
    """Op(p_mu) sum_{n < terms} (-R_mu)^n f."""
    if terms < 1:
        raise ValueError(f'terms must be positive, got {terms}')
    P = parametrix_operator(problem, mu, t)
    H = problem.hamiltonian(t)
    v = f.flat
    total = v.copy()
    for _ in range(terms - 1):
        Pv = P.matvec(v)
        v = v - mu * Pv - H.matvec(Pv)
        total = total + v
    return f.with_values(P.matvec(total).reshape(problem.grid.shape))


def resolvent_cross_check(problem, mu, f, terms=10, t=0.0, seed=None):
    """
    Direct resolvent against the Neumann series. The series is only compared
    when ||R_mu|| < 1; otherwise it is flagged as not summable.
    """
    direct = resolvent_apply(problem, mu, f, t)
    remainder = remainder_norm(problem, mu, t=t, seed=seed)
    result = {'direct': direct, 'remainder': remainder, 'summable': remainder < 1.0,
              'neumann': None, 'gap': None}
    if remainder >= 1.0:
        logger.warning('Neumann series not summable at mu=%g: ||R_mu||=%.3g', mu, remainder)
        return result
    series = neumann_resolvent(problem, mu, f, terms, t)
    scale = max(l2_norm(direct), 1e-300)
    result['neumann'] = series
    result['gap'] = l2_norm(series - direct) / scale
    logger.info('resolvent at mu=%g: Neumann gap %.3e after %d terms', mu, result['gap'], terms)
    return result


# ==================== COMMUTATORS AND Q_a ====================

def lambda_operator(problem, mu, t=0.0):
    """Lambda(t) = Op(mu + h_s)."""
    return q.quantize(lambda_symbol(problem.potentials, mu), problem.grid, t)


def _epsilons(epsilon_list):
    epsilons = sorted((float(e) for e in epsilon_list), reverse=True)
    if len(epsilons) < 4:
        raise ValueError(f'epsilon scan needs at least 4 values, got {len(epsilons)}')
    if not all(0 < e <= 1 for e in epsilons):
        raise ValueError('epsilon values must lie in (0, 1]')
    return np.array(epsilons)


def uniform_band_report(variable, values, norms, scale=1.0, extras=None):
    """
    Band ratio max/min and log-log slope of norms along a decreasing scan
    variable. Passes when the ratio is at most COMMUTATOR_BAND_RATIO and the
    norms do not diverge as the variable goes to 0.
    """
    report = ScanReport(variable, np.asarray(values, dtype=float), np.asarray(norms, dtype=float),
                        extras=dict(extras or {}))
    for value, norm in zip(report.values, report.norms):
        logger.info('%s=%g norm %.4e', variable, value, norm)

    if np.max(report.norms) <= get_setting('REMAINDER_FLOOR') * max(scale, 1.0):
        report.skipped = True
        report.passed = True
        report.within_band = True
        report.notes.append('operator vanishes to rounding along the scan')
        return report

    ratio = float(np.max(report.norms) / max(np.min(report.norms), 1e-300))
    fit = stats.linregress(np.log(report.values), np.log(np.maximum(report.norms, 1e-300)))
    order = np.argsort(report.values)[::-1]
    divergent_run = bool(np.all(np.diff(report.norms[order]) > 0))
    report.slope = float(fit.slope)
    report.intercept = float(fit.intercept)
    report.half_width = float(stats.t.ppf(0.975, len(report.values) - 2) * fit.stderr)
    report.within_band = ratio <= get_setting('COMMUTATOR_BAND_RATIO')
    report.extras.update({'band_ratio': ratio, 'divergent_run': divergent_run})
    bounded = report.slope >= get_setting('DIVERGENCE_SLOPE_TOL') and not divergent_run
    report.extras['bounded'] = bounded
    report.passed = report.within_band and bounded
    if not report.passed:
        logger.warning('%s scan: band ratio %.3g, slope %.3f, strictly increasing=%s',
                       variable, ratio, report.slope, divergent_run)
    return report


def commutator_norm(problem, epsilon, t=0.0, mu=None, iters=None, seed=None, lam=None):
    """||[X_eps, Lambda]||."""
    mu = problem.mu if mu is None else mu
    L = lambda_operator(problem, mu, t).to_dense() if lam is None else lam
    X = cutoff_operator(problem, epsilon, t, mu).matrix
    C = q.dense_handle(X @ L - L @ X, problem.grid, t, label=f'[X_eps({epsilon:g}), Lambda]')
    return q.op_norm_estimate(C, iters=iters, seed=seed).value


def commutator_bound_scan(problem, epsilon_list, t=0.0, mu=None, threads=None, iters=None, seed=None):
    """[X_eps, Lambda] norms over the epsilon list, judged by uniform_band_report."""
    epsilons = _epsilons(epsilon_list)
    mu = problem.mu if mu is None else mu
    lam = lambda_operator(problem, mu, t)
    L = lam.to_dense()
    norms = map_ordered(lambda e: commutator_norm(problem, e, t, mu, iters, seed, lam=L), epsilons, threads)
    scale = q.op_norm_estimate(lam, iters=iters, seed=seed).value
    return uniform_band_report('epsilon', epsilons, norms, scale=scale, extras={'mu': mu})


def _power(L, a):
    if a == 1:
        return L
    if a == 2:
        return L @ L
    return linalg.inv(L)


def q_a_matrix(problem, a, epsilon, t=0.0, mu=None):
    """(i d/dt Lambda^a - [H~_eps, Lambda^a]) Lambda^{-a} at time t."""
    if a not in Q_LEVELS:
        raise ValueError(f'a must be one of {Q_LEVELS}, got {a}')
    mu = problem.mu if mu is None else mu
    La = _power(lambda_operator(problem, mu, t).to_dense(), a)
    if problem.hamiltonian_symbol.time_dependent:
        step = get_setting('TIME_FD_STEP')
        upper = _power(lambda_operator(problem, mu, t + step).to_dense(), a)
        lower = _power(lambda_operator(problem, mu, t - step).to_dense(), a)
        dLa = (upper - lower) / (2.0 * step)
    else:
        dLa = np.zeros_like(La)
    H = regularized_operator(problem, epsilon, t, mu).matrix
    B = 1j * dLa - (H @ La - La @ H)
    # B La^{-1} via a transposed solve
    return linalg.solve(La.T, B.T).T


def q_a_epsilon_norm(problem, a, epsilon, t=0.0, mu=None, iters=None, seed=None):
    """||Q_a(eps)|| for a in {-1, 1, 2}."""
    Q = q.dense_handle(q_a_matrix(problem, a, epsilon, t, mu), problem.grid, t, label=f'Q_{a}')
    return q.op_norm_estimate(Q, iters=iters, seed=seed).value


def q_a_identity_gap(problem, epsilon, t=0.0, mu=None):
    """
    Relative gaps of Q_{-1} = -Lambda^{-1} Q_1 Lambda and Q_2 = Q_1 + Lambda Q_1 Lambda^{-1}.
    """
    mu = problem.mu if mu is None else mu
    L = lambda_operator(problem, mu, t).to_dense()
    Q1 = q_a_matrix(problem, 1, epsilon, t, mu)
    Qm1 = q_a_matrix(problem, -1, epsilon, t, mu)
    Q2 = q_a_matrix(problem, 2, epsilon, t, mu)

    def gap(actual, predicted):
        scale = max(np.linalg.norm(actual, 2), np.linalg.norm(predicted, 2), 1e-300)
        return float(np.linalg.norm(actual - predicted, 2) / scale)

    return {
        'minus_one': gap(Qm1, -linalg.solve(L, Q1 @ L)),
        'two': gap(Q2, Q1 + L @ linalg.solve(L.T, Q1.T).T),
    }


def q_a_scan(problem, a, epsilon_list, t=0.0, mu=None, threads=None, iters=None, seed=None):
    """||Q_a(eps)|| over the epsilon list with the same band verdict as the commutator scan."""
    epsilons = _epsilons(epsilon_list)
    mu = problem.mu if mu is None else mu
    norms = map_ordered(lambda e: q_a_epsilon_norm(problem, a, e, t, mu, iters, seed), epsilons, threads)
    return uniform_band_report('epsilon', epsilons, norms, extras={'mu': mu, 'a': a})
