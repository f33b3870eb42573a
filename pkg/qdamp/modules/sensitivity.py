"""
Parameter families of problems and the sensitivity equation
i dw/dt = H~ w + (d_rho H~) u, w(0) = 0.
"""
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import stats

from qdamp.config import get_setting
from qdamp.errors import ExpressionError, ParameterDomainError
from qdamp.models import EvolutionReport, NormSpec, RateReport, ScanReport
from qdamp.modules import quantize as q
from qdamp.modules.evolve import Problem, step_count, crank_nicolson_step, propagate
from qdamp.modules.field import l2_norm, make_grid, resample
from qdamp.modules.symbols import (
    SymbolExpr, check_derivative_growth, expression_function, generator_symbol, parameter_derivative_symbol,
    potential_functions, xi_names,
)
from qdamp.modules.wsnorm import sobolev_norm
from qdamp.utils.parsers import GENERAL
from qdamp.utils.workers import map_ordered

logger = logging.getLogger(__name__)

CLOSED_FORM = 'closed_form'
FINITE_DIFFERENCE = 'finite_difference'


@dataclass(frozen=True, eq=False)
class ParametrizedFamily:
    """
    A problem template whose V, A or k depend on the parameter `name`.
    `derivatives` holds closed-form d/d(name) expressions keyed 'V', 'A', 'k'.
    """

    potentials: object
    damping: object
    growth: object
    grid: object
    u0: object
    T: float
    name: str
    interval: tuple = (-np.inf, np.inf)
    derivatives: dict = field(default_factory=dict)
    fallback: bool = True
    chi: str | None = None

    def __post_init__(self):
        lo, hi = self.interval
        if not lo < hi:
            raise ValueError(f'parameter interval must be increasing, got {self.interval}')

    def _depends(self):
        """Fields whose expressions reference the parameter."""
        out = set()
        if self.potentials.V is not None and self.potentials.V.depends_on(self.name):
            out.add('V')
        if any(a.depends_on(self.name) for a in self.potentials.A):
            out.add('A')
        if not self.damping.is_zero and self.damping.k.depends_on(self.name):
            out.add('k')
        return out

    @cached_property
    def derivative_source(self):
        missing = self._depends() - set(self.derivatives)
        if not missing:
            return CLOSED_FORM
        if not self.fallback:
            raise ExpressionError(f'missing closed-form derivative for {sorted(missing)} '
                                  f'in {self.name!r} and finite differences are disabled',
                                  field='problem.dparams')
        logger.info('d/d%s of %s by finite differences', self.name, sorted(missing))
        return FINITE_DIFFERENCE

    def check_domain(self, rho):
        lo, hi = self.interval
        if not lo <= rho <= hi:
            raise ParameterDomainError(f'{self.name}={rho:g} leaves the interval [{lo:g}, {hi:g}]')

    @cached_property
    def _problems(self):
        return {}

    def problem(self, rho):
        self.check_domain(rho)
        key = float(rho)
        if key not in self._problems:
            update = {self.name: key}
            self._problems[key] = Problem(self.potentials.with_params(**update),
                                          self.damping.with_params(**update),
                                          self.growth, self.grid, self.u0, self.T, self.chi)
        return self._problems[key]

    def generator_symbol_at(self, params):
        return generator_symbol(self.potentials.with_params(**params), self.damping.with_params(**params))

    def refined(self, factor=2):
        """The family on factor * N points per axis, u0 interpolated."""
        return replace(self, grid=make_grid(self.grid.dim, factor * self.grid.points, self.grid.half_width),
                       u0=resample(self.u0, factor * self.grid.points))


def _closed_form_symbol(family, rho):
    dim = family.grid.dim
    update = {family.name: float(rho)}
    potentials = family.potentials.with_params(**update)
    _, A = potential_functions(potentials)
    mass = potentials.mass
    deriv = family.derivatives

    dV = expression_function(deriv.get('V'), dim, potentials.params)
    dA = [expression_function(e, dim, potentials.params) for e in deriv.get('A', ())]
    dk_expr = deriv.get('k')
    dk = expression_function(dk_expr, dim, {**family.damping.params, **update})

    degree = 1 if dA else 0
    if dk_expr is not None:
        k_degree = dk_expr.degree_in(xi_names(dim))
        degree = GENERAL if k_degree == GENERAL else max(degree, k_degree)

    def symbol(t, x, xi):
        out = np.asarray(dV(t, x, xi), dtype=np.complex128)
        for j, da in enumerate(dA):
            shift = A[j](t, x, xi) if A else 0.0
            out = out - (xi[j] - shift) * np.asarray(da(t, x, xi)) / mass
        return out - 1j * np.asarray(dk(t, x, xi))
    exprs = [deriv.get('V'), dk_expr, *deriv.get('A', ()), *(potentials.A if dA else ())]
    time_dependent = any(e is not None and e.depends_on('t') for e in exprs)
    return SymbolExpr(symbol, degree, f'd{family.name}_h_tilde', dim,
                      time_dependent=time_dependent, real=dk_expr is None)


def dpar_symbol(family, rho):
    """d_rho h~ = d_rho h - i d_rho k at rho."""
    family.check_domain(rho)
    if not family._depends():
        return SymbolExpr(lambda t, x, xi: 0.0, 0, f'd{family.name}_h_tilde', family.grid.dim,
                          time_dependent=False)
    if family.derivative_source == CLOSED_FORM:
        return _closed_form_symbol(family, rho)
    params = {**family.damping.params, **family.potentials.params, family.name: float(rho)}
    return parameter_derivative_symbol(family.generator_symbol_at, params, family.name)


def dpar_operator(family, rho, t=0.0, grid=None):
    grid = family.grid if grid is None else grid
    return q.quantize(dpar_symbol(family, rho), grid, t)


def sensitivity_march(generator_at, source_at, u_states, dt):
    """
    CN for w with the inhomogeneity source_at(t_mid) applied to (u_n + u_{n+1}) / 2.
    This is the exact rho-derivative of the CN map for u. Returns the list of w_n.
    """
    w = u_states[0].with_values(np.zeros(u_states[0].grid.shape))
    out = [w]
    for n in range(len(u_states) - 1):
        t = u_states[n].time_tag
        t_mid = t + 0.5 * dt
        average = 0.5 * (u_states[n].values + u_states[n + 1].values)
        forcing = w.with_values(source_at(t_mid).apply(average))
        values, _ = crank_nicolson_step(generator_at(t_mid), w, dt, forcing)
        w = w.with_values(values.reshape(w.grid.shape), time_tag=t + dt)
        out.append(w)
    return out


def _trajectory(family, rho, config):
    """Forward run of the family at rho with every step kept."""
    keep = replace(config, stride=1, keep_states=True)
    return propagate(family.problem(rho), keep, check_floor=False)


def solve_sensitivity(family, rho, u_trajectory, config):
    """w = d_rho u along a stored trajectory of u (every step)."""
    problem = family.problem(rho)
    n_steps, dt = step_count(problem.T, config.dt)
    if len(u_trajectory.states) != n_steps + 1:
        raise ValueError(f'u trajectory has {len(u_trajectory.states)} states, needs every step ({n_steps + 1})')
    symbol = dpar_symbol(family, rho)
    frozen = {}

    def source_at(t):
        key = t if symbol.time_dependent else 0.0
        if key not in frozen:
            frozen[key] = q.quantize(symbol, family.grid, key)
        return frozen[key]

    states = sensitivity_march(problem.generator, source_at, u_trajectory.states, dt)
    report = EvolutionReport(times=np.array([s.time_tag for s in states]),
                             norms=np.array([l2_norm(s) for s in states]),
                             states=states, scheme='crank_nicolson', dt=dt)
    report.notes.append(f'derivative source: {family.derivative_source}')
    return report


def difference_quotient(family, rho, tau, config, threads=None):
    """(u(t; rho + tau) - u(t; rho)) / tau on every step."""
    if tau == 0:
        raise ValueError('tau must be nonzero')
    family.check_domain(rho + tau)
    base, shifted = map_ordered(lambda r: _trajectory(family, r, config), [rho, rho + tau], threads)
    states = [b.with_values((s.values - b.values) / tau) for b, s in zip(base.states, shifted.states)]
    return EvolutionReport(times=base.times, norms=np.array([l2_norm(s) for s in states]),
                           states=states, scheme=config.scheme, dt=base.dt)


def _max_gap(a, b):
    return max(l2_norm(x - y) for x, y in zip(a.states, b.states))


def bound_ratio(family, w, level=(0, 0.0)):
    """max_t ||w(t)||_{a,M} / ||u0||_{a+1,M}; None when u0 vanishes."""
    a, M = level
    spec = NormSpec(a=int(a), M=float(M))
    initial = sobolev_norm(family.u0, NormSpec(a=int(a) + 1, M=float(M)))
    if not initial > 0:
        return None
    return max(sobolev_norm(s, spec) for s in w.states) / initial


def ratios_in_band(ratios, step, slack=None):
    """Successive error ratios inside (1 -+ slack) * step; returns (ok, band)."""
    slack = get_setting('SENSITIVITY_RATIO_SLACK') if slack is None else slack
    band = ((1.0 - slack) * step, (1.0 + slack) * step)
    ratios = np.asarray(ratios, dtype=float)
    ok = bool(np.all(np.isfinite(ratios)) and np.all((ratios >= band[0]) & (ratios <= band[1])))
    return ok, band


def refined_bound_ratio(family, rho, config, level=(0, 0.0)):
    """The bound ratio recomputed with N -> 2N and dt -> dt/2."""
    fine = family.refined()
    fine_config = replace(config, dt=0.5 * config.dt)
    w = solve_sensitivity(fine, rho, _trajectory(fine, rho, fine_config), fine_config)
    return bound_ratio(fine, w, level)


def convergence_study(family, rho, taus, config, level=(0, 0.0), threads=None, refine=True):
    """
    max_t ||w_tau - w|| per tau, the fitted order, and the bound ratio
    max_t ||w||_{a,M} / ||u0||_{a+1,M}. The verdict needs order >= 0.9,
    successive error ratios near the tau step and, with refine, the bound
    ratio stable within REFINEMENT_TOL under N -> 2N, dt -> dt/2.
    """
    taus = np.array(sorted((float(t) for t in taus), reverse=True))
    if len(taus) < 3:
        raise ValueError('convergence study needs at least 3 values of tau')
    steps = taus[1:] / taus[:-1]
    if not np.allclose(steps, steps[0], rtol=1e-6):
        raise ValueError('taus must form a geometric progression')

    u = _trajectory(family, rho, config)
    w = solve_sensitivity(family, rho, u, config)
    errors = np.array(map_ordered(lambda tau: _max_gap(difference_quotient(family, rho, tau, config), w),
                                  taus, threads))
    ratios = errors[1:] / np.where(errors[:-1] > 0, errors[:-1], np.nan)
    notes = [f'derivative source: {family.derivative_source}']

    ratio = bound_ratio(family, w, level)
    refined, gap, stable = None, None, True
    if refine and ratio is not None:
        refined = refined_bound_ratio(family, rho, config, level)
        gap = abs(refined - ratio) / ratio
        stable = gap <= get_setting('REFINEMENT_TOL')
        if not stable:
            logger.warning('bound ratio moved %.1f%% under refinement (%.6g -> %.6g)', 100 * gap, ratio, refined)
            notes.append(f'bound ratio not refinement-stable: {ratio:.6g} -> {refined:.6g}')

    scale = max(1.0, max(l2_norm(s) for s in w.states))
    floor = 1e-12 * scale
    band = None
    if np.all(errors <= floor * 10):
        order, passed, monotone = None, stable, True
        notes.append('errors at rounding floor')
    else:
        fit = stats.linregress(np.log(taus), np.log(np.maximum(errors, floor)))
        order = float(fit.slope)
        monotone = bool(np.all(np.diff(errors) < 0))
        in_band, band = ratios_in_band(ratios, float(steps[0]))
        passed = order >= get_setting('SENSITIVITY_MIN_ORDER') and in_band and stable
        if not monotone:
            logger.warning('difference-quotient errors are not monotone: %s', errors)
            notes.append('non-monotone error sequence')
        if not in_band:
            logger.warning('error ratios %s leave the band %s', ratios, band)
    for tau, error in zip(taus, errors):
        logger.info('tau=%g error=%.4e', tau, error)
    return RateReport(taus=taus, errors=errors, ratios=ratios, order=order, passed=passed,
                      monotone=monotone, bound_ratio=ratio,
                      derivative_source=family.derivative_source, notes=notes,
                      ratio_band=band, refined_bound_ratio=refined, refinement_gap=gap)


def continuity_scan(family, rho, taus, config, level=(0, 0.0), threads=None):
    """max_t ||u(t; rho + tau) - u(t; rho)||_{a,M} along a decreasing tau sequence."""
    taus = np.array(sorted((float(t) for t in taus), reverse=True))
    a, M = level
    spec = NormSpec(a=int(a), M=float(M))
    base = _trajectory(family, rho, config)

    def gap(tau):
        family.check_domain(rho + tau)
        shifted = _trajectory(family, rho + tau, config)
        return max(sobolev_norm(s - b, spec) for s, b in zip(shifted.states, base.states))

    gaps = np.array(map_ordered(gap, taus, threads))
    decreasing = bool(np.all(np.diff(gaps) <= 1e-14))
    if not decreasing:
        logger.warning('continuity scan is not monotone: %s', gaps)
    return ScanReport(variable='tau', values=taus, norms=gaps, passed=decreasing,
                      extras={'level': spec.label, 'decreasing': decreasing})


def _derivative_functions(family, rho):
    """d_rho V, d_rho A_j and d_rho k as functions of (t, x, xi)."""
    dim = family.grid.dim
    depends = family._depends()
    update = {family.name: float(rho)}
    params = {**family.potentials.params, **update}
    step = get_setting('PARAM_FD_STEP') * (1.0 + abs(rho))

    def finite(build):
        upper = build({family.name: rho + step})
        lower = build({family.name: rho - step})
        return lambda t, x, xi: (np.asarray(upper(t, x, xi)) - np.asarray(lower(t, x, xi))) / (2 * step)

    out = {}
    if 'V' in depends:
        out['V'] = (expression_function(family.derivatives['V'], dim, params) if 'V' in family.derivatives
                    else finite(lambda u: potential_functions(family.potentials.with_params(**u))[0]))
    if 'A' in depends:
        if 'A' in family.derivatives:
            out['A'] = [expression_function(e, dim, params) for e in family.derivatives['A']]
        else:
            out['A'] = [finite(lambda u, j=j: potential_functions(family.potentials.with_params(**u))[1][j])
                        for j in range(dim)]
    if 'k' in depends:
        k_params = {**family.damping.params, **update}
        out['k'] = (expression_function(family.derivatives['k'], dim, k_params) if 'k' in family.derivatives
                    else finite(lambda u: expression_function(family.damping.k, dim, {**family.damping.params, **u})))
    return out


def check_parameter_growth(family, box, n_samples=41, rho_samples=None):
    """
    Growth clauses of the rho-derivatives, fitted at several rho in the interval.
    Returns one AssumptionReport per sampled rho.
    """
    if rho_samples is None:
        lo, hi = family.interval
        if np.isfinite(lo) and np.isfinite(hi):
            rho_samples = np.linspace(lo, hi, 3)
        else:
            rho_samples = [float(family.potentials.params.get(family.name, 0.0))]
    reports = []
    for rho in rho_samples:
        derivatives = _derivative_functions(family, rho)
        report = check_derivative_growth(derivatives.get('V'), derivatives.get('A'), derivatives.get('k'),
                                         family.growth, box, family.grid.dim, n_samples)
        report.notes.append(f'{family.name}={float(rho):g}')
        reports.append(report)
    return reports
