"""
Time propagation of i du/dt = (H(t) - iK(t)) u + f(t).

Crank-Nicolson is the default scheme; generators are frozen at the step
midpoint. The module also runs the backward adjoint problem, the pairing
test between the two, and the cutoff-regularized generator diagnostics.
"""
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import linalg, stats

from qdamp.config import get_setting
from qdamp.errors import BlowupError, ConfigError, DegeneratePairingError, FitError, GridError
from qdamp.models import (
    DampingSpec, EvolutionReport, GrowthClass, NormSpec, PotentialSpec, ScanReport, State, variable_names,
)
from qdamp.modules import quantize as q
from qdamp.modules.field import assert_boundary_clean, inner_product, l2_norm, normalize
from qdamp.modules.symbols import (
    check_growth, coordinate_env, cutoff_symbol, damping_symbol, default_box, default_mu,
    fit_lower_bound_constants, hamiltonian_symbol,
)
from qdamp.modules.wsnorm import dual_norm, sobolev_norm
from qdamp.utils.parsers import parse_expression
from qdamp.utils.workers import map_ordered

logger = logging.getLogger(__name__)

SCHEMES = ('crank_nicolson', 'rk4')


class GeneratorMixin:
    """
    Operator access shared by problem types. Subclasses provide `grid`,
    `hamiltonian_symbol`, `damping_symbol` and `damped`.
    """

    @property
    def time_dependent(self):
        return self.hamiltonian_symbol.time_dependent or self.damping_symbol.time_dependent

    @cached_property
    def _frozen(self):
        return {}

    def _cached(self, key, t, build):
        # time-independent operators are built once
        if self.time_dependent:
            return build(t)
        if key not in self._frozen:
            self._frozen[key] = build(0.0)
        return self._frozen[key]

    def hamiltonian(self, t=0.0):
        return self._cached('H', t, lambda s: q.quantize(self.hamiltonian_symbol, self.grid, s))

    def damping_operator(self, t=0.0):
        if not self.damped:
            return q.zero_operator(self.grid, t)
        return self._cached('K', t, lambda s: q.quantize(self.damping_symbol, self.grid, s))

    def generator(self, t=0.0):
        """H(t) - i K(t)."""
        if not self.damped:
            return self.hamiltonian(t)
        return self._cached('G', t, lambda s: self.hamiltonian(s) - 1j * self.damping_operator(s))

    def with_u0(self, u0):
        return replace(self, u0=u0)


@dataclass(frozen=True, eq=False)
class Problem(GeneratorMixin):
    """Potentials, damping and grid of one evolution problem, with its initial datum."""

    potentials: PotentialSpec
    damping: DampingSpec
    growth: GrowthClass
    grid: object
    u0: object = None
    T: float = 1.0
    chi: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f'horizon T must be positive, got {self.T}')
        if self.potentials.dim != self.grid.dim:
            raise GridError(f'potentials are {self.potentials.dim}-dimensional, grid is {self.grid.dim}-dimensional')
        if self.u0 is not None:
            if self.u0.grid != self.grid:
                raise GridError('initial datum lives on a different grid')
            assert_boundary_clean(self.u0, where='initial data')

    @cached_property
    def hamiltonian_symbol(self):
        return hamiltonian_symbol(self.potentials)

    @cached_property
    def damping_symbol(self):
        return damping_symbol(self.damping, self.grid.dim)

    @property
    def damped(self):
        return not self.damping.is_zero

    @cached_property
    def mu(self):
        """Shift mu* from the fitted lower-bound constants; 1 when no fit exists."""
        try:
            c0, c1 = fit_lower_bound_constants(self.potentials, self.growth, default_box(self.grid))
        except FitError:
            logger.warning('no lower-bound fit for this problem; using mu = 1')
            return 1.0
        return default_mu(c0, c1)


# ==================== STEPPING ====================

def _solve_cn_dense(G, u, tau, rhs, factor=None):
    if factor is None:
        factor = linalg.lu_factor(np.eye(G.grid.size) + 1j * tau * G.to_dense())
    return linalg.lu_solve(factor, rhs), factor


def _solve_cn_iterative(G, u, tau, rhs):
    A = q.identity(G.grid, G.t) + (1j * tau) * G
    return q.solve_iterative(A, rhs, x0=u.flat, where='Crank-Nicolson solve')


def crank_nicolson_step(G, u, dt, forcing=None, factor=None):
    """
    (I + i dt/2 G) u1 = (I - i dt/2 G) u - i dt f. Returns (u1 values, factor);
    factor is the dense LU when the grid is small enough to use one.
    """
    tau = 0.5 * dt
    rhs = u.flat - 1j * tau * G.matvec(u.flat)
    if forcing is not None:
        rhs = rhs - 1j * dt * forcing.flat
    if G.grid.size <= get_setting('DENSE_STEP_LIMIT'):
        solution, factor = _solve_cn_dense(G, u, tau, rhs, factor)
        return solution, factor
    return _solve_cn_iterative(G, u, tau, rhs), None


def rk4_step(generator_at, u, t, dt, source=None, time_sign=1.0):
    """
    Classical four-stage step of u' = -i (G(t) u + f(t)). With time_sign = -1
    the generator is sampled at t, t - dt/2, t - dt.
    """
    def rate(s, v):
        out = generator_at(s).matvec(v)
        if source is not None:
            out = out + source(s).flat
        return -1j * out

    half = t + time_sign * 0.5 * dt
    v = u.flat
    k1 = rate(t, v)
    k2 = rate(half, v + 0.5 * dt * k1)
    k3 = rate(half, v + 0.5 * dt * k2)
    k4 = rate(t + time_sign * dt, v + dt * k3)
    return v + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


class Stepper:
    """One scheme bound to a generator; keeps the dense CN factor while it stays valid."""

    def __init__(self, generator_at, grid, scheme='crank_nicolson', time_dependent=True):
        if scheme not in SCHEMES:
            raise ValueError(f'unknown scheme {scheme!r}')
        self.generator_at = generator_at
        self.grid = grid
        self.scheme = scheme
        self.time_dependent = time_dependent
        self._factor = None
        self._factor_dt = None

    def __call__(self, u, t, dt, source=None, step=None, time_sign=1.0):
        if not dt > 0:
            raise ValueError(f'dt must be positive, got {dt}')
        t_mid = t + time_sign * 0.5 * dt
        if self.scheme == 'crank_nicolson':
            forcing = None if source is None else source(t_mid)
            reuse = not self.time_dependent and self._factor_dt == dt
            values, factor = crank_nicolson_step(self.generator_at(t_mid), u, dt, forcing,
                                                 self._factor if reuse else None)
            if not self.time_dependent:
                self._factor, self._factor_dt = factor, dt
        else:
            values = rk4_step(self.generator_at, u, t, dt, source, time_sign)

        new = u.with_values(values.reshape(self.grid.shape), time_tag=t + time_sign * dt)
        before, after = l2_norm(u), l2_norm(new)
        limit = get_setting('BLOWUP_FACTOR')
        if before > 0 and after > limit * before:
            message = f'norm grew by {after / before:.3g} in one step at t={t:g}'
            logger.warning(message)
            raise BlowupError(message, step=step, time=t, factor=after / before)
        return new


def step(problem, state, t, dt, scheme='crank_nicolson', source=None):
    """Advance one step of the problem's equation from t to t + dt."""
    stepper = Stepper(problem.generator, problem.grid, scheme, problem.time_dependent)
    return stepper(state, t, dt, source=source)


# ==================== PROPAGATION ====================

def _level_specs(monitor):
    specs = []
    for entry in monitor:
        a, M = (entry.a, entry.M) if isinstance(entry, NormSpec) else entry
        specs.append(NormSpec(a=int(a), M=float(M)))
    return specs


def _level_norm(f, spec):
    return dual_norm(f, spec) if spec.a < 0 else sobolev_norm(f, spec)


def damping_floor(problem):
    """
    Minimum over sample times of garding_floor(K(t)); returns (floor, sampled).
    Time-dependent damping is sampled at five times across [0, T].
    """
    if not problem.damped:
        return 0.0, False
    if problem.damping_symbol.time_dependent:
        times = np.linspace(0.0, problem.T, 5)
        return min(q.garding_floor(problem.damping_operator(t)) for t in times), True
    return q.garding_floor(problem.damping_operator(0.0)), False


def assumption_gate(problem, box=None, n_samples=41, force=False):
    """
    Run check_growth before a propagation. A failing clause raises ConfigError
    unless force is set; returns (report, note) with the override note or None.
    """
    box = default_box(problem.grid) if box is None else box
    report = check_growth(problem.potentials, problem.damping, problem.growth, box, n_samples)
    if report.passed:
        return report, None
    failing = ', '.join(report.failing)
    if not force:
        raise ConfigError(f'growth assumptions fail ({failing}); set evolve.force or pass --force to run anyway',
                          errors=[f'assumption clause {name} failed' for name in report.failing])
    note = f'assumption check overridden: {failing} failed'
    logger.warning(note)
    return report, note


def _march(stepper, u0, t0, dt, n_steps, config, specs, direction, source=None, on_record=None):
    sign = 1.0 if direction == 'forward' else -1.0
    stride = config.stride
    checkpoint = max(stride, n_steps // 10)
    times, norms, states = [t0], [l2_norm(u0)], [u0]
    levels = {s.label: [_level_norm(u0, s)] for s in specs}
    step_times, step_norms, forcing = [t0], [norms[0]], [0.0]

    u, t = u0, t0
    for n in range(1, n_steps + 1):
        if source is not None:
            forcing.append(forcing[-1] + dt * l2_norm(source(t + sign * 0.5 * dt)))
        else:
            forcing.append(0.0)
        u = stepper(u, t, dt, source=source, step=n, time_sign=sign)
        t = t0 + sign * n * dt
        assert_boundary_clean(u, where=f'{direction} propagation', step=n)
        step_times.append(t)
        step_norms.append(l2_norm(u))
        if n % stride == 0 or n == n_steps:
            times.append(t)
            norms.append(step_norms[-1])
            for s in specs:
                levels[s.label].append(_level_norm(u, s))
            if config.keep_states:
                states.append(u)
            if on_record is not None:
                on_record(n, u)
        if n % checkpoint == 0:
            logger.info('%s step %d/%d t=%.4g norm=%.10g', direction, n, n_steps, t, step_norms[-1])

    if not config.keep_states:
        states = [u]
    return EvolutionReport(
        times=np.array(times), norms=np.array(norms),
        levels={k: np.array(v) for k, v in levels.items()}, states=states,
        scheme=config.scheme, dt=dt, direction=direction,
        step_times=np.array(step_times), step_norms=np.array(step_norms), forcing=np.array(forcing),
    )


def step_count(T, dt):
    n = int(np.ceil(T / dt - 1e-9))
    return n, T / n


def _fit_levels(report):
    for label, series in report.levels.items():
        if series[0] > 0:
            report.growth_constants[label] = float(np.max(series / series[0]))
        positive = series > 0
        if positive.sum() >= 3 and np.ptp(report.times[positive]) > 0:
            fit = stats.linregress(report.times[positive], np.log(series[positive]))
            report.log_slopes[label] = float(fit.slope)


def norm_growth_bound(report, floor=None, slack=None):
    """||u(t)|| <= e^{(C + slack) t} (||u0|| + int_0^t ||f||) at every step, C = max(-floor, 0)."""
    floor = report.garding_floor if floor is None else floor
    slack = get_setting('GROWTH_RATE_SLACK') if slack is None else slack
    C = max(-(floor or 0.0), 0.0)
    elapsed = np.abs(report.step_times - report.step_times[0])
    bound = np.exp((C + slack) * elapsed) * (report.step_norms[0] + report.forcing)
    return bool(np.all(report.step_norms <= bound * (1 + 1e-12) + 1e-14))


def monotone_decay(report, tol=None):
    """Every step norm is at most the previous one plus the tolerance."""
    tol = get_setting('MONOTONE_TOL') if tol is None else tol
    scale = max(1.0, float(report.step_norms[0]))
    return bool(np.all(np.diff(report.step_norms) <= tol * scale))


def propagate(problem, config, source=None, on_record=None, check_floor=True):
    """Forward run from 0 to T with monitored levels, fitted constants and verdicts."""
    if problem.u0 is None:
        raise ValueError('problem has no initial datum')
    n_steps, dt = step_count(problem.T, config.dt)
    specs = _level_specs(config.monitor)
    stepper = Stepper(problem.generator, problem.grid, config.scheme, problem.time_dependent)
    logger.info('propagating %d steps of %s, dt=%g, grid=%s', n_steps, config.scheme, dt, problem.grid.to_dict())

    report = _march(stepper, problem.u0, 0.0, dt, n_steps, config, specs, 'forward', source, on_record)
    if dt != config.dt:
        report.notes.append(f'dt adjusted from {config.dt:g} to {dt:g} to land on T')
    _fit_levels(report)

    if check_floor:
        floor, sampled = damping_floor(problem)
        report.garding_floor, report.floor_sampled = floor, sampled
        if sampled:
            report.notes.append('garding floor sampled at 5 times for time-dependent damping')
        report.verdicts['norm_growth_bound'] = norm_growth_bound(report)
        if floor >= -1e-10:
            report.verdicts['monotone_decay'] = monotone_decay(report)
    if not problem.damped and source is None:
        report.verdicts['unitary'] = report.norm_drift() <= 1e-8
    for name, ok in report.verdicts.items():
        if not ok:
            logger.warning('verdict %s failed', name)
    return report


def propagate_backward_adjoint(problem, g_terminal, config, on_record=None):
    """Run i dv/dt = (H + iK) v from v(T) = g back to t = 0."""
    if g_terminal.grid != problem.grid:
        raise GridError('terminal datum lives on a different grid')
    n_steps, dt = step_count(problem.T, config.dt)
    specs = _level_specs(config.monitor)

    def reversed_generator(t):
        return -problem.generator(t).adjoint()

    stepper = Stepper(reversed_generator, problem.grid, config.scheme, problem.time_dependent)
    report = _march(stepper, g_terminal.with_values(g_terminal.values, problem.T), problem.T, dt,
                    n_steps, config, specs, 'backward', on_record=on_record)
    _fit_levels(report)
    return report


def pairing_series(forward, backward):
    """(t, (u(t), v(t))) on the times both runs recorded."""
    if not forward.states or len(forward.states) != len(forward.times):
        raise ValueError('forward run must keep its states')
    if not backward.states or len(backward.states) != len(backward.times):
        raise ValueError('backward run must keep its states')
    back = {round(float(t), 9): s for t, s in zip(backward.times, backward.states)}
    times, values = [], []
    for t, u in zip(forward.times, forward.states):
        v = back.get(round(float(t), 9))
        if v is None:
            continue
        times.append(float(t))
        values.append(inner_product(u, v))
    if not times:
        raise ValueError('forward and backward runs share no recorded times')
    return np.array(times), np.array(values)


def duality_pairing_test(forward, backward):
    """max_t |(u(t), v(t)) - (u(0), v(0))| / |(u(0), v(0))|."""
    times, values = pairing_series(forward, backward)
    reference = values[np.argmin(times)]
    if abs(reference) < 1e-12:
        raise DegeneratePairingError(f'reference pairing {abs(reference):.2e} is below 1e-12')
    forward.pairings = values
    return float(np.max(np.abs(values - reference)) / abs(reference))


# ==================== REGULARIZATION ====================

def cutoff_operator(problem, epsilon, t=0.0, mu=None):
    """X_eps = left-ordered Op(chi(eps (mu + h)))."""
    mu = problem.mu if mu is None else mu
    symbol = cutoff_symbol(problem.hamiltonian_symbol, mu, epsilon, problem.chi)
    return q.quantize_dense(symbol, problem.grid, t, ordering='standard')


def regularized_operator(problem, epsilon, t=0.0, mu=None):
    """H~_eps = X_eps^dagger H~ X_eps as a dense handle."""
    X = cutoff_operator(problem, epsilon, t, mu)
    G = problem.generator(t).to_dense()
    matrix = X.matrix.conj().T @ G @ X.matrix
    return q.dense_handle(matrix, problem.grid, t, label=f'H_eps({epsilon:g})')


def regularized_propagation_scan(problem, epsilons, config, threads=None, mu=None):
    """max_t ||u_eps(t) - u(t)|| for each epsilon; errors must shrink as epsilon decreases."""
    epsilons = sorted((float(e) for e in epsilons), reverse=True)
    keep = replace(config, keep_states=True)
    reference = propagate(problem, keep, check_floor=False)
    mu = problem.mu if mu is None else mu

    def run(epsilon):
        frozen = {}

        def generator_at(t):
            key = 0.0 if not problem.time_dependent else t
            if key not in frozen:
                frozen[key] = regularized_operator(problem, epsilon, key, mu)
            return frozen[key]

        n_steps, dt = step_count(problem.T, keep.dt)
        stepper = Stepper(generator_at, problem.grid, keep.scheme, problem.time_dependent)
        run_report = _march(stepper, problem.u0, 0.0, dt, n_steps, keep, [], 'forward')
        return max(l2_norm(a - b) for a, b in zip(run_report.states, reference.states))

    errors = np.array(map_ordered(run, epsilons, threads))
    decreasing = bool(np.all(np.diff(errors) <= 1e-12))
    for epsilon, error in zip(epsilons, errors):
        logger.info('epsilon=%g max error %.4e', epsilon, error)
    return ScanReport(variable='epsilon', values=np.array(epsilons), norms=errors,
                      passed=decreasing, extras={'decreasing': decreasing, 'mu': mu})


# ==================== STATES ====================

def ground_state(problem, t=0.0):
    """Lowest eigenpair of the Hermitian part of H(t) by dense eigensolve."""
    q.check_dense_size(problem.grid)
    H = problem.hamiltonian(t).to_dense()
    values, vectors = linalg.eigh(0.5 * (H + H.conj().T), subset_by_index=[0, 0])
    vector = vectors[:, 0]
    vector = vector * np.exp(-1j * np.angle(vector[np.argmax(np.abs(vector))]))
    state = normalize(State(problem.grid, vector, t))
    return float(values[0]), state


def gauge_transform(state, theta):
    """Multiply by exp(i theta(x)); theta is an expression string or a callable of the mesh."""
    grid = state.grid
    if callable(theta):
        phase = theta(*grid.mesh)
    else:
        expr = parse_expression(theta, allowed=variable_names(grid.dim), field='theta')
        zeros = tuple(np.zeros(grid.shape) for _ in range(grid.dim))
        phase = expr.evaluate(coordinate_env(grid.dim, state.time_tag, grid.mesh, zeros, {}))
    phase = np.broadcast_to(np.asarray(phase, dtype=float), grid.shape)
    return state.with_values(np.exp(1j * phase) * state.values)
