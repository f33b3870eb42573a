"""
Several particles on one flattened grid. Particle k owns the axes
k*d .. (k+1)*d - 1; the generator is the sum of per-particle H_k - iK_k and
the pair potentials W_ij(t, x^(i) - x^(j)), quantized on the flattened grid.
"""
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property, reduce

import numpy as np

from qdamp.errors import FitError, GridError, ParameterDomainError
from qdamp.models import AssumptionReport, State
from qdamp.modules import quantize as q
from qdamp.modules.calculus import check_mu_list, decay_report, parametrix_symbol, remainder_matrix
from qdamp.modules.evolve import GeneratorMixin, monotone_decay, norm_growth_bound, propagate
from qdamp.modules.field import assert_boundary_clean, l2_norm, make_grid, multi_indices, spectral_derivative
from qdamp.modules.symbols import (
    SymbolExpr, check_growth, check_pair_growth, damping_symbol, default_box, expression_function,
    hamiltonian_symbol, sample_lattice, symmetrized_symbol, xi_names,
)
from qdamp.utils.parsers import GENERAL
from qdamp.utils.workers import map_ordered

logger = logging.getLogger(__name__)

MAX_PARTICLES = 4


def _lift(fn, k, d):
    """fn of one particle's coordinates as a function on the flattened phase space."""
    axes = slice(k * d, (k + 1) * d)

    def lifted(t, x, xi):
        return fn(t, x[axes], xi[axes])
    return lifted


def _pair(fn, i, j, d):
    """W(t, x^(i) - x^(j)) on the flattened phase space."""
    def pair(t, x, xi):
        rel = tuple(x[i * d + c] - x[j * d + c] for c in range(d))
        return fn(t, rel, tuple(np.zeros_like(r) for r in rel))
    return pair


def _comparison_symbol(mass):
    """|xi|^2 / 2m + <x>^2 for particles outside the confining pair."""
    def l(t, x, xi):
        return sum(z ** 2 for z in xi) / (2.0 * mass) + 1.0 + sum(z ** 2 for z in x)
    return l


def _total(fns):
    def total(t, x, xi):
        out = 0.0
        for fn in fns:
            out = out + np.asarray(fn(t, x, xi))
        return out
    return total


def _degree(*degrees):
    return GENERAL if GENERAL in degrees else max(degrees, default=0)


@dataclass(frozen=True, eq=False)
class ManyBodyProblem(GeneratorMixin):
    """Particles, pair interactions and the flattened grid, with an initial datum."""

    particles: tuple
    interactions: tuple = ()
    grid: object = None
    u0: object = None
    T: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.particles)
        if not 2 <= n <= MAX_PARTICLES:
            raise ValueError(f'need 2 to {MAX_PARTICLES} particles, got {n}')
        if not self.T > 0:
            raise ValueError(f'horizon T must be positive, got {self.T}')
        d = self.particles[0].dim
        if any(p.dim != d for p in self.particles):
            raise GridError('all particles must share one spatial dimension')
        if self.grid is None or self.grid.dim != n * d:
            raise GridError(f'{n} particles in {d} dimensions need a {n * d}-dimensional grid')
        pairs = set()
        for w in self.interactions:
            if w.j >= n:
                raise ValueError(f'interaction ({w.i}, {w.j}) refers to a missing particle')
            if w.dim != d:
                raise GridError(f'interaction ({w.i}, {w.j}) is {w.dim}-dimensional, particles are {d}-dimensional')
            if w.W is not None and w.W.depends_on(*xi_names(d)):
                raise ValueError(f'interaction ({w.i}, {w.j}) must not depend on xi')
            if (w.i, w.j) in pairs:
                raise ValueError(f'interaction ({w.i}, {w.j}) declared twice')
            pairs.add((w.i, w.j))
        if self.u0 is not None:
            if self.u0.grid != self.grid:
                raise GridError('initial datum lives on a different grid')
            assert_boundary_clean(self.u0, where='initial data')

    @property
    def n(self):
        return len(self.particles)

    @property
    def particle_dim(self):
        return self.particles[0].dim

    @cached_property
    def particle_grid(self):
        return make_grid(self.particle_dim, self.grid.points, self.grid.half_width)

    def axes(self, k):
        d = self.particle_dim
        return tuple(range(k * d, (k + 1) * d))

    def weight_index(self, k):
        """M_k for the confining pair; particles beyond it carry M = 0."""
        return self.particles[k].weight_index if k < 2 else 0.0

    def interaction_functions(self):
        d = self.particle_dim
        return [(w, _pair(expression_function(w.W, d, w.params), w.i, w.j, d)) for w in self.interactions]

    @cached_property
    def hamiltonian_symbol(self):
        d = self.particle_dim
        singles = [hamiltonian_symbol(p.potentials) for p in self.particles]
        fns = [_lift(s._func, k, d) for k, s in enumerate(singles)]
        fns += [fn for _, fn in self.interaction_functions()]
        time_dependent = (any(s.time_dependent for s in singles)
                          or any(w.W is not None and w.W.depends_on('t') for w in self.interactions))
        return SymbolExpr(_total(fns), 2, 'h_total', self.grid.dim, time_dependent=time_dependent)

    @cached_property
    def damping_symbol(self):
        d = self.particle_dim
        singles = [damping_symbol(p.damping, d) for p in self.particles]
        return SymbolExpr(_total([_lift(s._func, k, d) for k, s in enumerate(singles)]),
                          _degree(*(s.degree for s in singles)), 'k_total', self.grid.dim,
                          time_dependent=any(s.time_dependent for s in singles))

    @property
    def damped(self):
        return any(not p.damping.is_zero for p in self.particles)


def assemble(problem, t=0.0):
    """sum_k (H_k - i K_k) + sum W_ij on the flattened grid."""
    return problem.generator(t)


def particle_floors(problem):
    """garding_floor(K_k) per particle on its own grid; ([floors], sampled)."""
    floors, sampled = [], False
    for p in problem.particles:
        if p.damping.is_zero:
            floors.append(0.0)
            continue
        symbol = damping_symbol(p.damping, problem.particle_dim)
        times = np.linspace(0.0, problem.T, 5) if symbol.time_dependent else (0.0,)
        sampled = sampled or symbol.time_dependent
        floors.append(min(q.garding_floor(q.quantize(symbol, problem.particle_grid, t)) for t in times))
    return floors, sampled


# ==================== WEIGHTS AND NORMS ====================

def _brackets(problem, coords):
    return [np.sqrt(1.0 + sum(coords[c] ** 2 for c in problem.axes(k))) for k in range(problem.n)]


def phi_weight(problem, coords=None):
    """Phi = sum_{k<2} <x^(k)>^{M_k+1} + sum_{k>=2} <x^(k)>; evaluated on the grid by default."""
    coords = problem.grid.mesh if coords is None else coords
    return sum(b ** (problem.weight_index(k) + 1.0) for k, b in enumerate(_brackets(problem, coords)))


def bprime_norm(f, a, problem):
    """||f|| + sum_{|alpha|<=2a} ||d^alpha f|| + sum_k ||<x^(k)>^{2a(M_k+1)} f||; a = 0 is L2."""
    if a not in (0, 1):
        raise ValueError(f'bprime_norm supports a in {{0, 1}}, got {a}')
    if f.grid != problem.grid:
        raise GridError('state does not live on the problem grid')
    assert_boundary_clean(f, where='bprime_norm')
    if a == 0:
        return l2_norm(f)
    total = l2_norm(f)
    for alpha in multi_indices(f.grid.dim, 2 * a):
        total += l2_norm(spectral_derivative(f, alpha))
    for k, bracket in enumerate(_brackets(problem, f.grid.mesh)):
        weight = bracket ** (2 * a * (problem.weight_index(k) + 1.0))
        total += l2_norm(f.with_values(weight * f.values))
    return float(total)


# ==================== ASSUMPTIONS ====================

def check_interaction_growth(problem, box=None, n_samples=41):
    """
    Per-particle growth clauses (prefixed particle<k>.) and the pair clauses:
    the w12 pair against <x>^{2(M0+1)-delta} with its margin, others against <x>.
    """
    box = default_box(problem.particle_grid) if box is None else box
    clauses, notes = [], []
    for k, p in enumerate(problem.particles):
        report = check_growth(p.potentials, p.damping, p.growth, box, n_samples)
        clauses.extend(replace(c, name=f'particle{k + 1}.{c.name}') for c in report.clauses)
        notes.extend(f'particle{k + 1}: {note}' for note in report.notes)

    M0 = min(problem.weight_index(0), problem.weight_index(1))
    for w, _ in problem.interaction_functions():
        fn = expression_function(w.W, problem.particle_dim, w.params)
        label = f'interaction_{w.i + 1}_{w.j + 1}'
        clauses.extend(check_pair_growth(fn, problem.particle_dim, w.kind, box, M0=M0, delta=w.delta,
                                         n_samples=n_samples, label=label))
    return AssumptionReport(
        growth='manybody',
        box={'x': box.x_extent, 'xi': box.xi_extent, 'times': list(box.times), 'M0': M0,
             'particles': problem.n},
        samples=n_samples, clauses=clauses, notes=notes)


# ==================== PROPAGATION ====================

def mb_propagate(problem, config, u0=None):
    """
    evolve.propagate on the flattened grid, monitoring bprime_norm(., 1) and
    checking growth against the sum of per-particle Garding floors.
    """
    problem = problem if u0 is None else problem.with_u0(u0)
    if problem.u0 is None:
        raise ValueError('problem has no initial datum')
    levels = [bprime_norm(problem.u0, 1, problem)]
    report = propagate(problem, config, on_record=lambda n, u: levels.append(bprime_norm(u, 1, problem)),
                       check_floor=False)
    series = np.array(levels)
    report.levels['bprime_1'] = series
    if series[0] > 0:
        report.growth_constants['bprime_1'] = float(np.max(series / series[0]))

    floors, sampled = particle_floors(problem)
    report.garding_floor, report.floor_sampled = float(sum(floors)), sampled
    report.verdicts['norm_growth_bound'] = norm_growth_bound(report)
    if report.garding_floor >= -1e-10:
        report.verdicts['monotone_decay'] = monotone_decay(report)
    for name in ('norm_growth_bound', 'monotone_decay'):
        if report.verdicts.get(name) is False:
            logger.warning('verdict %s failed', name)
    return report


# ==================== PARAMETRIX ====================

def parametrix_hamiltonian_symbols(problem):
    """
    (h_hat, h_hat_s): h_1 + h_2 + W_12 + sum_{k>=2} l_k and the same with the
    i div A_k / 2m_k terms of the confining pair.
    """
    d = problem.particle_dim
    plain, symmetrized = [], []
    real = True
    for k, p in enumerate(problem.particles):
        if k < 2:
            h = hamiltonian_symbol(p.potentials)
            h_s = symmetrized_symbol(p.potentials)
            real = real and h_s.real
            plain.append(_lift(h._func, k, d))
            symmetrized.append(_lift(h_s._func, k, d))
        else:
            l_k = _lift(_comparison_symbol(p.mass), k, d)
            plain.append(l_k)
            symmetrized.append(l_k)
    for w, fn in problem.interaction_functions():
        if w.kind == 'w12':
            plain.append(fn)
            symmetrized.append(fn)
    time_dependent = problem.hamiltonian_symbol.time_dependent
    D = problem.grid.dim
    return (SymbolExpr(_total(plain), 2, 'h_hat', D, time_dependent=time_dependent),
            SymbolExpr(_total(symmetrized), 2, 'h_hat_s', D, time_dependent=time_dependent, real=real))


def lower_bound_shift(problem, box=None, n_samples=15, t=0.0):
    """
    Fit (mu*, C0*) with mu* + Re h_hat_s >= C0* (<zeta>^2 + Phi^2) on a
    flattened phase-space lattice. Raises FitError when no positive C0* exists.
    """
    box = default_box(problem.grid) if box is None else box
    h_hat, _ = parametrix_hamiltonian_symbols(problem)
    x, xi, _ = sample_lattice(box, problem.grid.dim, n_samples, with_xi=True, clamp=True)
    weight = 1.0 + sum(z ** 2 for z in xi) + phi_weight(problem, x) ** 2
    values = np.real(h_hat(t, x, xi))
    if not np.all(np.isfinite(values)):
        raise FitError('many-body symbol is not finite on the sampling box')
    ratio = values / weight
    shell = weight >= 0.25 * weight.max()
    c0 = min(1.0, float(ratio[shell].min()))
    if c0 <= 1e-6:
        logger.warning('many-body lower-bound fit infeasible: C0*=%.3g', c0)
        raise FitError(f'no positive C0* fits the many-body samples (best {c0:.3g})')
    mu_star = max(0.0, float(np.max(c0 * weight - values)))
    logger.info('many-body lower bound: mu*=%.6g C0*=%.6g', mu_star, c0)
    return mu_star, c0


def mb_remainder_norm(problem, mu, t=0.0, iters=None, seed=None, H=None):
    """||(mu + H_hat) Op(p_mu) - I|| with p_mu = 1 / (mu + h_hat_s)."""
    h_hat, h_hat_s = parametrix_hamiltonian_symbols(problem)
    if H is None:
        H = q.quantize(h_hat, problem.grid, t).to_dense()
    P = q.quantize_dense(parametrix_symbol(h_hat_s, mu), problem.grid, t, ordering='standard')
    R = q.dense_handle(remainder_matrix(H, P.matrix, mu), problem.grid, t, label=f'R_hat({mu:g})')
    return q.op_norm_estimate(R, iters=iters, seed=seed).value


def mb_parametrix_scan(problem, mu_list, t=0.0, box=None, threads=None, iters=None, seed=None):
    """Remainder decay of the many-body parametrix in mu."""
    q.check_dense_size(problem.grid)
    mus = check_mu_list(mu_list)
    mu_star, c0 = lower_bound_shift(problem, box, t=t)
    if mus[0] < mu_star:
        raise ParameterDomainError(f'mu={mus[0]:g} is below mu*={mu_star:.6g}')
    h_hat, _ = parametrix_hamiltonian_symbols(problem)
    H = q.quantize(h_hat, problem.grid, t).to_dense()
    norms = np.array(map_ordered(lambda mu: mb_remainder_norm(problem, mu, t, iters, seed, H=H), mus, threads))
    return decay_report(mus, norms, shift=0.0, extras={'mu_star': mu_star, 'C0': c0, 'particles': problem.n})


# ==================== STATES ====================

def swap_particles(state, i, j, particle_dim=1):
    """Exchange the coordinate blocks of particles i and j."""
    order = list(range(state.grid.dim))
    for c in range(particle_dim):
        a, b = i * particle_dim + c, j * particle_dim + c
        if max(a, b) >= len(order):
            raise GridError(f'particle index out of range for a {state.grid.dim}-dimensional grid')
        order[a], order[b] = order[b], order[a]
    return state.with_values(np.transpose(state.values, order))


def tensor_state(states):
    """Product state on the flattened grid, first factor on the leading axes."""
    states = list(states)
    if len(states) < 2:
        raise ValueError('a tensor product needs at least two states')
    first = states[0].grid
    for s in states[1:]:
        if (s.grid.points, s.grid.half_width) != (first.points, first.half_width):
            raise GridError('factors must share N and L')
    grid = make_grid(sum(s.grid.dim for s in states), first.points, first.half_width)
    values = reduce(np.multiply.outer, [s.values for s in states])
    return State(grid, values, states[0].time_tag)
