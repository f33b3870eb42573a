"""
Run a validated configuration: build the problem objects, dispatch to the
numerical modules, and write report.json and series.csv.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from qdamp.config import get_setting
from qdamp.errors import ConfigError, FitError
from qdamp.models import (
    DampingSpec, EvolveConfig, GrowthClass, Interaction, Particle, PotentialSpec, SamplingBox, State,
    variable_names,
)
from qdamp.modules import calculus, manybody
from qdamp.modules import quantize as q
from qdamp.modules.evolve import (
    Problem, assumption_gate, duality_pairing_test, ground_state, propagate, propagate_backward_adjoint,
    regularized_propagation_scan,
)
from qdamp.modules.field import gaussian_state, normalize, random_state
from qdamp.modules.sensitivity import (
    ParametrizedFamily, check_parameter_growth, continuity_scan, convergence_study,
)
from qdamp.modules.symbols import (
    check_growth, coordinate_env, default_box, fit_lower_bound_constants,
)
from qdamp.utils.parsers import load_run_config, parse_expression
from qdamp.utils.state_io import write_report, write_series, write_snapshot

logger = logging.getLogger(__name__)

# config tag -> Interaction kind
INTERACTION_TAG_KINDS = {'coupled': 'w12', 'generic': 'generic'}
PAIRING_TOL = 1e-7
PATH_EQUIVALENCE_TOL = 1e-10


@dataclass
class RunResult:
    """Outcome of one command before it is written out."""

    command: str
    verdicts: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    frame: pd.DataFrame | None = None
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return all(self.verdicts.values())


# ==================== BUILDERS ====================

def build_growth(block):
    block = block or {}
    return GrowthClass(block.get('kind', 'subquadratic'), float(block.get('M', 0.0)),
                       float(block.get('delta', 1.0)))


def _box(run, grid):
    block = run.scan.get('box')
    if not block:
        return default_box(grid)
    default = default_box(grid)
    return SamplingBox(float(block.get('x', default.x_extent)), float(block.get('xi', default.xi_extent)),
                       tuple(float(t) for t in block.get('times', [0.0])))


def evolve_config(run, keep_states=False):
    block = run.evolve
    monitor = tuple(tuple(level) for level in block.get('monitor') or [])
    return EvolveConfig(scheme=block.get('scheme', 'crank_nicolson'), dt=float(block.get('dt', 1e-3)),
                        monitor=monitor, stride=int(block.get('stride', 1)), keep_states=keep_states)


def initial_state(block, grid, params, problem=None):
    """u0 from its config block; returns (state, extras)."""
    block = block or {}
    kind = block.get('kind', 'gaussian')
    if kind == 'ground_state':
        if problem is None:
            raise ConfigError('u0.kind "ground_state" needs a single-particle problem')
        energy, state = ground_state(problem)
        return state, {'ground_energy': energy}
    if kind == 'expression':
        names = variable_names(grid.dim) | set(params)
        zeros = tuple(np.zeros(grid.shape) for _ in range(grid.dim))
        env = coordinate_env(grid.dim, 0.0, grid.mesh, zeros, params)
        amplitude = parse_expression(block['amplitude'], allowed=names, field='u0.amplitude').evaluate(env)
        values = np.broadcast_to(np.asarray(amplitude, dtype=np.complex128), grid.shape)
        if block.get('phase'):
            phase = parse_expression(block['phase'], allowed=names, field='u0.phase').evaluate(env)
            values = values * np.exp(1j * np.asarray(phase, dtype=float))
        state = normalize(State(grid, values))
        if state.flat.any():
            return state, {}
        raise ConfigError('u0.amplitude vanishes on the grid')
    return gaussian_state(grid, block.get('center', 0.0), block.get('width', 1.0),
                          block.get('momentum', 0.0)), {}


def build_problem(run, with_u0=True):
    """Single-particle Problem from the problem block; returns (problem, extras)."""
    block, grid = run.problem, run.grid
    params = dict(block.get('params') or {})
    potentials = PotentialSpec.from_strings(block.get('V', '0'), block.get('A'), block.get('mass', 1.0),
                                            params, grid.dim)
    damping = DampingSpec.from_string(block.get('k'), params, grid.dim)
    T = float(run.evolve.get('T', 1.0))
    problem = Problem(potentials, damping, build_growth(block.get('growth')), grid, None, T, block.get('chi'))
    if not with_u0:
        return problem, {}
    u0, extras = initial_state(block.get('u0'), grid, params, problem)
    return problem.with_u0(u0), extras


def build_family(run, problem):
    """ParametrizedFamily over scan.parameter (default 'rho')."""
    block, scan = run.problem, run.scan
    name = scan.get('parameter', 'rho')
    params = dict(block.get('params') or {})
    names = variable_names(run.grid.dim) | set(params)
    derivatives = {}
    dparams = block.get('dparams') or {}
    for key in ('V', 'k'):
        if dparams.get(key) is not None:
            derivatives[key] = parse_expression(dparams[key], allowed=names, field=f'problem.dparams.{key}')
    if dparams.get('A'):
        derivatives['A'] = [parse_expression(a, allowed=names, field=f'problem.dparams.A[{j}]')
                            for j, a in enumerate(dparams['A'])]
    interval = tuple(scan.get('rho_interval', (-np.inf, np.inf)))
    return ParametrizedFamily(problem.potentials, problem.damping, problem.growth, problem.grid, problem.u0,
                              problem.T, name, interval, derivatives, chi=problem.chi)


def build_manybody(run):
    """ManyBodyProblem with one-dimensional particles on the flattened grid."""
    params = dict(run.problem.get('params') or {})
    particles, factors = [], []
    for block in run.particles:
        potentials = PotentialSpec.from_strings(block.get('V', '0'), block.get('A'), block.get('mass', 1.0),
                                                params, 1)
        damping = DampingSpec.from_string(block.get('k'), params, 1)
        particles.append(Particle(potentials, damping, build_growth(block.get('growth'))))
    interactions = []
    for item in run.interactions:
        i, j = sorted(item['pair'])
        kind = INTERACTION_TAG_KINDS[item.get('tag', 'generic')]
        interactions.append(Interaction.from_string(i, j, item['W'], kind, item.get('delta', 1.0), params, 1))

    T = float(run.evolve.get('T', 1.0))
    problem = manybody.ManyBodyProblem(tuple(particles), tuple(interactions), run.grid, None, T)
    for particle, block in zip(particles, run.particles):
        single = Problem(particle.potentials, particle.damping, particle.growth, problem.particle_grid, None, T)
        state, _ = initial_state(block.get('u0'), problem.particle_grid, params, single)
        factors.append(state)
    return problem.with_u0(manybody.tensor_state(factors))


# ==================== COMMANDS ====================

def run_solve(run, out, threads=None):
    problem, extras = build_problem(run)
    assumptions, override = assumption_gate(problem, _box(run, problem.grid), run.scan.get('samples', 41),
                                            force=run.force)
    snapshots = bool(run.evolve.get('snapshots'))
    adjoint = bool(run.evolve.get('adjoint'))
    config = evolve_config(run, keep_states=adjoint)

    def snapshot(n, u):
        write_snapshot(u, out, n)

    if snapshots:
        write_snapshot(problem.u0, out, 0)
    report = propagate(problem, config, on_record=snapshot if snapshots else None)
    result = RunResult('solve', verdicts=dict(report.verdicts), constants=dict(report.growth_constants))
    result.constants.update(extras)
    result.results['evolution'] = report.summary()
    result.results['assumptions'] = assumptions.to_dict()
    if override is not None:
        result.notes.append(override)
    if adjoint:
        backward = propagate_backward_adjoint(problem, report.final_state, config)
        drift = duality_pairing_test(report, backward)
        result.results['pairing_drift'] = drift
        result.verdicts['duality_pairing'] = drift <= PAIRING_TOL
    result.frame = report.to_frame()
    result.notes.extend(report.notes)
    return result


def run_sensitivity(run, out, threads=None):
    problem, _ = build_problem(run)
    family = build_family(run, problem)
    rho = float(run.scan.get('rho', problem.potentials.params[family.name]))
    config = evolve_config(run)
    monitor = run.evolve.get('monitor') or [[0, 0.0]]
    level = tuple(monitor[0])

    rates = convergence_study(family, rho, run.scan['taus'], config, level, threads)
    continuity = continuity_scan(family, rho, run.scan['taus'], config, level, threads)
    growth = check_parameter_growth(family, _box(run, problem.grid), run.scan.get('samples', 41))

    result = RunResult('sensitivity', verdicts={
        'difference_quotient_convergence': rates.passed,
        'continuity_decreasing': continuity.passed,
        'parameter_growth': all(r.passed for r in growth),
    })
    result.constants = {'order': rates.order, 'bound_ratio': rates.bound_ratio,
                        'refined_bound_ratio': rates.refined_bound_ratio}
    result.results = {'convergence': rates.summary(), 'continuity': continuity.summary(),
                      'parameter_growth': [r.to_dict() for r in growth]}
    result.frame = rates.to_frame().assign(continuity_gap=continuity.norms)
    result.notes.extend(rates.notes)
    return result


def run_parametrix_scan(run, out, threads=None):
    problem, _ = build_problem(run)
    scan = calculus.remainder_decay_scan(problem, run.scan['mus'], run.scan.get('iters'),
                                         threads=threads, seed=run.seed)
    result = RunResult('parametrix-scan', verdicts={'parametrix_decay': scan.passed})
    result.constants = {'slope': scan.slope, 'half_width': scan.half_width,
                        'C0': scan.extras.get('C0'), 'C1': scan.extras.get('C1')}
    result.results['scan'] = scan.summary()
    if 'mu' in run.scan:
        check = calculus.resolvent_cross_check(problem, float(run.scan['mu']), problem.u0, seed=run.seed)
        result.results['resolvent'] = {'mu': float(run.scan['mu']), 'remainder': check['remainder'],
                                       'summable': check['summable'], 'neumann_gap': check['gap']}
    result.frame = scan.to_frame()
    result.notes.extend(scan.notes)
    return result


def run_commutator_scan(run, out, threads=None):
    problem, _ = build_problem(run, with_u0=False)
    epsilons = run.scan['epsilons']
    mu = run.scan.get('mu')
    scan = calculus.commutator_bound_scan(problem, epsilons, mu=mu, threads=threads, seed=run.seed)
    result = RunResult('commutator-scan', verdicts={'commutator_bounded': scan.passed})
    result.constants = {'slope': scan.slope, 'band_ratio': scan.extras.get('band_ratio')}
    result.results['commutator'] = scan.summary()
    frame = scan.to_frame()
    for a in run.scan.get('a_values') or []:
        q_scan = calculus.q_a_scan(problem, int(a), epsilons, mu=mu, threads=threads, seed=run.seed)
        result.verdicts[f'q_{int(a)}_bounded'] = q_scan.passed
        result.results[f'q_{int(a)}'] = q_scan.summary()
        frame[f'q_{int(a)}'] = q_scan.norms
    if run.scan.get('a_values'):
        result.results['q_identity_gap'] = calculus.q_a_identity_gap(problem, min(epsilons), mu=mu)
    if run.evolve:
        # propagate with H~_eps against the unregularized run
        problem, _ = build_problem(run)
        regularized = regularized_propagation_scan(problem, epsilons, evolve_config(run), threads, mu)
        result.verdicts['regularized_convergence'] = regularized.passed
        result.results['regularized'] = regularized.summary()
        frame['propagation_error'] = regularized.norms
    result.frame = frame
    return result


def run_assumptions(run, out, threads=None):
    problem, _ = build_problem(run, with_u0=False)
    box = _box(run, problem.grid)
    report = check_growth(problem.potentials, problem.damping, problem.growth, box,
                          run.scan.get('samples', 101))
    result = RunResult('assumptions', verdicts={'assumptions': report.passed})
    result.results['assumptions'] = report.to_dict()
    for name in report.failing:
        logger.warning('assumption clause %s failed', name)
    try:
        c0, c1 = fit_lower_bound_constants(problem.potentials, problem.growth, box)
        result.constants = {'C0': c0, 'C1': c1}
    except FitError as e:
        result.notes.append(e.message)

    if 'parameter' in run.scan:
        family = build_family(run, problem)
        growth = check_parameter_growth(family, box, run.scan.get('samples', 41))
        result.verdicts['parameter_growth'] = all(r.passed for r in growth)
        result.results['parameter_growth'] = [r.to_dict() for r in growth]
    result.frame = pd.DataFrame([c.to_dict() for c in report.clauses])[
        ['clause', 'constant', 'growth_exponent', 'passed']]
    return result


def run_manybody(run, out, threads=None):
    problem = build_manybody(run)
    config = evolve_config(run)
    report = manybody.mb_propagate(problem, config)
    growth = manybody.check_interaction_growth(problem, n_samples=run.scan.get('samples', 41))

    result = RunResult('manybody', verdicts=dict(report.verdicts))
    result.verdicts['interaction_growth'] = growth.passed
    result.constants = dict(report.growth_constants)
    result.results = {'evolution': report.summary(), 'assumptions': growth.to_dict()}
    if 'mus' in run.scan:
        scan = manybody.mb_parametrix_scan(problem, run.scan['mus'], threads=threads, seed=run.seed)
        result.verdicts['parametrix_decay'] = scan.passed
        result.constants['parametrix_slope'] = scan.slope
        result.results['parametrix'] = scan.summary()
    result.frame = report.to_frame()
    result.notes.extend(report.notes)
    return result


def run_quantize_check(run, out, threads=None):
    """Fast path against the dense Weyl kernel on random states."""
    problem, _ = build_problem(run, with_u0=False)
    grid = problem.grid
    symbol = problem.hamiltonian_symbol
    fast = q.quantize_poly(symbol, grid)
    dense = q.quantize_dense(symbol, grid)
    rng = np.random.default_rng(run.seed)
    states = [random_state(grid, rng) for _ in range(int(run.scan.get('vectors', 20)))]
    gaps = []
    for f in states:
        reference = dense(f)
        gaps.append(float(np.linalg.norm(fast.matvec(f.flat) - reference.flat) /
                          max(np.linalg.norm(reference.flat), 1e-300)))

    defect = q.symmetry_defect(fast, seed=run.seed)
    result = RunResult('quantize-check', verdicts={'path_equivalence': max(gaps) <= PATH_EQUIVALENCE_TOL})
    result.constants = {'max_relative_gap': max(gaps), 'symmetry_defect': defect,
                        'garding_floor': q.garding_floor(problem.generator(0.0))}
    result.frame = pd.DataFrame({'state': np.arange(len(gaps)), 'relative_gap': gaps})
    return result


HANDLERS = {
    'solve': run_solve,
    'sensitivity': run_sensitivity,
    'parametrix-scan': run_parametrix_scan,
    'commutator-scan': run_commutator_scan,
    'assumptions': run_assumptions,
    'manybody': run_manybody,
    'quantize-check': run_quantize_check,
}


# ==================== ENTRY ====================

def output_directory(run, out=None):
    return Path(out or run.output.get('directory') or get_setting('OUTPUT_DIRECTORY'))


def _report(run, result, seed):
    return {
        'command': run.command,
        'config': run.raw,
        'seed': seed,
        'passed': result.passed,
        'verdicts': result.verdicts,
        'constants': result.constants,
        'results': result.results,
        'notes': result.notes,
        'errors': [],
    }


def execute(config_path, command=None, out=None, seed=None, threads=None, force=False):
    """
    Load, run and write one configuration. Returns (exit_code, report).
    Verdict failures exit 1; a LabError exits with its own code.
    """
    run = load_run_config(config_path, seed)
    run.force = bool(force or run.evolve.get('force', False))
    if command is not None and run.command != command:
        raise ConfigError(f'config declares command {run.command!r}, invoked as {command!r}',
                          errors=[f'command: expected {command!r}, got {run.command!r}'])
    seed = get_setting('DEFAULT_SEED') if run.seed is None else run.seed
    run.seed = seed
    directory = output_directory(run, out)
    logger.info('running %s from %s (seed %s)', run.command, config_path, seed)

    result = HANDLERS[run.command](run, directory, threads)
    report = _report(run, result, seed)
    formats = run.output.get('formats', ['json', 'csv'])
    if 'json' in formats:
        write_report(report, directory)
    if 'csv' in formats and result.frame is not None:
        write_series(result.frame, directory)
    for name, ok in result.verdicts.items():
        if not ok:
            logger.warning('verdict %s failed', name)
    return (0 if result.passed else 1), report


def failure_report(error, command=None, config_path=None, out=None, seed=None):
    """report.json for a run stopped by a LabError; skipped when the directory is unusable."""
    report = {'command': command, 'config': str(config_path), 'seed': seed, 'passed': False,
              'verdicts': {}, 'constants': {}, 'results': {}, 'notes': [], 'errors': [error.to_dict()]}
    for key in ('step', 'time'):
        if getattr(error, key, None) is not None:
            report['errors'][0][key] = getattr(error, key)
    try:
        write_report(report, Path(out or get_setting('OUTPUT_DIRECTORY')))
    except OSError as e:
        logger.warning('could not write failure report: %s', e)
    return report
