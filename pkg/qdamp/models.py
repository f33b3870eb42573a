from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd

from qdamp.errors import GridError, StateFormatError


def _plain(value):
    """Convert numpy scalars and arrays to JSON-friendly python values."""
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, complex):
        return {'re': float(value.real), 'im': float(value.imag)}
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# ==================== FIELD ====================

@dataclass(frozen=True)
class Grid:
    """Uniform periodic lattice on [-L, L)^D and its dual frequency lattice."""

    dim: int
    points: int
    half_width: float

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise GridError(f'dim must be a positive integer, got {self.dim}')
        if int(self.points) != self.points or self.points < 8:
            raise GridError(f'points per axis must be an integer >= 8, got {self.points}')
        if self.points % 2:
            raise GridError(f'points per axis must be even, got {self.points}')
        if not self.half_width > 0:
            raise GridError(f'half width must be positive, got {self.half_width}')
        if self.points ** self.dim > 2 ** 22:
            raise GridError(f'grid of {self.points}^{self.dim} points exceeds 2^22')

    @property
    def shape(self):
        return (self.points,) * self.dim

    @property
    def size(self):
        return self.points ** self.dim

    @property
    def h(self):
        """Lattice spacing 2L/N."""
        return 2.0 * self.half_width / self.points

    @property
    def dxi(self):
        return np.pi / self.half_width

    @property
    def cell(self):
        """Quadrature weight h^D."""
        return self.h ** self.dim

    @cached_property
    def axis(self):
        return -self.half_width + self.h * np.arange(self.points)

    @cached_property
    def freq(self):
        """Frequencies (pi/L) * {-N/2, ..., N/2 - 1}, sorted."""
        return self.dxi * np.arange(-self.points // 2, self.points // 2)

    @cached_property
    def freq_fft(self):
        """Frequencies in FFT order; the Nyquist entry carries -N/2."""
        return 2.0 * np.pi * np.fft.fftfreq(self.points, d=self.h)

    @cached_property
    def nyquist_index(self):
        return self.points // 2

    @cached_property
    def mesh(self):
        return tuple(np.meshgrid(*([self.axis] * self.dim), indexing='ij'))

    @cached_property
    def wavenumbers(self):
        """Per-axis frequency arrays broadcast against the grid shape."""
        out = []
        for j in range(self.dim):
            shape = [1] * self.dim
            shape[j] = self.points
            out.append(self.freq_fft.reshape(shape))
        return tuple(out)

    def bracket(self):
        """<x> = sqrt(1 + |x|^2) on the lattice."""
        return np.sqrt(1.0 + sum(c ** 2 for c in self.mesh))

    def to_dict(self):
        return {'D': self.dim, 'N': self.points, 'L': self.half_width}


@dataclass(frozen=True, eq=False)
class State:
    """Complex field on a grid, tagged with the time it belongs to."""

    grid: Grid
    values: np.ndarray
    time_tag: float = 0.0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.complex128)
        if values.size != self.grid.size:
            raise StateFormatError(
                f'state has {values.size} values, grid needs {self.grid.size}')
        values = values.reshape(self.grid.shape)
        if not np.all(np.isfinite(values)):
            raise StateFormatError('state contains NaN or Inf entries')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'time_tag', float(self.time_tag))

    def with_values(self, values, time_tag=None):
        return State(self.grid, values, self.time_tag if time_tag is None else time_tag)

    @property
    def flat(self):
        return self.values.reshape(-1)

    def __add__(self, other):
        return self.with_values(self.values + other.values)

    def __sub__(self, other):
        return self.with_values(self.values - other.values)

    def __mul__(self, scalar):
        return self.with_values(scalar * self.values)

    __rmul__ = __mul__


# ==================== SYMBOL SPECS ====================

@dataclass(frozen=True)
class PotentialSpec:
    """Electromagnetic potentials V(t, x), A_j(t, x) and the particle mass."""

    V: object
    A: tuple = ()
    mass: float = 1.0
    params: dict = field(default_factory=dict)
    dim: int = 1

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError(f'mass must be positive, got {self.mass}')
        if self.A and len(self.A) != self.dim:
            raise ValueError(f'A needs {self.dim} components, got {len(self.A)}')

    @classmethod
    def from_strings(cls, V, A=None, mass=1.0, params=None, dim=1):
        from qdamp.utils.parsers import parse_expression

        params = dict(params or {})
        names = variable_names(dim) | set(params)
        v_expr = parse_expression(V, allowed=names, field='problem.V')
        a_exprs = tuple(
            parse_expression(a, allowed=names, field=f'problem.A[{j}]')
            for j, a in enumerate(A or [])
        )
        return cls(V=v_expr, A=a_exprs, mass=float(mass), params=params, dim=dim)

    @property
    def magnetic(self):
        return bool(self.A)

    def with_params(self, **updates):
        params = dict(self.params)
        params.update(updates)
        return PotentialSpec(self.V, self.A, self.mass, params, self.dim)


@dataclass(frozen=True)
class DampingSpec:
    """Real damping symbol k(t, x, xi); k=None is the zero symbol."""

    k: object = None
    params: dict = field(default_factory=dict)
    dim: int = 1

    @classmethod
    def from_string(cls, k, params=None, dim=1):
        from qdamp.utils.parsers import parse_expression

        params = dict(params or {})
        if k is None or str(k).strip() in ('', '0'):
            return cls(None, params, dim)
        names = variable_names(dim) | set(params)
        return cls(parse_expression(k, allowed=names, field='problem.k'), params, dim)

    @property
    def is_zero(self):
        return self.k is None

    def with_params(self, **updates):
        params = dict(self.params)
        params.update(updates)
        return DampingSpec(self.k, params, self.dim)


GROWTH_KINDS = ('subquadratic', 'confining')


@dataclass(frozen=True)
class GrowthClass:
    """
    Growth class of the potentials: 'subquadratic' (bounded higher derivatives)
    or 'confining' (V comparable to <x>^{2(M+1)}).
    """

    kind: str = 'subquadratic'
    M: float = 0.0
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in GROWTH_KINDS:
            raise ValueError(f'unknown growth class {self.kind!r}')
        if self.M < 0:
            raise ValueError(f'M must be nonnegative, got {self.M}')
        if not self.delta > 0:
            raise ValueError(f'delta must be positive, got {self.delta}')

    @property
    def weight_index(self):
        """M used for weights: the subquadratic class uses M = 0."""
        return self.M if self.kind == 'confining' else 0.0


@dataclass(frozen=True)
class SamplingBox:
    """Phase-space box [-x_extent, x_extent]^D x [-xi_extent, xi_extent]^D."""

    x_extent: float
    xi_extent: float
    times: tuple = (0.0,)

    def __post_init__(self):
        if not (self.x_extent > 0 and self.xi_extent >= 0):
            raise ValueError('box extents must be positive')

    @classmethod
    def for_grid(cls, grid, times=(0.0,)):
        return cls(grid.half_width, grid.dxi * (grid.points // 2), tuple(times))


@dataclass(frozen=True)
class NormSpec:
    """Weighted Sobolev level a, growth index M and the shift mu' of Lambda_M."""

    a: int = 1
    M: float = 0.0
    mu_prime: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        if int(self.a) != self.a or abs(self.a) > 3:
            raise ValueError(f'level a must be an integer with |a| <= 3, got {self.a}')
        if self.M < 0:
            raise ValueError(f'M must be nonnegative, got {self.M}')
        if not self.mu_prime > 0:
            raise ValueError(f'mu_prime must be positive, got {self.mu_prime}')

    @property
    def label(self):
        return f'a{self.a}_M{self.M:g}'


# ==================== MANY-BODY SPECS ====================

INTERACTION_KINDS = ('w12', 'generic')


@dataclass(frozen=True)
class Particle:
    """One particle: its potentials (mass included), damping and growth class."""

    potentials: PotentialSpec
    damping: DampingSpec = field(default_factory=DampingSpec)
    growth: GrowthClass = field(default_factory=GrowthClass)

    @property
    def dim(self):
        return self.potentials.dim

    @property
    def mass(self):
        return self.potentials.mass

    @property
    def weight_index(self):
        return self.growth.weight_index


@dataclass(frozen=True)
class Interaction:
    """
    Pair potential W(t, x^(i) - x^(j)) with 0-based particle indices i < j.
    'w12' is the pair between the two confining particles; its bound carries
    the margin delta.
    """

    i: int
    j: int
    W: object
    kind: str = 'generic'
    delta: float = 1.0
    params: dict = field(default_factory=dict)
    dim: int = 1

    def __post_init__(self):
        if self.kind not in INTERACTION_KINDS:
            raise ValueError(f'unknown interaction kind {self.kind!r}')
        if not 0 <= self.i < self.j:
            raise ValueError(f'interaction needs 0 <= i < j, got ({self.i}, {self.j})')
        if self.kind == 'w12' and (self.i, self.j) != (0, 1):
            raise ValueError('a w12 interaction joins particles 0 and 1')
        if not self.delta > 0:
            raise ValueError(f'delta must be positive, got {self.delta}')

    @classmethod
    def from_string(cls, i, j, W, kind='generic', delta=1.0, params=None, dim=1):
        from qdamp.utils.parsers import parse_expression

        params = dict(params or {})
        names = variable_names(dim) | set(params)
        expr = parse_expression(W, allowed=names, field=f'interactions[{i},{j}].W')
        return cls(int(i), int(j), expr, kind, float(delta), params, dim)


# ==================== REPORTS ====================

@dataclass
class ClauseResult:
    """One inequality of a growth assumption, fitted on samples."""

    name: str
    constant: float
    exponent: float
    passed: bool
    witness: dict | None = None
    detail: str = ''
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return _plain({
            'clause': self.name,
            'constant': self.constant,
            'growth_exponent': self.exponent,
            'passed': self.passed,
            'witness': self.witness,
            'detail': self.detail,
            **self.extras,
        })


@dataclass
class AssumptionReport:
    growth: str
    box: dict
    samples: int
    clauses: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.clauses)

    @property
    def failing(self):
        return [c.name for c in self.clauses if not c.passed]

    def clause(self, name):
        for c in self.clauses:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {
            'growth': self.growth,
            'box': _plain(self.box),
            'samples': self.samples,
            'passed': self.passed,
            'failing': self.failing,
            'clauses': [c.to_dict() for c in self.clauses],
            'notes': list(self.notes),
        }


@dataclass
class NormEstimate:
    value: float
    rel_change: float
    iterations: int
    converged: bool

    def __float__(self):
        return float(self.value)

    def to_dict(self):
        return _plain(self.__dict__)


@dataclass
class EquivalenceBand:
    ratios: np.ndarray
    minimum: float
    maximum: float
    median: float

    def to_dict(self):
        return _plain({'min': self.minimum, 'max': self.maximum,
                       'median': self.median, 'count': len(self.ratios)})


@dataclass(frozen=True)
class EvolveConfig:
    scheme: str = 'crank_nicolson'
    dt: float = 1e-3
    monitor: tuple = ()
    stride: int = 1
    keep_states: bool = False

    def __post_init__(self):
        if self.scheme not in ('crank_nicolson', 'rk4'):
            raise ValueError(f'unknown scheme {self.scheme!r}')
        if not self.dt > 0:
            raise ValueError(f'dt must be positive, got {self.dt}')
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError(f'stride must be a positive integer, got {self.stride}')


@dataclass
class EvolutionReport:
    """Time series and fitted constants of one propagation run."""

    times: np.ndarray
    norms: np.ndarray
    levels: dict = field(default_factory=dict)
    states: list = field(default_factory=list)
    pairings: np.ndarray | None = None
    growth_constants: dict = field(default_factory=dict)
    log_slopes: dict = field(default_factory=dict)
    garding_floor: float | None = None
    floor_sampled: bool = False
    verdicts: dict = field(default_factory=dict)
    scheme: str = 'crank_nicolson'
    dt: float = 0.0
    direction: str = 'forward'
    step_times: np.ndarray | None = None
    step_norms: np.ndarray | None = None
    forcing: np.ndarray | None = None
    notes: list = field(default_factory=list)

    @property
    def initial_norm(self):
        return float(self.norms[0])

    @property
    def final_state(self):
        return self.states[-1] if self.states else None

    @property
    def passed(self):
        return all(self.verdicts.values())

    def norm_drift(self):
        """max_t | ||u(t)|| / ||u0|| - 1 |."""
        if self.norms[0] == 0:
            return 0.0
        return float(np.max(np.abs(self.norms / self.norms[0] - 1.0)))

    def to_frame(self):
        data = {'t': self.times, 'norm': self.norms}
        for name, series in self.levels.items():
            data[name] = series
        if self.pairings is not None:
            data['pairing_re'] = np.real(self.pairings)
            data['pairing_im'] = np.imag(self.pairings)
        return pd.DataFrame(data)

    def summary(self):
        return _plain({
            'direction': self.direction,
            'scheme': self.scheme,
            'dt': self.dt,
            'steps': len(self.times) - 1,
            'initial_norm': self.initial_norm,
            'final_norm': float(self.norms[-1]),
            'norm_drift': self.norm_drift(),
            'garding_floor': self.garding_floor,
            'floor_sampled': self.floor_sampled,
            'growth_constants': self.growth_constants,
            'log_slopes': self.log_slopes,
            'verdicts': self.verdicts,
            'notes': self.notes,
        })


@dataclass
class ScanReport:
    """Operator norms along a scan variable with a log-log fit and a verdict."""

    variable: str
    values: np.ndarray
    norms: np.ndarray
    slope: float | None = None
    half_width: float | None = None
    intercept: float | None = None
    expected: float | None = None
    band: tuple | None = None
    within_band: bool | None = None
    bound_consistent: bool | None = None
    passed: bool = False
    skipped: bool = False
    fit_mask: np.ndarray | None = None
    extras: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_frame(self):
        data = {self.variable: self.values, 'norm': self.norms}
        if self.fit_mask is not None:
            data['in_fit'] = self.fit_mask
        return pd.DataFrame(data)

    def summary(self):
        return _plain({
            'variable': self.variable,
            'values': self.values,
            'norms': self.norms,
            'slope': self.slope,
            'half_width': self.half_width,
            'expected': self.expected,
            'band': self.band,
            'within_band': self.within_band,
            'bound_consistent': self.bound_consistent,
            'passed': self.passed,
            'skipped': self.skipped,
            'extras': self.extras,
            'notes': self.notes,
        })


@dataclass
class RateReport:
    """Difference-quotient convergence table for a parameter family."""

    taus: np.ndarray
    errors: np.ndarray
    ratios: np.ndarray
    order: float | None
    passed: bool
    monotone: bool
    bound_ratio: float | None = None
    derivative_source: str = 'closed_form'
    notes: list = field(default_factory=list)
    ratio_band: tuple | None = None
    refined_bound_ratio: float | None = None
    refinement_gap: float | None = None

    def to_frame(self):
        ratios = np.concatenate([[np.nan], self.ratios]) if len(self.taus) else self.ratios
        return pd.DataFrame({'tau': self.taus, 'error': self.errors, 'ratio': ratios})

    def summary(self):
        return _plain({
            'taus': self.taus,
            'errors': self.errors,
            'ratios': self.ratios,
            'order': self.order,
            'passed': self.passed,
            'monotone': self.monotone,
            'bound_ratio': self.bound_ratio,
            'ratio_band': self.ratio_band,
            'refined_bound_ratio': self.refined_bound_ratio,
            'refinement_gap': self.refinement_gap,
            'derivative_source': self.derivative_source,
            'notes': self.notes,
        })


# ==================== RUN CONFIG ====================

COMMANDS = ('solve', 'sensitivity', 'parametrix-scan', 'commutator-scan',
            'assumptions', 'manybody', 'quantize-check')


@dataclass
class RunConfig:
    """Parsed run configuration; blocks stay as validated dictionaries."""

    command: str
    grid: Grid
    problem: dict = field(default_factory=dict)
    particles: list = field(default_factory=list)
    interactions: list = field(default_factory=list)
    evolve: dict = field(default_factory=dict)
    scan: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    seed: int | None = None
    source: str | None = None
    raw: dict = field(default_factory=dict)
    force: bool = False


def variable_names(dim):
    """Coordinate names visible to expressions on a dim-dimensional grid."""
    names = {'t'}
    for j in range(1, dim + 1):
        names.add(f'x{j}')
        names.add(f'xi{j}')
    if dim == 1:
        names.update({'x', 'xi'})
    return names
