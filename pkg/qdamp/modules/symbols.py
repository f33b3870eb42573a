"""
Phase-space symbols built from the potential and damping expressions, and
the sampled checks of the growth assumptions those symbols must satisfy.
"""
import logging

import numpy as np
from scipy import stats

from qdamp.config import get_setting
from qdamp.errors import ExpressionError, FitError
from qdamp.models import AssumptionReport, ClauseResult, GrowthClass, SamplingBox
from qdamp.modules.field import multi_indices
from qdamp.utils.parsers import GENERAL

logger = logging.getLogger(__name__)

RADIUS_FRACTIONS = (0.25, 0.5, 0.75, 1.0)
MAX_SAMPLES = 2 ** 20


def coordinate_env(dim, t, x, xi, params):
    env = dict(params)
    env['t'] = t
    for j in range(dim):
        env[f'x{j + 1}'] = x[j]
        env[f'xi{j + 1}'] = xi[j]
    if dim == 1:
        env['x'] = x[0]
        env['xi'] = xi[0]
    return env


def xi_names(dim):
    names = {f'xi{j + 1}' for j in range(dim)}
    if dim == 1:
        names.add('xi')
    return names


def expression_function(expr, dim, params):
    """Wrap an Expression (or None for zero) as f(t, x, xi)."""
    if expr is None:
        return lambda t, x, xi: 0.0

    def evaluate(t, x, xi):
        return expr.evaluate(coordinate_env(dim, t, x, xi, params))
    return evaluate


def _broadcast(value, x, xi):
    shapes = [np.shape(a) for a in (*x, *xi)]
    shape = np.broadcast_shapes(*shapes) if shapes else ()
    return np.broadcast_to(np.asarray(value, dtype=np.complex128), shape)


class SymbolExpr:
    """
    A time-dependent phase-space symbol s(t, x, xi) with its declared
    polynomial degree in xi (0, 1, 2 or 'general').
    """

    def __init__(self, func, degree, name, dim, time_dependent=True, real=True):
        if degree not in (0, 1, 2, GENERAL):
            degree = GENERAL
        self._func = func
        self.degree = degree
        self.name = name
        self.dim = dim
        self.time_dependent = time_dependent
        self.real = real

    def __repr__(self):
        return f'SymbolExpr({self.name!r}, degree={self.degree!r}, dim={self.dim})'

    def __call__(self, t, x, xi):
        x = tuple(np.asarray(a, dtype=float) for a in x)
        xi = tuple(np.asarray(a, dtype=float) for a in xi)
        return _broadcast(self._func(t, x, xi), x, xi)

    @property
    def is_polynomial(self):
        return self.degree != GENERAL

    def frozen(self, t):
        """The same symbol with time fixed at t."""
        func = self._func
        return SymbolExpr(lambda _, x, xi: func(t, x, xi), self.degree,
                          self.name, self.dim, time_dependent=False, real=self.real)

    def taylor_coefficients(self, t, x):
        """
        c0(x), c1_j(x) and c2_jk(x) (j <= k) of the xi-expansion at xi = 0,
        by unit-step stencils that are exact for quadratics.
        """
        x = tuple(np.asarray(a, dtype=float) for a in x)
        zero = np.zeros(np.broadcast_shapes(*[np.shape(a) for a in x]))

        def at(offsets):
            xi = tuple(zero + offsets.get(j, 0.0) for j in range(self.dim))
            return self(t, x, xi)

        c0 = at({})
        c1, c2 = [], {}
        for j in range(self.dim):
            plus, minus = at({j: 1.0}), at({j: -1.0})
            c1.append((plus - minus) / 2.0)
            c2[(j, j)] = (plus + minus - 2.0 * c0) / 2.0
        for j in range(self.dim):
            for k in range(j + 1, self.dim):
                c2[(j, k)] = (at({j: 1.0, k: 1.0}) - at({j: 1.0, k: -1.0})
                              - at({j: -1.0, k: 1.0}) + at({j: -1.0, k: -1.0})) / 4.0
        return c0, c1, c2

    def check_degree(self, rng, box, n=200, t=0.0):
        """Max relative gap between s and its degree-2 Taylor reconstruction."""
        if not self.is_polynomial:
            raise ValueError(f'symbol {self.name!r} declares a general degree')
        x = tuple(rng.uniform(-box.x_extent, box.x_extent, n) for _ in range(self.dim))
        xi = tuple(rng.uniform(-box.xi_extent, box.xi_extent, n) for _ in range(self.dim))
        c0, c1, c2 = self.taylor_coefficients(t, x)
        rebuilt = c0 + sum(c1[j] * xi[j] for j in range(self.dim))
        rebuilt = rebuilt + sum(c * xi[j] * xi[k] for (j, k), c in c2.items())
        exact = self(t, x, xi)
        scale = max(np.max(np.abs(exact)), 1e-300)
        return float(np.max(np.abs(exact - rebuilt)) / scale)


# ==================== FINITE DIFFERENCES ====================

# Fourth-order central stencils: offsets -> weights, and the denominator.
_STENCILS = {
    1: ({-2: 1.0, -1: -8.0, 1: 8.0, 2: -1.0}, 12.0),
    2: ({-2: -1.0, -1: 16.0, 0: -30.0, 1: 16.0, 2: -1.0}, 12.0),
    3: ({-3: 1.0, -2: -8.0, -1: 13.0, 1: -13.0, 2: 8.0, 3: -1.0}, 8.0),
    4: ({-3: -1.0, -2: 12.0, -1: -39.0, 0: 56.0, 1: -39.0, 2: 12.0, 3: -1.0}, 6.0),
}


def _replace(t, x, xi, var, index, value):
    if var == 't':
        return value, x, xi
    if var == 'x':
        return t, x[:index] + (value,) + x[index + 1:], xi
    return t, x, xi[:index] + (value,) + xi[index + 1:]


def partial(fn, var, index=0, order=1, step=None):
    """Central-difference derivative of fn(t, x, xi) in t, x_index or xi_index."""
    if order == 0:
        return fn
    if order not in _STENCILS:
        raise ValueError(f'finite differences support orders 1-4, got {order}')
    offsets, scale = _STENCILS[order]

    def derivative(t, x, xi):
        base = t if var == 't' else (x if var == 'x' else xi)[index]
        if step is not None:
            h = step
        elif var == 't':
            h = get_setting('TIME_FD_STEP') * (1.0 + np.abs(base))
        else:
            rel = get_setting('FD_STEP') if order == 1 else get_setting('FD_STEP_HIGH')
            h = rel * (1.0 + np.abs(base))
        total = 0.0
        for offset, weight in offsets.items():
            total = total + weight * np.asarray(fn(*_replace(t, x, xi, var, index, base + offset * h)))
        return total / (scale * h ** order)
    return derivative


def mixed_partial(fn, x_alpha=(), xi_alpha=(), t_order=0):
    for j, a in enumerate(x_alpha):
        fn = partial(fn, 'x', j, a)
    for j, a in enumerate(xi_alpha):
        fn = partial(fn, 'xi', j, a)
    if t_order:
        fn = partial(fn, 't', 0, t_order)
    return fn


# ==================== SYMBOL BUILDERS ====================

def _check_potential(p):
    names = xi_names(p.dim)
    for label, expr in [('V', p.V)] + [(f'A[{j}]', a) for j, a in enumerate(p.A)]:
        if expr is not None and expr.depends_on(*names):
            raise ExpressionError(f'{label} must not depend on xi: {expr.source!r}',
                                  expression=expr.source, field=f'problem.{label}')


def potential_functions(p):
    """(V, [A_j]) as functions of (t, x, xi)."""
    _check_potential(p)
    V = expression_function(p.V, p.dim, p.params)
    A = [expression_function(a, p.dim, p.params) for a in p.A]
    return V, A


def _time_dependent(*exprs):
    return any(e is not None and e.depends_on('t') for e in exprs)


def hamiltonian_symbol(p):
    """h = |xi - A|^2 / 2m + V."""
    V, A = potential_functions(p)
    mass = p.mass

    def h(t, x, xi):
        kinetic = 0.0
        for j in range(p.dim):
            shift = A[j](t, x, xi) if A else 0.0
            kinetic = kinetic + (xi[j] - shift) ** 2
        return kinetic / (2.0 * mass) + V(t, x, xi)

    return SymbolExpr(h, 2, 'h', p.dim, time_dependent=_time_dependent(p.V, *p.A))


def divergence_function(p):
    _, A = potential_functions(p)
    if not A:
        return None

    def divergence(t, x, xi):
        return sum(partial(A[j], 'x', j, 1)(t, x, xi) for j in range(p.dim))
    return divergence


def symmetrized_symbol(p):
    """h_s = h + (i / 2m) div A; its real part is h."""
    h = hamiltonian_symbol(p)
    divergence = divergence_function(p)
    if divergence is None:
        return SymbolExpr(h._func, 2, 'h_s', p.dim, time_dependent=h.time_dependent)
    mass = p.mass

    def h_s(t, x, xi):
        return h._func(t, x, xi) + 0.5j / mass * np.asarray(divergence(t, x, xi))
    return SymbolExpr(h_s, 2, 'h_s', p.dim, time_dependent=h.time_dependent, real=False)


def damping_symbol(k, dim=None):
    dim = k.dim if dim is None else dim
    if k.is_zero:
        return SymbolExpr(lambda t, x, xi: 0.0, 0, 'k', dim, time_dependent=False)
    degree = k.k.degree_in(xi_names(dim))
    return SymbolExpr(expression_function(k.k, dim, k.params), degree, 'k', dim,
                      time_dependent=k.k.depends_on('t'))


def generator_symbol(p, k):
    """h~ = h - i k."""
    h = hamiltonian_symbol(p)
    damping = damping_symbol(k, p.dim)
    degree = GENERAL if GENERAL in (h.degree, damping.degree) else max(h.degree, damping.degree)

    def h_tilde(t, x, xi):
        return h._func(t, x, xi) - 1j * np.asarray(damping._func(t, x, xi))
    return SymbolExpr(h_tilde, degree, 'h_tilde', p.dim,
                      time_dependent=h.time_dependent or damping.time_dependent, real=k.is_zero)


def lambda_symbol(p, mu):
    """lambda = mu + h_s."""
    h_s = symmetrized_symbol(p)
    return SymbolExpr(lambda t, x, xi: mu + h_s._func(t, x, xi), 2, 'lambda', p.dim,
                      time_dependent=h_s.time_dependent, real=h_s.real)


def lambda_m_symbol(dim, M, mu_prime, mass=1.0):
    """lambda_M = mu' + |xi|^2 / 2m + <x>^{2(M+1)}."""
    def lam(t, x, xi):
        return (mu_prime + sum(z ** 2 for z in xi) / (2.0 * mass)
                + (1.0 + sum(z ** 2 for z in x)) ** (M + 1))
    return SymbolExpr(lam, 2, 'lambda_M', dim, time_dependent=False)


CHI_PROFILES = {
    'gaussian': lambda s: np.exp(-s ** 2),
    'sech': lambda s: 1.0 / np.cosh(s),
}


def cutoff_symbol(h, mu, epsilon, chi=None):
    """chi_eps = chi(eps (mu + h)), with chi(0) = 1."""
    if not 0 < epsilon <= 1:
        raise ValueError(f'epsilon must lie in (0, 1], got {epsilon}')
    chi = chi or get_setting('DEFAULT_CHI')
    profile = CHI_PROFILES[chi] if isinstance(chi, str) else chi
    if not np.isclose(profile(np.array(0.0)), 1.0):
        raise ValueError('cutoff profile must satisfy chi(0) = 1')

    def chi_eps(t, x, xi):
        return profile(epsilon * (mu + np.real(h._func(t, x, xi))))
    symbol = SymbolExpr(chi_eps, GENERAL, 'chi_eps', h.dim, time_dependent=h.time_dependent)
    symbol.profile = chi if isinstance(chi, str) else getattr(chi, '__name__', 'custom')
    return symbol


def time_derivative_symbol(s, step=None):
    """Centered difference of s in t."""
    derivative = partial(s._func, 't', 0, 1, step=step)
    return SymbolExpr(derivative, s.degree, f'dt_{s.name}', s.dim,
                      time_dependent=s.time_dependent, real=s.real)


def parameter_derivative_symbol(build, params, name, step=None):
    """
    Centered difference in the parameter `name` of the symbol build(params).
    Step defaults to PARAM_FD_STEP * (1 + |rho|).
    """
    rho = float(params[name])
    step = get_setting('PARAM_FD_STEP') * (1.0 + abs(rho)) if step is None else step
    upper = build({**params, name: rho + step})
    lower = build({**params, name: rho - step})
    degrees = {upper.degree, lower.degree}
    degree = GENERAL if GENERAL in degrees else max(degrees)

    def derivative(t, x, xi):
        return (np.asarray(upper._func(t, x, xi)) - np.asarray(lower._func(t, x, xi))) / (2.0 * step)
    return SymbolExpr(derivative, degree, f'drho_{upper.name}', upper.dim,
                      time_dependent=upper.time_dependent, real=upper.real and lower.real)


# ==================== SAMPLING ====================

def _lattice_size(dim, n, with_xi):
    per_point = 2 * dim if with_xi else dim
    while n > 5 and n ** per_point > MAX_SAMPLES:
        n = n - 2 if n % 2 else n - 1
    return n


def sample_lattice(box, dim, n, with_xi=True, clamp=False):
    """
    Deterministic lattice over the box, flattened. Returns (x, xi, radius),
    radius = max(|x_j| / X, |xi_j| / Xi) in [0, 1]. Lattices of equal spacing nest.
    With clamp, n shrinks until the lattice fits MAX_SAMPLES.
    """
    if clamp:
        n = _lattice_size(dim, n, with_xi)
    xs = np.linspace(-box.x_extent, box.x_extent, n)
    if with_xi and box.xi_extent > 0:
        xis = np.linspace(-box.xi_extent, box.xi_extent, n)
        axes = np.meshgrid(*([xs] * dim + [xis] * dim), indexing='ij')
        x = tuple(a.reshape(-1) for a in axes[:dim])
        xi = tuple(a.reshape(-1) for a in axes[dim:])
        radius = np.max([np.abs(a) / box.x_extent for a in x]
                        + [np.abs(a) / box.xi_extent for a in xi], axis=0)
    else:
        axes = np.meshgrid(*([xs] * dim), indexing='ij')
        x = tuple(a.reshape(-1) for a in axes)
        xi = tuple(np.zeros_like(x[0]) for _ in range(dim))
        radius = np.max([np.abs(a) / box.x_extent for a in x], axis=0)
    return x, xi, radius


def _bracket_x(x):
    return np.sqrt(1.0 + sum(a ** 2 for a in x))


def growth_exponent(running):
    """Slope of log running-sup against log radius fraction."""
    running = np.asarray(running, dtype=float)
    if not np.all(np.isfinite(running)):
        return float('inf')
    top = running.max()
    if top <= 1e-14:
        return 0.0
    floor = top * 1e-12
    fit = stats.linregress(np.log(RADIUS_FRACTIONS), np.log(np.maximum(running, floor)))
    return float(fit.slope)


class _Samples:
    """Ratio values accumulated across sample times, with their coordinates."""

    def __init__(self):
        self.values, self.radius, self.t, self.x, self.xi = [], [], [], [], []

    def add(self, values, t, x, xi, radius):
        values = np.broadcast_to(np.asarray(values, dtype=float), radius.shape)
        self.values.append(values)
        self.radius.append(radius)
        self.t.append(np.full(radius.shape, float(t)))
        self.x.append(np.stack([np.broadcast_to(a, radius.shape) for a in x]))
        self.xi.append(np.stack([np.broadcast_to(a, radius.shape) for a in xi]))

    def arrays(self):
        return (np.concatenate(self.values), np.concatenate(self.radius), np.concatenate(self.t),
                np.concatenate(self.x, axis=1), np.concatenate(self.xi, axis=1))


def _witness(index, t, x, xi):
    return {'t': float(t[index]), 'x': [float(v) for v in x[:, index]],
            'xi': [float(v) for v in xi[:, index]]}


def _sup_clause(name, samples, required_positive=False):
    values, radius, t, x, xi = samples.arrays()
    tol = get_setting('GROWTH_EXPONENT_TOL')
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        return ClauseResult(name, float('inf'), float('inf'), False,
                            witness=_witness(bad, t, x, xi), detail='non-finite symbol value')
    index = int(np.argmax(values))
    constant = float(values[index])
    running = [values[radius <= f + 1e-12].max() for f in RADIUS_FRACTIONS]
    exponent = growth_exponent(running)
    passed = exponent <= tol and (constant > 0 or not required_positive)
    detail = '' if passed else (f'running sup grows like radius^{exponent:.2f}'
                                if exponent > tol else 'required positive constant is zero')
    return ClauseResult(name, constant, exponent, passed,
                        witness=_witness(index, t, x, xi), detail=detail)


def _fit_clause(name, ratio, lattice, times, required_positive=False):
    samples = _Samples()
    x, xi, radius = lattice
    for t in times:
        try:
            with np.errstate(all='ignore'):
                samples.add(ratio(t, x, xi), t, x, xi, radius)
        except ExpressionError as e:
            raise ExpressionError(f'clause {name}: derivative evaluation failed: {e.message}',
                                  expression=e.expression, field=e.field)
    return _sup_clause(name, samples, required_positive)


def _max_abs_derivatives(fn, t, x, xi, indices):
    """Elementwise max over (x_alpha, xi_alpha, t_order) of |derivative|."""
    out = 0.0
    for x_alpha, xi_alpha, t_order in indices:
        value = np.abs(np.asarray(mixed_partial(fn, x_alpha, xi_alpha, t_order)(t, x, xi)))
        out = np.maximum(out, value)
    return out


def _x_indices(dim, max_order, min_order=1, t_order=0):
    zero = (0,) * dim
    return [(a, zero, t_order) for a in multi_indices(dim, max_order) if sum(a) >= min_order]


def _phase_indices(dim, max_order, need_xi=0):
    out = []
    for a in multi_indices(dim, max_order):
        for b in multi_indices(dim, max_order - sum(a)):
            total = sum(a) + sum(b)
            if total >= 1 and sum(b) >= need_xi:
                out.append((a, b, 0))
    return out


def check_growth(p, k, cls, box, n_samples=101, max_order=3):
    """
    Fit the constants of every inequality of the chosen growth class on a
    sampling lattice and report each clause with its witness point.
    """
    if not 1 <= max_order <= 4:
        raise ValueError(f'derivative order must lie in 1..4, got {max_order}')
    dim = p.dim
    V, A = potential_functions(p)
    k_fn = damping_symbol(k, dim)._func
    damped = not k.is_zero
    notes = []
    n_x = _lattice_size(dim, n_samples, with_xi=False)
    n_xi = _lattice_size(dim, n_samples, with_xi=True)
    if n_xi != n_samples:
        notes.append(f'phase-space lattice reduced to {n_xi} points per axis')

    x_only = sample_lattice(box, dim, n_x, with_xi=False)
    phase = sample_lattice(box, dim, n_xi, with_xi=True)

    def per_time(name, ratio, lattice, required_positive=False):
        return _fit_clause(name, ratio, lattice, box.times, required_positive)

    def components_max(fns, indices):
        def ratio_of(t, x, xi):
            out = 0.0
            for fn in fns:
                out = np.maximum(out, _max_abs_derivatives(fn, t, x, xi, indices))
            return out
        return ratio_of

    clauses = []
    if cls.kind == 'subquadratic':
        grad_v = components_max([V], _x_indices(dim, max_order))
        clauses.append(per_time('potential_gradient_linear',
                                lambda t, x, xi: grad_v(t, x, xi) / _bracket_x(x), x_only))

        if A:
            indices = _x_indices(dim, max_order)

            def grad_a(t, x, xi):
                total = 0.0
                for x_alpha, xi_alpha, t_order in indices:
                    summed = sum(np.abs(np.asarray(mixed_partial(a, x_alpha, xi_alpha, t_order)(t, x, xi)))
                                 for a in A)
                    total = np.maximum(total, summed)
                return total
        else:
            def grad_a(t, x, xi):
                return np.zeros_like(x[0])
        clauses.append(per_time('vector_potential_gradient_bounded', grad_a, x_only))

        if damped:
            grad_k = components_max([k_fn], _phase_indices(dim, max_order))

            def linear(t, x, xi):
                size = 1.0 + np.sqrt(sum(a ** 2 for a in x)) + np.sqrt(sum(a ** 2 for a in xi))
                return grad_k(t, x, xi) / size
        else:
            def linear(t, x, xi):
                return np.zeros_like(x[0])
        clauses.append(per_time('damping_linear_growth', linear, phase))
    else:
        M = cls.M
        delta = cls.delta
        if M == 0:
            logger.info('confining class with M = 0 treated as the harmonic boundary case')
            notes.append('M = 0 accepted as the harmonic boundary case')

        def weight(x, power):
            return _bracket_x(x) ** power

        clauses.append(per_time('potential_confinement_upper',
                                lambda t, x, xi: np.maximum(np.asarray(V(t, x, xi)) / weight(x, 2 * (M + 1)), 0.0),
                                x_only))
        clauses.append(_confinement_lower(V, box, x_only, M))

        if damped:
            kx = components_max([k_fn], _x_indices(dim, max_order))
            kxi = components_max([k_fn], _phase_indices(dim, max_order, need_xi=1))
            clauses.append(per_time('damping_x_derivatives',
                                    lambda t, x, xi: kx(t, x, xi) / weight(x, M + 1), phase))
            clauses.append(per_time('damping_xi_derivatives', kxi, phase))
        else:
            for name in ('damping_x_derivatives', 'damping_xi_derivatives'):
                clauses.append(per_time(name, lambda t, x, xi: np.zeros_like(x[0]), phase))

        grad_v = components_max([V], _x_indices(dim, max_order))
        clauses.append(per_time('potential_derivatives',
                                lambda t, x, xi: grad_v(t, x, xi) / weight(x, 2 * (M + 1)), x_only))
        if _time_dependent(p.V):
            dt_v = components_max([V], _x_indices(dim, max_order - 1, min_order=0, t_order=1))
            clauses.append(per_time('potential_time_derivatives',
                                    lambda t, x, xi: dt_v(t, x, xi) / weight(x, 2 * (M + 1)), x_only))
        else:
            clauses.append(per_time('potential_time_derivatives',
                                    lambda t, x, xi: np.zeros_like(x[0]), x_only))

        zero_fn = [lambda t, x, xi: 0.0]
        a_fns = A or zero_fn
        clauses.append(per_time(
            'vector_potential_sublinear',
            lambda t, x, xi: np.max([np.abs(np.broadcast_to(a(t, x, xi), x[0].shape)) for a in a_fns], axis=0)
            / weight(x, M + 1 - delta), x_only))
        grad_a = components_max(a_fns, _x_indices(dim, max_order))
        clauses.append(per_time('vector_potential_derivatives',
                                lambda t, x, xi: grad_a(t, x, xi) / weight(x, M + 1), x_only))
        if _time_dependent(*p.A):
            dt_a = components_max(a_fns, _x_indices(dim, max_order - 1, min_order=0, t_order=1))
            clauses.append(per_time('vector_potential_time_derivatives',
                                    lambda t, x, xi: dt_a(t, x, xi) / weight(x, M + 1), x_only))
        else:
            clauses.append(per_time('vector_potential_time_derivatives',
                                    lambda t, x, xi: np.zeros_like(x[0]), x_only))

    # k >= -C on samples; the operator-level floor comes from quantize.garding_floor
    clauses.append(per_time('damping_lower_bound',
                            lambda t, x, xi: np.maximum(-np.real(np.asarray(k_fn(t, x, xi))), 0.0),
                            phase))

    report = AssumptionReport(
        growth=cls.kind,
        box={'x': box.x_extent, 'xi': box.xi_extent, 'times': list(box.times),
             'M': cls.M, 'delta': cls.delta, 'max_order': max_order},
        samples=n_xi,
        clauses=clauses,
        notes=notes,
    )
    for clause in clauses:
        if not clause.passed:
            logger.warning('clause %s failed: constant=%.3g exponent=%.3g',
                           clause.name, clause.constant, clause.exponent)
    return report


def _confinement_lower(V, box, lattice, M):
    """C0 = min V/<x>^{2(M+1)} on the outer shell, C1 = sup(C0 <x>^{2(M+1)} - V)."""
    x, xi, radius = lattice
    ratios = []
    ring_minima = np.full(len(RADIUS_FRACTIONS), np.inf)
    c0 = np.inf
    for t in box.times:
        with np.errstate(all='ignore'):
            v = np.broadcast_to(np.asarray(V(t, x, xi), dtype=float), radius.shape)
        w = _bracket_x(x) ** (2 * (M + 1))
        ratio = v / w
        ratios.append((t, v, w, ratio))
        shell = radius >= 0.9
        c0 = min(c0, float(ratio[shell].min()))
        for i, f in enumerate(RADIUS_FRACTIONS):
            ring = (radius >= f - 0.1) & (radius <= f + 1e-12)
            ring_minima[i] = min(ring_minima[i], ratio[ring].min())

    if not np.isfinite(c0) or c0 <= 0:
        t, v, w, ratio = ratios[0]
        index = int(np.argmin(ratio))
        return ClauseResult('potential_confinement_lower', max(c0, 0.0) if np.isfinite(c0) else 0.0,
                            float('inf'), False,
                            witness={'t': float(t), 'x': [float(a[index]) for a in x], 'xi': []},
                            detail='V is not bounded below by a positive multiple of the weight')

    c1, witness = 0.0, None
    for t, v, w, ratio in ratios:
        gap = c0 * w - v
        index = int(np.argmax(gap))
        if witness is None or gap[index] > c1:
            c1 = max(c1, float(gap[index]))
            witness = {'t': float(t), 'x': [float(a[index]) for a in x], 'xi': []}

    # decay of the ring minima toward the edge of the box
    fit = stats.linregress(np.log(RADIUS_FRACTIONS), np.log(np.maximum(ring_minima, 1e-300)))
    exponent = float(-fit.slope)
    passed = exponent <= get_setting('GROWTH_EXPONENT_TOL') and np.isfinite(c1)
    detail = f'C0={c0:.6g}, C1={c1:.6g}'
    if not passed:
        detail += f'; lower ratio decays like radius^-{exponent:.2f}'
    return ClauseResult('potential_confinement_lower', c0, exponent, passed, witness=witness,
                        detail=detail, extras={'C0': c0, 'C1': c1})


def check_derivative_growth(dV, dA, dk, cls, box, dim, n_samples=41):
    """
    Growth of parameter derivatives of V, A_j and k against the class weights:
    <x>^2, <x> and 1 + |x|^2 + |xi|^2 (subquadratic), or <x>^{2(M+1)},
    <x>^{M+1} and <x>^{2(M+1)} + <xi>^2 (confining). Missing derivatives pass with 0.
    """
    x_only = sample_lattice(box, dim, _lattice_size(dim, n_samples, with_xi=False), with_xi=False)
    phase = sample_lattice(box, dim, _lattice_size(dim, n_samples, with_xi=True), with_xi=True)
    M = cls.weight_index

    if cls.kind == 'subquadratic':
        def v_weight(x, xi):
            return _bracket_x(x) ** 2

        def a_weight(x, xi):
            return _bracket_x(x)

        def k_weight(x, xi):
            return 1.0 + sum(a ** 2 for a in x) + sum(b ** 2 for b in xi)
    else:
        def v_weight(x, xi):
            return _bracket_x(x) ** (2 * (M + 1))

        def a_weight(x, xi):
            return _bracket_x(x) ** (M + 1)

        def k_weight(x, xi):
            return _bracket_x(x) ** (2 * (M + 1)) + 1.0 + sum(b ** 2 for b in xi)

    def ratio(fns, weight):
        if not fns:
            return lambda t, x, xi: np.zeros_like(x[0])

        def r(t, x, xi):
            top = np.max([np.abs(np.broadcast_to(np.asarray(f(t, x, xi)), x[0].shape)) for f in fns], axis=0)
            return top / weight(x, xi)
        return r

    clauses = [
        _fit_clause('potential_parameter_derivative', ratio([dV] if dV else [], v_weight), x_only, box.times),
        _fit_clause('vector_potential_parameter_derivative', ratio(list(dA or []), a_weight), x_only, box.times),
        _fit_clause('damping_parameter_derivative', ratio([dk] if dk else [], k_weight), phase, box.times),
    ]
    for clause in clauses:
        if not clause.passed:
            logger.warning('parameter clause %s failed: constant=%.3g exponent=%.3g',
                           clause.name, clause.constant, clause.exponent)
    return AssumptionReport(
        growth=cls.kind,
        box={'x': box.x_extent, 'xi': box.xi_extent, 'times': list(box.times), 'M': cls.M},
        samples=n_samples, clauses=clauses)


def _power_fit(values, radius, x_extent):
    """Log-log slope of the running sup of |W| against <r> over the nested radii."""
    running = np.array([values[radius <= f + 1e-12].max() for f in RADIUS_FRACTIONS])
    if not np.all(np.isfinite(running)):
        return float('inf')
    if running.max() <= 1e-14:
        return 0.0
    brackets = np.sqrt(1.0 + (np.array(RADIUS_FRACTIONS) * x_extent) ** 2)
    fit = stats.linregress(np.log(brackets), np.log(np.maximum(running, running.max() * 1e-12)))
    return float(fit.slope)


def check_pair_growth(W, dim, kind, box, M0=0.0, delta=1.0, n_samples=41, label='interaction', max_order=3):
    """
    Clauses of one pair potential W(t, x) in the relative coordinate.
    kind='w12': |W| <= C <x>^{2(M0+1) - delta} with the margin 2(M0+1) - p reported,
    p the fitted growth power of |W|, and |d^alpha W| <= C <x>^{2(M0+1)}.
    kind='generic': |d^alpha W| <= C <x> for 1 <= |alpha| <= max_order.
    """
    lattice = sample_lattice(box, dim, n_samples, with_xi=False, clamp=True)
    x, xi, radius = lattice
    indices = _x_indices(dim, max_order)
    clauses = []

    if kind == 'w12':
        top = 2.0 * (M0 + 1.0)
        bound = _fit_clause(f'{label}_bound',
                            lambda t, x, xi: np.abs(np.asarray(W(t, x, xi))) / _bracket_x(x) ** (top - delta),
                            lattice, box.times)
        peaks = np.max([np.broadcast_to(np.abs(np.asarray(W(t, x, xi), dtype=complex)), radius.shape)
                        for t in box.times], axis=0)
        power = _power_fit(peaks, radius, box.x_extent)
        margin = top - power
        bound.extras.update({'delta': delta, 'M0': M0, 'growth_power': power, 'delta_margin': margin})
        if margin < get_setting('DELTA_MARGIN_TOL'):
            bound.passed = False
            bound.detail = f'|W| grows like <x>^{power:.2f}; no margin below <x>^{top:g}'
        clauses.append(bound)
        derivative_weight = top
    elif kind == 'generic':
        derivative_weight = 1.0
    else:
        raise ValueError(f'unknown interaction kind {kind!r}')

    clauses.append(_fit_clause(
        f'{label}_derivatives',
        lambda t, x, xi: _max_abs_derivatives(W, t, x, xi, indices) / _bracket_x(x) ** derivative_weight,
        lattice, box.times))
    for clause in clauses:
        if not clause.passed:
            logger.warning('clause %s failed: constant=%.3g exponent=%.3g %s',
                           clause.name, clause.constant, clause.exponent, clause.detail)
    return clauses


def fit_lower_bound_constants(p, cls, box, n_samples=101):
    """
    Fit (C0*, C1*) with C0*(<xi>^2 + <x>^{2(M+1)}) - C1* <= h <= (<xi>^2 + <x>^{2(M+1)}) / C0*
    at every sample. Raises FitError when no positive C0* exists.
    """
    M = cls.weight_index if isinstance(cls, GrowthClass) else float(cls)
    h = hamiltonian_symbol(p)
    n = _lattice_size(p.dim, n_samples, with_xi=True)
    x, xi, radius = sample_lattice(box, p.dim, n, with_xi=True)
    weight = (1.0 + sum(a ** 2 for a in xi)) + _bracket_x(x) ** (2 * (M + 1))

    sup_ratio, shell_min, values = 0.0, np.inf, []
    for t in box.times:
        with np.errstate(all='ignore'):
            hv = np.real(h(t, x, xi))
        if not np.all(np.isfinite(hv)):
            raise FitError('hamiltonian symbol is not finite on the sampling box')
        ratio = hv / weight
        sup_ratio = max(sup_ratio, float(ratio.max()))
        shell = weight >= 0.25 * weight.max()
        shell_min = min(shell_min, float(ratio[shell].min()))
        values.append(hv)

    upper = 1.0 / sup_ratio if sup_ratio > 0 else np.inf
    c0 = min(1.0, upper, shell_min)
    if c0 <= 1e-6:
        logger.warning('lower-bound fit infeasible: C0*=%.3g', c0)
        raise FitError(f'no positive C0* fits the samples (best {c0:.3g}); '
                       f'h does not dominate <xi>^2 + <x>^{2 * (M + 1):g}')
    c1 = max(0.0, max(float(np.max(c0 * weight - hv)) for hv in values))
    logger.info('lower-bound constants C0*=%.6g C1*=%.6g', c0, c1)
    return c0, c1


def default_mu(c0, c1):
    return max(1.0, 2.0 * c1 + c0 / 2.0)


def default_box(grid, times=(0.0,)):
    return SamplingBox.for_grid(grid, times)
