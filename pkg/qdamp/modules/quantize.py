"""
Midpoint (Weyl) quantization of phase-space symbols on a periodic grid.

Symbols of degree <= 2 in xi go through symmetric operator orderings applied
with FFTs; anything else is built as a dense kernel in frequency space. Both
paths treat the unpaired Nyquist frequency the same way, so they agree to
rounding on every quadratic symbol.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from numbers import Number

import numpy as np
from scipy import fft, linalg
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh, gmres

from qdamp.config import get_setting
from qdamp.errors import GridError, SolverError
from qdamp.models import NormEstimate

logger = logging.getLogger(__name__)

KINDS = ('poly_fast', 'dense_kernel', 'composition')


@dataclass(frozen=True, eq=False)
class OperatorHandle:
    """Linear operator on states of one grid, frozen at time t, with its adjoint."""

    kind: str
    grid: object
    t: float
    apply: object
    adjoint_apply: object
    matrix: np.ndarray | None = None
    label: str = ''
    meta: dict = field(default_factory=dict)

    def __call__(self, f):
        if f.grid != self.grid:
            raise GridError('operator and state live on different grids')
        return f.with_values(self.apply(f.values))

    def matvec(self, v):
        return self.apply(np.asarray(v).reshape(self.grid.shape)).reshape(-1)

    def rmatvec(self, v):
        return self.adjoint_apply(np.asarray(v).reshape(self.grid.shape)).reshape(-1)

    def adjoint(self):
        matrix = None if self.matrix is None else self.matrix.conj().T
        return OperatorHandle(self.kind, self.grid, self.t, self.adjoint_apply, self.apply,
                              matrix, f'({self.label})^dagger' if self.label else '', dict(self.meta))

    def as_linear_operator(self):
        n = self.grid.size
        return LinearOperator((n, n), matvec=self.matvec, rmatvec=self.rmatvec, dtype=np.complex128)

    def to_dense(self):
        if self.matrix is not None:
            return self.matrix
        check_dense_size(self.grid)
        n = self.grid.size
        columns = np.eye(n, dtype=np.complex128)
        return np.stack([self.matvec(columns[:, i]) for i in range(n)], axis=1)

    def dense(self):
        return dense_handle(self.to_dense(), self.grid, self.t, label=self.label)

    # ---- algebra ----

    def _coerce(self, other):
        if isinstance(other, Number):
            return identity(self.grid, self.t) * other
        if other.grid != self.grid:
            raise GridError('cannot combine operators on different grids')
        return other

    def __add__(self, other):
        other = self._coerce(other)
        matrix = None
        if self.matrix is not None and other.matrix is not None:
            matrix = self.matrix + other.matrix
        return OperatorHandle(
            'composition', self.grid, self.t,
            lambda v: self.apply(v) + other.apply(v),
            lambda v: self.adjoint_apply(v) + other.adjoint_apply(v),
            matrix, f'{self.label} + {other.label}')

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, scalar):
        if not isinstance(scalar, Number):
            return NotImplemented
        matrix = None if self.matrix is None else scalar * self.matrix
        conj = np.conj(scalar)
        return OperatorHandle(
            'composition' if scalar != 1 else self.kind, self.grid, self.t,
            lambda v: scalar * self.apply(v),
            lambda v: conj * self.adjoint_apply(v),
            matrix, f'{scalar}*{self.label}', dict(self.meta))

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = self._coerce(other)
        matrix = None
        if self.matrix is not None and other.matrix is not None:
            matrix = self.matrix @ other.matrix
        return OperatorHandle(
            'composition', self.grid, self.t,
            lambda v: self.apply(other.apply(v)),
            lambda v: other.adjoint_apply(self.adjoint_apply(v)),
            matrix, f'{self.label} {other.label}')


def check_dense_size(grid):
    limit = get_setting('DENSE_LIMIT')
    if grid.size > limit:
        raise GridError(f'dense kernel needs N^D <= {limit}, grid has {grid.size} points')


def identity(grid, t=0.0):
    return OperatorHandle('poly_fast', grid, t, lambda v: v, lambda v: v, label='I')


def zero_operator(grid, t=0.0):
    return OperatorHandle('poly_fast', grid, t, np.zeros_like, np.zeros_like, label='0')


def multiplication(grid, values, t=0.0, label='m'):
    values = np.broadcast_to(np.asarray(values, dtype=np.complex128), grid.shape)
    conj = values.conj()
    return OperatorHandle('poly_fast', grid, t, lambda v: values * v, lambda v: conj * v, label=label)


def dense_handle(matrix, grid, t=0.0, label='K'):
    matrix = np.asarray(matrix, dtype=np.complex128)
    if matrix.shape != (grid.size, grid.size):
        raise GridError(f'kernel shape {matrix.shape} does not match grid size {grid.size}')
    shape = grid.shape
    adjoint = matrix.conj().T
    return OperatorHandle(
        'dense_kernel', grid, t,
        lambda v: (matrix @ v.reshape(-1)).reshape(shape),
        lambda v: (adjoint @ v.reshape(-1)).reshape(shape),
        matrix, label)


def adjoint(op):
    return op.adjoint()


# ==================== FAST PATH ====================

class _Spectral:
    """Per-axis spectral factors: D_j (odd, Nyquist dropped), D_j^2 and the Nyquist projector."""

    def __init__(self, grid):
        xi = grid.freq_fft
        odd = xi.copy()
        odd[grid.nyquist_index] = 0.0
        sign = (-1.0) ** np.arange(grid.points)
        self.grid = grid
        self.nyquist = abs(xi[grid.nyquist_index])
        self.odd = [self._along(odd, j) for j in range(grid.dim)]
        self.square = [self._along(xi ** 2, j) for j in range(grid.dim)]
        self.sign = [self._along(sign, j) for j in range(grid.dim)]

    def _along(self, values, axis):
        shape = [1] * self.grid.dim
        shape[axis] = self.grid.points
        return values.reshape(shape)

    def D(self, v, j):
        return fft.ifft(fft.fft(v, axis=j) * self.odd[j], axis=j)

    def D2(self, v, j):
        return fft.ifft(fft.fft(v, axis=j) * self.square[j], axis=j)

    def nyquist_part(self, v, j):
        s = self.sign[j]
        return s * np.mean(s * v, axis=j, keepdims=True)


def _as_coefficient(c):
    c = np.asarray(c, dtype=np.complex128)
    if not np.any(c):
        return None
    flat = c.reshape(-1)
    if np.all(flat == flat[0]):
        return complex(flat[0])
    return np.array(c)


def _poly_apply(spectral, c0, c1, c2):
    """Symmetric-ordering action of c0 + c1.xi + xi.c2.xi."""
    nu2 = spectral.nyquist ** 2

    def apply(v):
        out = np.zeros(v.shape, dtype=np.complex128) if c0 is None else c0 * v
        for j, c in enumerate(c1):
            if c is None:
                continue
            if isinstance(c, complex):
                out = out + c * spectral.D(v, j)
            else:
                out = out + 0.5 * (c * spectral.D(v, j) + spectral.D(c * v, j))
        for (j, k), c in c2.items():
            if c is None:
                continue
            if j == k:
                if isinstance(c, complex):
                    out = out + c * spectral.D2(v, j)
                    continue
                out = out + 0.25 * (spectral.D2(c * v, j) + 2.0 * spectral.D(c * spectral.D(v, j), j)
                                    + c * spectral.D2(v, j))
                # Nyquist-Nyquist block of the midpoint rule
                out = out + 0.5 * nu2 * spectral.nyquist_part(c * spectral.nyquist_part(v, j), j)
            else:
                Dj, Dk = spectral.D, spectral.D
                out = out + 0.25 * (Dj(Dk(c * v, k), j) + Dj(c * Dk(v, k), j)
                                    + Dk(c * Dj(v, j), k) + c * Dj(Dk(v, k), j))
        return out
    return apply


def quantize_poly(s, grid, t=0.0):
    """Fast midpoint quantization of a symbol of degree <= 2 in xi."""
    if not s.is_polynomial:
        raise ValueError(f'symbol {s.name!r} has general degree; use quantize_dense')
    if s.dim != grid.dim:
        raise GridError(f'symbol dimension {s.dim} does not match grid dimension {grid.dim}')
    c0, c1, c2 = s.taylor_coefficients(t, grid.mesh)
    if not all(np.all(np.isfinite(c)) for c in [c0, *c1, *c2.values()]):
        raise ValueError(f'symbol {s.name!r} is not finite on the grid')

    coeffs = (_as_coefficient(c0), [_as_coefficient(c) for c in c1],
              {key: _as_coefficient(c) for key, c in c2.items()})
    conj = (None if coeffs[0] is None else np.conj(coeffs[0]),
            [None if c is None else np.conj(c) for c in coeffs[1]],
            {key: None if c is None else np.conj(c) for key, c in coeffs[2].items()})
    spectral = _Spectral(grid)
    return OperatorHandle('poly_fast', grid, t, _poly_apply(spectral, *coeffs),
                          _poly_apply(spectral, *conj), label=s.name,
                          meta={'degree': s.degree})


# ==================== DENSE PATH ====================

@lru_cache(maxsize=16)
def _midpoint_pairs(N):
    """
    For each doubled midpoint index m in [-N, N], the frequency pairs (zeta, eta)
    whose midpoint is m/2 and their weights. A Nyquist index stands for both
    signed representatives; a Nyquist-Nyquist pair keeps the same-sign ones.
    """
    k = np.fft.fftfreq(N, d=1.0 / N).astype(int)
    nyq = N // 2
    Z, E = np.meshgrid(np.arange(N), np.arange(N), indexing='ij')
    Z, E = Z.reshape(-1), E.reshape(-1)
    base = k[Z] + k[E]
    z_nyq, e_nyq = Z == nyq, E == nyq
    regular = ~z_nyq & ~e_nyq
    single = z_nyq ^ e_nyq
    double = z_nyq & e_nyq

    m = np.concatenate([base[regular], base[single], base[single] + N,
                        np.full(double.sum(), -N), np.full(double.sum(), N)])
    zeta = np.concatenate([Z[regular], Z[single], Z[single], Z[double], Z[double]])
    eta = np.concatenate([E[regular], E[single], E[single], E[double], E[double]])
    weight = np.concatenate([np.ones(regular.sum()), np.full(2 * single.sum(), 0.5),
                             np.full(2 * double.sum(), 0.5)])

    table = {}
    order = np.argsort(m, kind='stable')
    m, zeta, eta, weight = m[order], zeta[order], eta[order], weight[order]
    bounds = np.flatnonzero(np.diff(m)) + 1
    for chunk in np.split(np.arange(len(m)), bounds):
        table[int(m[chunk[0]])] = (zeta[chunk], eta[chunk], weight[chunk])
    return table


def _weyl_frequency_matrix(s, grid, t):
    N, D = grid.points, grid.dim
    pairs = _midpoint_pairs(N)
    M = np.zeros(grid.shape * 2, dtype=np.complex128)
    mesh = grid.mesh
    half = grid.dxi / 2.0

    for combo in product(sorted(pairs), repeat=D):
        xi = tuple(np.full(grid.shape, half * m) for m in combo)
        coeffs = fft.fftn(s(t, mesh, xi)) / grid.size
        axes = []
        for j, m in enumerate(combo):
            zeta, eta, weight = pairs[m]
            shape = [1] * D
            shape[j] = len(zeta)
            axes.append((zeta.reshape(shape), eta.reshape(shape), weight.reshape(shape)))
        Z = tuple(a[0] for a in axes)
        E = tuple(a[1] for a in axes)
        W = np.prod([a[2] for a in axes], axis=0) if D > 1 else axes[0][2]
        Q = tuple((z - e) % N for z, e in zip(Z, E))
        M[Z + E] += W * coeffs[Q]
    return M


def _standard_matrix(s, grid, t):
    """Left ordering: the symbol is evaluated at the output point."""
    D, n = grid.dim, grid.size
    k = np.fft.fftfreq(grid.points, d=1.0 / grid.points)
    index_axes = np.meshgrid(*([k] * D), indexing='ij')
    eta = tuple(a.reshape(-1) for a in index_axes)
    x = tuple(a.reshape(-1, 1) for a in grid.mesh)
    position = tuple(a.reshape(-1, 1) for a in np.meshgrid(*([np.arange(grid.points)] * D), indexing='ij'))

    nyq = -grid.points // 2
    S = 0.0
    combos = list(product(*[(1.0, -1.0)] * D))
    for signs in combos:
        # Nyquist entries average both signed representatives; others are unchanged
        xi = tuple((np.where(e == nyq, sgn * e, e) * grid.dxi)[None, :] for e, sgn in zip(eta, signs))
        S = S + s(t, x, xi)
    S = S / len(combos)
    phase = np.exp(2j * np.pi * sum(p * e[None, :] for p, e in zip(position, eta)) / grid.points)
    G = (S * phase).reshape((n,) + grid.shape)
    K = fft.fftn(G, axes=tuple(range(1, D + 1))) / n
    return K.reshape(n, n)


def quantize_dense(s, grid, t=0.0, ordering='weyl'):
    """
    Dense kernel of the quantized symbol. ordering='weyl' evaluates the symbol
    at the midpoint frequency (exact midpoint rule); ordering='standard'
    evaluates it at the output point.
    """
    check_dense_size(grid)
    if s.dim != grid.dim:
        raise GridError(f'symbol dimension {s.dim} does not match grid dimension {grid.dim}')
    if ordering == 'weyl':
        M = _weyl_frequency_matrix(s, grid, t)
        D = grid.dim
        eta_axes = tuple(range(D, 2 * D))
        zeta_axes = tuple(range(D))
        K = fft.ifftn(fft.fftn(M, axes=eta_axes), axes=zeta_axes).reshape(grid.size, grid.size)
    elif ordering == 'standard':
        K = _standard_matrix(s, grid, t)
    else:
        raise ValueError(f'unknown ordering {ordering!r}')
    if not np.all(np.isfinite(K)):
        raise ValueError(f'symbol {s.name!r} is not finite on the grid')
    handle = dense_handle(K, grid, t, label=s.name)
    handle.meta.update({'ordering': ordering, 'degree': s.degree})
    return handle


def quantize(s, grid, t=0.0):
    """Fast path for degree <= 2, dense kernel otherwise."""
    if s.is_polynomial:
        return quantize_poly(s, grid, t)
    return quantize_dense(s, grid, t)


# ==================== SOLVES ====================

def solve_iterative(op, rhs, x0=None, tol=None, where='linear solve'):
    """GMRES for op v = rhs; raises SolverError when the true residual exceeds tol."""
    tol = get_setting('CN_RESIDUAL_TOL') if tol is None else tol
    solution, info = gmres(op.as_linear_operator(), rhs, x0=None if x0 is None else x0.copy(),
                           rtol=get_setting('GMRES_RTOL'), atol=0.0, restart=60,
                           maxiter=get_setting('SOLVER_MAXITER'))
    scale = max(np.linalg.norm(rhs), 1e-300)
    residual = float(np.linalg.norm(op.matvec(solution) - rhs) / scale)
    if residual > tol:
        logger.error('%s stopped with residual %.2e (info=%s)', where, residual, info)
        raise SolverError(f'{where} did not converge (residual {residual:.2e})', residual=residual)
    return solution


# ==================== SPECTRAL ESTIMATES ====================

def hermitian_part(op):
    return 0.5 * (op + op.adjoint())


def garding_floor(op):
    """Smallest eigenvalue of (op + op^dagger) / 2."""
    grid = op.grid
    if grid.size <= get_setting('DENSE_LIMIT'):
        A = op.to_dense()
        herm = 0.5 * (A + A.conj().T)
        return float(linalg.eigvalsh(herm, subset_by_index=[0, 0])[0])

    herm = hermitian_part(op).as_linear_operator()
    try:
        values = eigsh(herm, k=1, which='SA', tol=1e-10,
                       maxiter=get_setting('SOLVER_MAXITER') * 10, return_eigenvectors=False)
    except ArpackNoConvergence as e:
        residual = float(np.min(e.eigenvalues)) if len(e.eigenvalues) else None
        logger.error('Lanczos floor did not converge (best %s)', residual)
        raise SolverError('garding floor eigensolve did not converge', residual=residual)
    return float(values[0])


def op_norm_estimate(op, iters=None, seed=None):
    """Largest singular value by power iteration on op^dagger op."""
    iters = get_setting('POWER_ITERS') if iters is None else int(iters)
    if iters < 20:
        raise ValueError(f'power iteration needs at least 20 iterations, got {iters}')
    seed = get_setting('DEFAULT_SEED') if seed is None else seed
    rng = np.random.default_rng(seed)
    n = op.grid.size
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v /= np.linalg.norm(v)

    tol = get_setting('POWER_TOL')
    sigma, rel = 0.0, np.inf
    for i in range(1, iters + 1):
        w = op.rmatvec(op.matvec(v))
        lam = np.linalg.norm(w)
        if lam == 0:
            return NormEstimate(0.0, 0.0, i, True)
        v = w / lam
        new = float(np.sqrt(lam))
        rel = abs(new - sigma) / new
        sigma = new
        if rel <= tol:
            break
    converged = rel <= get_setting('POWER_CONVERGED_TOL')
    if not converged:
        logger.warning('power iteration stopped at rel change %.2e after %d iterations', rel, i)
    return NormEstimate(sigma, float(rel), i, converged)


def symmetry_defect(op, seed=None):
    """||op - op^dagger|| / ||op||."""
    total = op_norm_estimate(op, seed=seed).value
    if total == 0:
        return 0.0
    return op_norm_estimate(op - op.adjoint(), seed=seed).value / total


def export_kernel(op, path):
    """Write the dense kernel as a .npy matrix."""
    matrix = op.to_dense()
    np.save(path, matrix)
    logger.info('kernel %s (%d x %d) written to %s', op.label, *matrix.shape, path)
    return path
