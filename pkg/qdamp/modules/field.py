"""Grids, states, lattice quadrature, spectral derivatives and the boundary guard."""
import logging

import numpy as np
from scipy import fft

from qdamp.config import get_setting
from qdamp.errors import BoundaryContaminationError, GridError
from qdamp.models import Grid, State

logger = logging.getLogger(__name__)


def make_grid(D, N, L):
    """Build a Grid; rejects odd N, N < 8, nonpositive L and N^D > 2^22."""
    for name, value in (('D', D), ('N', N)):
        if isinstance(value, bool) or int(value) != value:
            raise GridError(f'{name} must be an integer, got {value!r}')
    return Grid(int(D), int(N), float(L))


def same_grid(*states):
    grid = states[0].grid
    for s in states[1:]:
        if s.grid != grid:
            raise GridError(f'grid mismatch: {grid.to_dict()} vs {s.grid.to_dict()}')
    return grid


def inner_product(f, g):
    """(f, g) = h^D sum f conj(g); conjugate-linear in the second slot."""
    grid = same_grid(f, g)
    return complex(grid.cell * np.vdot(g.values, f.values))


def l2_norm(f):
    return float(np.sqrt(f.grid.cell) * np.linalg.norm(f.flat))


def parseval_norm(f):
    """L2 norm computed on the frequency side."""
    coeffs = fft.fftn(f.values)
    return float(np.sqrt(f.grid.cell / f.grid.size) * np.linalg.norm(coeffs.reshape(-1)))


def derivative_multiplier(grid, axis, order):
    """(i xi)^order along one axis, broadcastable; odd orders drop the Nyquist mode."""
    multiplier = (1j * grid.freq_fft) ** order
    if order % 2:
        multiplier[grid.nyquist_index] = 0.0
    shape = [1] * grid.dim
    shape[axis] = grid.points
    return multiplier.reshape(shape)


def spectral_derivative(f, alpha):
    """Apply d^alpha by multiplying the DFT with (i xi)^alpha."""
    grid = f.grid
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != grid.dim:
        raise GridError(f'multi-index {alpha} does not match dimension {grid.dim}')
    if any(a < 0 for a in alpha):
        raise ValueError(f'multi-index entries must be nonnegative, got {alpha}')
    max_order = get_setting('MAX_DERIVATIVE_ORDER')
    if sum(alpha) > max_order:
        raise ValueError(f'derivative order {sum(alpha)} exceeds {max_order}')
    if not any(alpha):
        return f

    coeffs = fft.fftn(f.values)
    for axis, order in enumerate(alpha):
        if order:
            coeffs = coeffs * derivative_multiplier(grid, axis, order)
    return f.with_values(fft.ifftn(coeffs))


def multi_indices(dim, max_order):
    """All multi-indices with |alpha| <= max_order, ordered by total degree."""
    out = [()]
    for _ in range(dim):
        out = [a + (k,) for a in out for k in range(max_order + 1)]
    return sorted((a for a in out if sum(a) <= max_order), key=lambda a: (sum(a), a))


def boundary_mass(f, margin_fraction, axes=None):
    """
    Fraction of ||f||^2 carried by points with |x_j| > L(1 - 2*margin) on any
    of the selected axes. A uniform state gives about 1 - (1 - 2*margin)^D.
    """
    if not 0 < margin_fraction < 0.5:
        raise ValueError(f'margin fraction must lie in (0, 0.5), got {margin_fraction}')
    grid = f.grid
    density = np.abs(f.values) ** 2
    total = density.sum()
    if total == 0:
        return 0.0

    edge_1d = np.abs(grid.axis) > grid.half_width * (1.0 - 2.0 * margin_fraction)
    mask = np.zeros(grid.shape, dtype=bool)
    for axis in (range(grid.dim) if axes is None else axes):
        shape = [1] * grid.dim
        shape[axis] = grid.points
        mask |= edge_1d.reshape(shape)
    return float(density[mask].sum() / total)


def assert_boundary_clean(f, where='', step=None, margin=None, threshold=None):
    margin = get_setting('BOUNDARY_MARGIN') if margin is None else margin
    threshold = get_setting('BOUNDARY_MASS_THRESHOLD') if threshold is None else threshold
    mass = boundary_mass(f, margin)
    if mass > threshold:
        message = (f'boundary mass {mass:.3e} exceeds {threshold:.1e}'
                   f'{" in " + where if where else ""} at t={f.time_tag:g}'
                   f'{"" if step is None else f" (step {step})"}')
        logger.warning(message)
        raise BoundaryContaminationError(message, mass=mass, time=f.time_tag, step=step)
    return mass


# ==================== STATE BUILDERS ====================

def _per_axis(value, dim):
    values = np.atleast_1d(np.asarray(value, dtype=float))
    if values.size == 1:
        return np.repeat(values, dim)
    if values.size != dim:
        raise GridError(f'expected {dim} per-axis values, got {values.size}')
    return values


def normalize(f):
    norm = l2_norm(f)
    return f if norm == 0 else f * (1.0 / norm)


def gaussian_state(grid, center=0.0, width=1.0, momentum=0.0, t=0.0):
    """Normalized packet exp(-(x-c)^2 / 2w^2 + i k x), one factor per axis."""
    centers = _per_axis(center, grid.dim)
    widths = _per_axis(width, grid.dim)
    momenta = _per_axis(momentum, grid.dim)
    if np.any(widths <= 0):
        raise ValueError('gaussian width must be positive')
    values = np.ones(grid.shape, dtype=np.complex128)
    for j, x in enumerate(grid.mesh):
        values = values * np.exp(-(x - centers[j]) ** 2 / (2 * widths[j] ** 2) + 1j * momenta[j] * x)
    return normalize(State(grid, values, t))


def plane_wave(grid, modes, t=0.0):
    """exp(i k.x) with k = (pi/L) * modes; modes are integer lattice indices."""
    modes = _per_axis(modes, grid.dim)
    phase = sum(grid.dxi * m * x for m, x in zip(modes, grid.mesh))
    return State(grid, np.exp(1j * phase), t)


def random_state(grid, rng, band=None, envelope=None, t=0.0):
    """
    Random complex state with unit norm. `band` keeps DFT modes with
    |index| <= band; `envelope` multiplies by a centered Gaussian of that width.
    """
    values = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    if band is not None:
        index = np.abs(np.fft.fftfreq(grid.points, d=1.0 / grid.points))
        keep = index <= band
        coeffs = fft.fftn(values)
        for axis in range(grid.dim):
            shape = [1] * grid.dim
            shape[axis] = grid.points
            coeffs = coeffs * keep.reshape(shape)
        values = fft.ifftn(coeffs)
    if envelope is not None:
        values = values * np.exp(-sum(x ** 2 for x in grid.mesh) / (2 * envelope ** 2))
    return normalize(State(grid, values, t))


def resample(f, points):
    """Trigonometric interpolation of f onto `points` per axis on the same box."""
    grid = f.grid
    if points < grid.points:
        raise GridError(f'cannot resample {grid.points} points per axis down to {points}')
    target = make_grid(grid.dim, points, grid.half_width)
    if points == grid.points:
        return f
    N, pad = grid.points, (points - grid.points) // 2
    coeffs = fft.fftshift(fft.fftn(f.values))
    for axis in range(grid.dim):
        # the unpaired -N/2 mode is split evenly between -N/2 and +N/2
        nyquist = [slice(None)] * grid.dim
        nyquist[axis] = slice(0, 1)
        half = 0.5 * coeffs[tuple(nyquist)]
        coeffs = coeffs.copy()
        coeffs[tuple(nyquist)] = half
        widths = [(0, 0)] * grid.dim
        widths[axis] = (pad, pad)
        coeffs = np.pad(coeffs, widths)
        mirror = [slice(None)] * grid.dim
        mirror[axis] = slice(pad + N, pad + N + 1)
        coeffs[tuple(mirror)] = half
    values = fft.ifftn(fft.ifftshift(coeffs)) * (points / N) ** grid.dim
    return State(target, values, f.time_tag)


def zero_state(grid, t=0.0):
    return State(grid, np.zeros(grid.shape, dtype=np.complex128), t)
