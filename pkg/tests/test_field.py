"""Tests for grids, states and spectral derivatives."""
import numpy as np
import pytest
from numpy.testing import assert_allclose

from qdamp.errors import BoundaryContaminationError, GridError, StateFormatError
from qdamp.models import State
from qdamp.modules.field import (
    assert_boundary_clean, boundary_mass, gaussian_state, inner_product, l2_norm, make_grid,
    multi_indices, parseval_norm, plane_wave, random_state, resample, spectral_derivative,
)


class TestMakeGrid:
    """Tests for make_grid and the Grid geometry."""

    def test_spacing_and_dual_spacing(self):
        """Test h = 2L/N and dxi = pi/L."""
        grid = make_grid(1, 64, 8.0)
        assert grid.h == pytest.approx(0.25)
        assert grid.dxi == pytest.approx(np.pi / 8.0)
        assert grid.axis[0] == pytest.approx(-8.0)
        assert len(grid.axis) == 64

    def test_shape_and_size(self):
        """Test shape and size of a two-dimensional grid."""
        grid = make_grid(2, 16, 3.0)
        assert grid.shape == (16, 16)
        assert grid.size == 256

    def test_nyquist_entry_is_negative(self):
        """Test that the FFT-ordered Nyquist frequency carries -N/2."""
        grid = make_grid(1, 16, np.pi)
        assert grid.freq_fft[8] == pytest.approx(-8.0)

    def test_rejects_odd_points(self):
        """Test that odd N is rejected."""
        with pytest.raises(GridError):
            make_grid(1, 65, 8.0)

    def test_rejects_too_few_points(self):
        """Test that N < 8 is rejected."""
        with pytest.raises(GridError):
            make_grid(1, 6, 8.0)

    def test_rejects_nonpositive_width(self):
        """Test that L <= 0 is rejected."""
        with pytest.raises(GridError):
            make_grid(1, 32, 0.0)

    def test_rejects_non_integer_dimension(self):
        """Test that a fractional D is rejected."""
        with pytest.raises(GridError):
            make_grid(1.5, 32, 1.0)


class TestStates:
    """Tests for State construction, norms and inner products."""

    def test_rejects_wrong_size(self, grid64):
        """Test that a value array of the wrong size is rejected."""
        with pytest.raises(StateFormatError):
            State(grid64, np.zeros(63))

    def test_rejects_nan(self, grid64):
        """Test that NaN entries are rejected."""
        values = np.zeros(64)
        values[3] = np.nan
        with pytest.raises(StateFormatError):
            State(grid64, values)

    def test_gaussian_is_normalized(self, grid64):
        """Test that gaussian_state has unit norm."""
        assert l2_norm(gaussian_state(grid64, 0.5, 1.0, 2.0)) == pytest.approx(1.0, abs=1e-12)

    def test_parseval(self, grid64):
        """Test that the frequency-side norm equals the lattice norm."""
        f = random_state(grid64, np.random.default_rng(1)) * 3.0
        assert parseval_norm(f) == pytest.approx(l2_norm(f), rel=1e-12)

    def test_inner_product_conjugate_linear_in_second_slot(self, grid64):
        """Test (f, i g) = -i (f, g)."""
        rng = np.random.default_rng(2)
        f, g = random_state(grid64, rng), random_state(grid64, rng)
        assert inner_product(f, g * 1j) == pytest.approx(-1j * inner_product(f, g), abs=1e-14)

    def test_random_state_is_reproducible(self, grid64):
        """Test that equal seeds give equal states."""
        a = random_state(grid64, np.random.default_rng(5))
        b = random_state(grid64, np.random.default_rng(5))
        assert_allclose(a.values, b.values)

    def test_gaussian_rejects_nonpositive_width(self, grid64):
        """Test that a zero width is rejected."""
        with pytest.raises(ValueError):
            gaussian_state(grid64, width=0.0)

    def test_states_on_different_grids(self, grid64):
        """Test that mixing grids raises GridError."""
        other = make_grid(1, 32, 8.0)
        with pytest.raises(GridError):
            inner_product(gaussian_state(grid64), gaussian_state(other))


class TestResample:
    """Tests for trigonometric interpolation onto a finer grid."""

    def test_gaussian_on_finer_grid(self, grid64):
        """Test that a resolved Gaussian interpolates to the finer-grid Gaussian."""
        fine = resample(gaussian_state(grid64, 0.0, 1.0), 128)
        assert fine.grid.points == 128
        assert fine.grid.half_width == pytest.approx(8.0)
        assert_allclose(fine.values, gaussian_state(make_grid(1, 128, 8.0), 0.0, 1.0).values, atol=1e-12)

    def test_keeps_original_samples(self, grid64):
        """Test that every other fine sample is an original sample."""
        f = random_state(grid64, np.random.default_rng(3))
        fine = resample(f, 128)
        assert_allclose(fine.values[::2], f.values, atol=1e-12)

    def test_two_dimensional(self):
        """Test resampling of a product state in two dimensions."""
        coarse = gaussian_state(make_grid(2, 16, 5.0), (0.5, -0.5), 1.0)
        fine = resample(coarse, 32)
        assert fine.grid.shape == (32, 32)
        assert_allclose(fine.values[::2, ::2], coarse.values, atol=1e-12)

    def test_rejects_fewer_points(self, grid64):
        """Test that resampling down is a GridError."""
        with pytest.raises(GridError):
            resample(gaussian_state(grid64), 32)


class TestSpectralDerivative:
    """Tests for spectral_derivative."""

    @pytest.fixture(scope='module')
    def periodic(self):
        return make_grid(1, 32, np.pi)

    def test_first_derivative_of_sine(self, periodic):
        """Test d/dx sin(x) = cos(x) to rounding."""
        x = periodic.axis
        f = State(periodic, np.sin(x))
        assert_allclose(spectral_derivative(f, (1,)).values, np.cos(x), atol=1e-12)

    def test_second_derivative_of_plane_wave(self, periodic):
        """Test d^2/dx^2 exp(ikx) = -k^2 exp(ikx)."""
        f = plane_wave(periodic, 3)
        assert_allclose(spectral_derivative(f, (2,)).values, -9.0 * f.values, atol=1e-10)

    def test_zero_order_is_identity(self, periodic):
        """Test that alpha = 0 returns the state itself."""
        f = plane_wave(periodic, 2)
        assert spectral_derivative(f, (0,)) is f

    def test_order_limit(self, periodic):
        """Test that orders above MAX_DERIVATIVE_ORDER are rejected."""
        with pytest.raises(ValueError):
            spectral_derivative(plane_wave(periodic, 1), (7,))

    def test_multi_index_dimension_mismatch(self, periodic):
        """Test that a multi-index of the wrong length is rejected."""
        with pytest.raises(GridError):
            spectral_derivative(plane_wave(periodic, 1), (1, 0))

    def test_multi_indices_order(self):
        """Test multi-indices sorted by total degree, zero included."""
        assert multi_indices(2, 1) == [(0, 0), (0, 1), (1, 0)]
        assert len(multi_indices(2, 2)) == 6


class TestBoundaryGuard:
    """Tests for boundary_mass and assert_boundary_clean."""

    def test_uniform_state_mass(self):
        """Test that a uniform state carries about 2*margin of its mass at the edge."""
        grid = make_grid(1, 100, 1.0)
        mass = boundary_mass(State(grid, np.ones(100)), 0.05)
        assert abs(mass - 0.1) <= 0.02

    def test_clean_gaussian_passes(self, grid64):
        """Test that a centered narrow packet passes the guard."""
        assert assert_boundary_clean(gaussian_state(grid64, 0.0, 0.5)) < 1e-8

    def test_uniform_state_trips_guard(self, grid64):
        """Test that the guard raises with the step attached."""
        with pytest.raises(BoundaryContaminationError) as exc:
            assert_boundary_clean(State(grid64, np.ones(64)), where='test', step=4)
        assert exc.value.step == 4
        assert exc.value.mass > 1e-8

    def test_margin_must_be_fraction(self, grid64):
        """Test that a margin outside (0, 0.5) is rejected."""
        with pytest.raises(ValueError):
            boundary_mass(gaussian_state(grid64), 0.6)
