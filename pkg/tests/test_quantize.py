"""Tests for operator quantization, spectral estimates and solves."""
import numpy as np
import pytest
from numpy.testing import assert_allclose

from qdamp.errors import GridError
from qdamp.models import PotentialSpec
from qdamp.modules import quantize as q
from qdamp.modules.field import make_grid, random_state, spectral_derivative
from qdamp.modules.symbols import SymbolExpr, hamiltonian_symbol


def symbol_of(V, A=None, mass=1.0):
    return hamiltonian_symbol(PotentialSpec.from_strings(V, A, mass, None, 1))


class TestQuantizePaths:
    """Fast path against the dense kernel."""

    @pytest.fixture(scope='module')
    def states(self, grid64):
        rng = np.random.default_rng(11)
        return [random_state(grid64, rng) for _ in range(5)]

    @pytest.mark.parametrize('V,A', [
        ('x**2/2', None),
        ('x**2/2 + 0.3*sin(2*x)', ['cos(x)']),
        ('w(x)', ['0.5*x']),
    ])
    def test_fast_matches_dense_weyl(self, grid64, states, V, A):
        """Test that both paths agree to rounding for degree-2 symbols."""
        s = symbol_of(V, A)
        fast = q.quantize_poly(s, grid64)
        dense = q.quantize_dense(s, grid64)
        for f in states:
            expected = dense.matvec(f.flat)
            gap = np.linalg.norm(fast.matvec(f.flat) - expected) / np.linalg.norm(expected)
            assert gap <= 1e-10

    def test_kinetic_symbol_is_laplacian(self, grid64, states):
        """Test that xi^2 quantizes to minus the spectral second derivative."""
        s = symbol_of('0', mass=0.5)
        op = q.quantize(s, grid64)
        f = states[0]
        assert_allclose(op(f).values, -spectral_derivative(f, (2,)).values, atol=1e-9)

    def test_multiplication_symbol(self, grid64, states):
        """Test that a degree-0 symbol acts pointwise."""
        s = SymbolExpr(lambda t, x, xi: np.cos(x[0]), 0, 'cos', 1, time_dependent=False)
        f = states[1]
        assert_allclose(q.quantize(s, grid64)(f).values, np.cos(grid64.axis) * f.values, atol=1e-12)

    def test_general_degree_goes_dense(self, grid64):
        """Test that a general symbol is quantized as a dense kernel."""
        s = SymbolExpr(lambda t, x, xi: np.exp(-xi[0] ** 2), 'general', 'g', 1, time_dependent=False)
        assert q.quantize(s, grid64).kind == 'dense_kernel'

    def test_standard_ordering_of_real_potential(self, grid64, states):
        """Test that both orderings agree on a pure multiplication."""
        s = SymbolExpr(lambda t, x, xi: x[0] ** 2, 0, 'x2', 1, time_dependent=False)
        left = q.quantize_dense(s, grid64, ordering='standard')
        weyl = q.quantize_dense(s, grid64)
        assert_allclose(left.to_dense(), weyl.to_dense(), atol=1e-10)

    def test_unknown_ordering(self, grid64):
        """Test that an unknown ordering is rejected."""
        with pytest.raises(ValueError):
            q.quantize_dense(symbol_of('x**2'), grid64, ordering='anti')

    def test_dense_size_limit(self):
        """Test that dense kernels refuse grids above DENSE_LIMIT."""
        with pytest.raises(GridError):
            q.check_dense_size(make_grid(2, 128, 4.0))


class TestOperatorAlgebra:
    """Tests for handle composition, adjoints and dense export."""

    def test_sum_and_scalar(self, grid64):
        """Test (2A + I) on a dense handle."""
        rng = np.random.default_rng(3)
        A = rng.standard_normal((64, 64))
        op = 2.0 * q.dense_handle(A, grid64) + q.identity(grid64)
        assert_allclose(op.to_dense(), 2.0 * A + np.eye(64), atol=1e-12)

    def test_composition(self, grid64):
        """Test that @ multiplies kernels."""
        rng = np.random.default_rng(4)
        A, B = rng.standard_normal((64, 64)), rng.standard_normal((64, 64))
        op = q.dense_handle(A, grid64) @ q.dense_handle(B, grid64)
        assert_allclose(op.to_dense(), A @ B, atol=1e-10)

    def test_adjoint_of_complex_symbol(self, grid64):
        """Test that the adjoint handle is the conjugate transpose."""
        op = q.quantize(symbol_of('x**2/2', ['cos(x)']), grid64) - 1j * q.identity(grid64)
        assert_allclose(op.adjoint().to_dense(), op.to_dense().conj().T, atol=1e-10)

    def test_real_symbol_is_hermitian(self, grid64):
        """Test that a real degree-2 symbol gives a symmetric operator."""
        op = q.quantize(symbol_of('x**2/2 + 0.3*sin(2*x)', ['cos(x)']), grid64)
        assert q.symmetry_defect(op, seed=1) < 1e-8

    def test_mismatched_grids(self, grid64):
        """Test that operators on different grids do not combine."""
        with pytest.raises(GridError):
            q.identity(grid64) + q.identity(make_grid(1, 32, 8.0))

    def test_export_kernel(self, grid64, tmp_path):
        """Test that the dense kernel is written as a .npy matrix."""
        op = q.quantize(symbol_of('x**2/2'), grid64)
        path = q.export_kernel(op, tmp_path / 'kernel.npy')
        assert_allclose(np.load(path), op.to_dense())


class TestSpectralEstimates:
    """Tests for op_norm_estimate, garding_floor and solve_iterative."""

    @pytest.fixture(scope='module')
    def grid(self):
        return make_grid(1, 32, 4.0)

    def test_norm_of_position(self, grid):
        """Test ||x|| = L on the lattice."""
        op = q.multiplication(grid, grid.axis)
        estimate = q.op_norm_estimate(op, iters=300, seed=2)
        assert estimate.value == pytest.approx(4.0, rel=1e-6)

    def test_norm_of_identity(self, grid):
        """Test that the identity has norm 1 and converges at once."""
        estimate = q.op_norm_estimate(q.identity(grid), seed=2)
        assert estimate.value == pytest.approx(1.0)
        assert estimate.converged

    def test_too_few_iterations(self, grid):
        """Test that fewer than 20 iterations is rejected."""
        with pytest.raises(ValueError):
            q.op_norm_estimate(q.identity(grid), iters=5)

    def test_garding_floor_of_shifted_potential(self, grid):
        """Test that x^2 - 1 has floor -1 (x = 0 is a lattice point)."""
        op = q.multiplication(grid, grid.axis ** 2 - 1.0)
        assert q.garding_floor(op) == pytest.approx(-1.0, abs=1e-12)

    def test_solve_iterative(self, grid):
        """Test GMRES on I + i diag(x)."""
        op = q.identity(grid) + 1j * q.multiplication(grid, grid.axis)
        rhs = np.ones(grid.size, dtype=complex)
        solution = q.solve_iterative(op, rhs)
        assert_allclose(solution, 1.0 / (1.0 + 1j * grid.axis), atol=1e-10)
