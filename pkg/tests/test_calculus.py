"""Tests for the parametrix, resolvent, commutator and Q_a diagnostics."""
import numpy as np
import pytest
from numpy.testing import assert_allclose

from qdamp.errors import FitError, ParameterDomainError
from qdamp.models import DampingSpec, GrowthClass, PotentialSpec
from qdamp.modules import calculus as c
from qdamp.modules.evolve import Problem, cutoff_operator, regularized_operator
from qdamp.modules.field import gaussian_state, make_grid
from qdamp.modules.symbols import symmetrized_symbol


MUS = [100.0, 316.22776601683796, 1000.0, 3162.2776601683795, 10000.0]
EPSILONS = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625]


def make_problem(V='x**2/2', points=32, half_width=4.0, A=None, k=None):
    grid = make_grid(1, points, half_width)
    damping = DampingSpec.from_string(k, None, 1) if k else DampingSpec()
    return Problem(PotentialSpec.from_strings(V, A, 1.0, None, 1), damping,
                   GrowthClass('confining', 0.0), grid)


@pytest.fixture(scope='module')
def harmonic():
    return make_problem()


@pytest.fixture(scope='module')
def free():
    return make_problem('0')


@pytest.fixture(scope='module')
def magnetic():
    return make_problem(A=['0.5*sin(x)'], points=64, half_width=8.0)


class TestParametrix:
    """Tests for p_mu and the remainder decay scan."""

    def test_parametrix_value(self):
        """Test p_mu = 1 / (mu + h_s) at one point."""
        h_s = symmetrized_symbol(PotentialSpec.from_strings('x**2/2', None, 1.0, None, 1))
        p = c.parametrix_symbol(h_s, 2.0)
        assert p(0.0, (np.array(1.0),), (np.array(0.0),)) == pytest.approx(0.4)

    def test_mu_below_floor(self):
        """Test that mu under the admissible floor is rejected."""
        h_s = symmetrized_symbol(PotentialSpec.from_strings('x**2', None, 1.0, None, 1))
        with pytest.raises(ParameterDomainError):
            c.parametrix_symbol(h_s, 1.0, floor=2.0)
        with pytest.raises(ParameterDomainError):
            c.parametrix_symbol(h_s, 0.0)

    def test_free_particle_constants(self, free):
        """Test the C0* = 0 fallback when h does not dominate the weight."""
        assert c.lower_bound_constants(free) == (0.0, 0.0)

    def test_free_parametrix_is_exact(self, free):
        """Test that an x-independent symbol inverts mu + H to rounding."""
        report = c.remainder_decay_scan(free, [1.0, 10.0, 100.0, 1e3, 1e4], seed=1)
        assert report.passed
        assert report.skipped

    def test_mu_list_validation(self):
        """Test the size and span requirements on mu lists."""
        with pytest.raises(ValueError):
            c.check_mu_list([1, 10, 100, 1000])
        with pytest.raises(ValueError):
            c.check_mu_list([1, 2, 3, 4, 5])
        assert list(c.check_mu_list([100, 1, 10, 1000, 10000])) == [1, 10, 100, 1000, 10000]

    def test_remainder_matrix(self):
        """Test (mu + H) P - I = 0 for an exact diagonal inverse."""
        H = np.diag([1.0, 2.0, 3.0])
        P = np.diag(1.0 / (5.0 + np.array([1.0, 2.0, 3.0])))
        assert_allclose(c.remainder_matrix(H, P, 5.0), np.zeros((3, 3)), atol=1e-15)


class TestDecayReport:
    """Tests for the log-log decay fit."""

    @pytest.fixture(scope='module')
    def mus(self):
        return np.logspace(1, 3, 5)

    def test_half_power_decay_passes(self, mus):
        """Test that mu^{-1/2} decay is inside the band."""
        report = c.decay_report(mus, 0.3 * mus ** -0.5)
        assert report.slope == pytest.approx(-0.5)
        assert report.within_band
        assert report.passed

    def test_growing_remainder_fails(self, mus):
        """Test that a growing remainder fails the one-sided bound."""
        report = c.decay_report(mus, 1e-3 * mus ** 0.1)
        assert not report.bound_consistent
        assert not report.passed

    def test_first_power_decay_fails(self, mus):
        """Test that mu^{-1} decay is below the band and fails the verdict."""
        report = c.decay_report(mus, mus ** -1.0)
        assert report.slope == pytest.approx(-1.0)
        assert report.bound_consistent
        assert not report.within_band
        assert not report.passed

    def test_non_decreasing_norms_fail(self):
        """Test that a slope in the band does not pass when one step goes up."""
        mus = np.logspace(1, 3, 6)
        norms = mus ** -0.5
        norms[2], norms[3] = norms[3], norms[2]
        report = c.decay_report(mus, norms)
        assert report.within_band
        assert not report.extras['decreasing']
        assert not report.passed

    def test_magnetic_harmonic_scan(self, magnetic):
        """Test the remainder scan on the magnetic harmonic problem."""
        report = c.remainder_decay_scan(magnetic, MUS, seed=11)
        assert np.all(np.diff(report.norms) < 0)
        assert report.norms.max() < 1.0
        assert report.slope < report.band[1]
        assert report.passed == report.within_band

    def test_exclusion_zone_leaves_too_few_points(self, mus):
        """Test that the fit needs 4 points beyond 10 C1*."""
        with pytest.raises(FitError):
            c.decay_report(mus, mus ** -0.5, shift=50.0)


class TestResolvent:
    """Tests for the direct resolvent and the Neumann series."""

    def test_direct_resolvent_residual(self, harmonic):
        """Test (mu + H) g = f."""
        f = gaussian_state(harmonic.grid, 0.3, 0.8)
        g = c.resolvent_apply(harmonic, 10.0, f)
        residual = harmonic.hamiltonian().matvec(g.flat) + 10.0 * g.flat - f.flat
        assert np.linalg.norm(residual) < 1e-10

    def test_neumann_series_matches_direct_solve(self, harmonic):
        """Test that the Neumann series reproduces the direct resolvent when summable."""
        f = gaussian_state(harmonic.grid, -0.4, 0.9)
        check = c.resolvent_cross_check(harmonic, 100.0, f, terms=40, seed=3)
        assert check['summable']
        assert check['remainder'] < 0.5
        assert check['gap'] < 1e-8
        series = check['neumann'].flat
        residual = harmonic.hamiltonian().matvec(series) + 100.0 * series - f.flat
        assert np.linalg.norm(residual) < 1e-8

    def test_neumann_needs_a_term(self, harmonic):
        """Test that terms < 1 is rejected."""
        with pytest.raises(ValueError):
            c.neumann_resolvent(harmonic, 10.0, gaussian_state(harmonic.grid), terms=0)


class TestCommutators:
    """Tests for commutator scans and the Q_a operators."""

    def test_free_commutator_vanishes(self, free):
        """Test that X_eps commutes with Lambda when both are Fourier multipliers."""
        report = c.commutator_bound_scan(free, [1.0, 0.5, 0.25, 0.125], seed=2)
        assert report.passed
        assert report.skipped

    def test_epsilon_validation(self, harmonic):
        """Test that epsilon scans need 4 values inside (0, 1]."""
        with pytest.raises(ValueError):
            c.commutator_bound_scan(harmonic, [1.0, 0.5, 0.25])
        with pytest.raises(ValueError):
            c.commutator_bound_scan(harmonic, [2.0, 1.0, 0.5, 0.25])

    def test_uniform_band_constant_norms(self):
        """Test that a flat scan passes with band ratio 1."""
        report = c.uniform_band_report('epsilon', [1.0, 0.5, 0.25, 0.125], [2.0, 2.0, 2.0, 2.0])
        assert report.passed
        assert report.extras['band_ratio'] == pytest.approx(1.0)

    def test_uniform_band_divergent_norms(self):
        """Test that norms growing like 1/eps fail."""
        eps = np.array([1.0, 0.5, 0.25, 0.125])
        report = c.uniform_band_report('epsilon', eps, 1.0 / eps)
        assert not report.passed
        assert report.slope == pytest.approx(-1.0)
        assert report.extras['divergent_run']

    def test_uniform_band_oscillating_norms(self):
        """Test that bounded norms with band ratio 10 fail the band."""
        report = c.uniform_band_report('epsilon', EPSILONS, [1.0, 10.0, 1.0, 10.0, 1.0, 10.0, 1.0])
        assert report.extras['band_ratio'] == pytest.approx(10.0)
        assert report.extras['bounded']
        assert not report.within_band
        assert not report.passed

    def test_regularized_operator(self):
        """Test H~_eps = X^dagger (H - iK) X and the sign of its damping part."""
        problem = make_problem(k='x**2')
        X = cutoff_operator(problem, 0.25).matrix
        G = problem.generator().to_dense()
        H_eps = regularized_operator(problem, 0.25).matrix
        assert_allclose(H_eps, X.conj().T @ G @ X, atol=1e-10)
        skew = (H_eps - H_eps.conj().T) / 2j
        assert np.linalg.eigvalsh(0.5 * (skew + skew.conj().T)).max() < 1e-10

    def test_regularized_operator_is_hermitian_without_damping(self, harmonic):
        """Test that the undamped H~_eps stays Hermitian."""
        H_eps = regularized_operator(harmonic, 0.1).matrix
        assert_allclose(H_eps, H_eps.conj().T, atol=1e-10 * np.abs(H_eps).max())

    def test_q_a_scan(self, harmonic):
        """Test the Q_1 scan report on the harmonic problem."""
        report = c.q_a_scan(harmonic, 1, [0.125, 1.0, 0.25, 0.5], seed=2)
        assert list(report.values) == [1.0, 0.5, 0.25, 0.125]
        assert np.all(np.isfinite(report.norms))
        assert report.extras['a'] == 1
        assert report.passed == (report.within_band and report.extras['bounded'])

    def test_q_a_scan_free_particle(self, free):
        """Test that Q_a vanishes when every operator is a Fourier multiplier."""
        report = c.q_a_scan(free, 1, [1.0, 0.5, 0.25, 0.125], seed=2)
        assert report.norms.max() < 1e-8

    def test_q_a_identities(self, harmonic):
        """Test the algebraic relations between Q_{-1}, Q_1 and Q_2."""
        gaps = c.q_a_identity_gap(harmonic, 0.1)
        assert gaps['minus_one'] < 1e-8
        assert gaps['two'] < 1e-8

    def test_q_a_level(self, harmonic):
        """Test that only a in {-1, 1, 2} is accepted."""
        with pytest.raises(ValueError):
            c.q_a_matrix(harmonic, 3, 0.1)
