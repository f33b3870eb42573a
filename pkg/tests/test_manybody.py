"""Tests for interacting many-particle problems on the flattened grid."""
import numpy as np
import pytest
from numpy.testing import assert_allclose

from qdamp.errors import GridError, ParameterDomainError
from qdamp.models import DampingSpec, EvolveConfig, GrowthClass, Interaction, Particle, PotentialSpec
from qdamp.modules import manybody as mb
from qdamp.modules.evolve import Problem, propagate
from qdamp.modules.field import gaussian_state, l2_norm, make_grid


def particle(V='x**2/2'):
    return Particle(PotentialSpec.from_strings(V, None, 1.0, None, 1), DampingSpec(), GrowthClass('confining', 0.0))


@pytest.fixture(scope='module')
def grid():
    return make_grid(2, 32, 6.0)


@pytest.fixture(scope='module')
def coupling():
    return Interaction.from_string(0, 1, '0.5*exp(-x**2)', 'w12', 1.0)


@pytest.fixture(scope='module')
def pair(grid, coupling):
    problem = mb.ManyBodyProblem((particle(), particle()), (coupling,), grid, T=0.2)
    left = gaussian_state(problem.particle_grid, -1.0, 1.0)
    right = gaussian_state(problem.particle_grid, 1.0, 1.0)
    return problem, left, right


class TestStates:
    """Tests for tensor products and particle exchange."""

    def test_tensor_state(self, pair):
        """Test the shape, norm and values of a product state."""
        _, left, right = pair
        product = mb.tensor_state([left, right])
        assert product.grid.shape == (32, 32)
        assert l2_norm(product) == pytest.approx(1.0, abs=1e-12)
        assert_allclose(product.values, np.multiply.outer(left.values, right.values))

    def test_swap_exchanges_factors(self, pair):
        """Test that swapping a product state swaps its factors."""
        _, left, right = pair
        swapped = mb.swap_particles(mb.tensor_state([left, right]), 0, 1)
        assert_allclose(swapped.values, mb.tensor_state([right, left]).values)

    def test_tensor_needs_two_factors(self, pair):
        """Test that a single factor is rejected."""
        with pytest.raises(ValueError):
            mb.tensor_state([pair[1]])

    def test_factors_share_grid(self, pair):
        """Test that factors with different N are rejected."""
        with pytest.raises(GridError):
            mb.tensor_state([pair[1], gaussian_state(make_grid(1, 16, 6.0))])


class TestProblem:
    """Tests for ManyBodyProblem validation and weights."""

    def test_particle_count(self, grid):
        """Test that 2 to 4 particles are accepted."""
        with pytest.raises(ValueError):
            mb.ManyBodyProblem((particle(),), (), make_grid(1, 32, 6.0))

    def test_grid_dimension(self):
        """Test that two 1D particles need a 2D grid."""
        with pytest.raises(GridError):
            mb.ManyBodyProblem((particle(), particle()), (), make_grid(1, 32, 6.0))

    def test_interaction_refers_to_particle(self, grid):
        """Test that an interaction with a missing particle is rejected."""
        w = Interaction.from_string(1, 2, 'x**2', 'generic')
        with pytest.raises(ValueError):
            mb.ManyBodyProblem((particle(), particle()), (w,), grid)

    def test_phi_weight_at_origin(self, pair):
        """Test Phi(0) = 2 for two particles with M = 0."""
        problem, _, _ = pair
        assert mb.phi_weight(problem, (np.array(0.0), np.array(0.0))) == pytest.approx(2.0)

    def test_bprime_levels(self, pair):
        """Test that level 0 is L2 and level 1 dominates it."""
        problem, left, right = pair
        u = mb.tensor_state([left, right])
        assert mb.bprime_norm(u, 0, problem) == pytest.approx(1.0, abs=1e-12)
        assert mb.bprime_norm(u, 1, problem) > 1.0
        with pytest.raises(ValueError):
            mb.bprime_norm(u, 2, problem)

    def test_interaction_growth(self, pair):
        """Test the per-particle clauses and the w12 bound."""
        problem, _, _ = pair
        report = mb.check_interaction_growth(problem, n_samples=21)
        names = [c.name for c in report.clauses]
        assert any(name.startswith('particle1.') for name in names)
        assert any(name.startswith('particle2.') for name in names)
        assert report.clause('interaction_1_2_bound').passed


class TestPropagation:
    """Tests for mb_propagate and exchange symmetry."""

    @pytest.fixture(scope='module')
    def config(self):
        return EvolveConfig(dt=0.02, stride=5)

    def test_undamped_run(self, pair, config):
        """Test unitarity and the B' level series."""
        problem, left, right = pair
        report = mb.mb_propagate(problem, config, u0=mb.tensor_state([left, right]))
        assert report.verdicts['unitary']
        assert report.verdicts['norm_growth_bound']
        assert len(report.levels['bprime_1']) == len(report.times)

    def test_exchange_symmetry(self, pair, config):
        """Test that evolving then swapping equals swapping then evolving."""
        problem, left, right = pair
        forward = propagate(problem.with_u0(mb.tensor_state([left, right])), config).final_state
        mirrored = propagate(problem.with_u0(mb.tensor_state([right, left])), config).final_state
        assert_allclose(mb.swap_particles(forward, 0, 1).values, mirrored.values, atol=1e-10)

    def test_decoupled_particles_factorize(self, grid, config):
        """Test that without interaction the run stays a product state."""
        problem = mb.ManyBodyProblem((particle(), particle('x**2')), (), grid, T=0.2)
        left = gaussian_state(problem.particle_grid, -1.0, 1.0)
        right = gaussian_state(problem.particle_grid, 1.0, 1.0)
        joint = propagate(problem.with_u0(mb.tensor_state([left, right])), config).final_state
        singles = []
        for p, u0 in zip(problem.particles, (left, right)):
            single = Problem(p.potentials, p.damping, p.growth, problem.particle_grid, u0, problem.T)
            singles.append(propagate(single, config).final_state)
        assert l2_norm(joint - mb.tensor_state(singles)) < 1e-2

    def test_propagate_needs_datum(self, pair, config):
        """Test that a problem without u0 cannot be propagated."""
        problem, _, _ = pair
        with pytest.raises(ValueError):
            mb.mb_propagate(problem, config)


class TestParametrix:
    """Tests for the many-body parametrix remainder scan."""

    def test_remainder_decays_in_mu(self, pair):
        """Test the coupled pair over two decades of mu."""
        problem, _, _ = pair
        mus = [100.0, 316.22776601683796, 1000.0, 3162.2776601683795, 10000.0]
        report = mb.mb_parametrix_scan(problem, mus, seed=1)
        assert report.extras['particles'] == 2
        assert report.extras['mu_star'] <= mus[0]
        assert report.norms.max() < 1.0
        assert report.norms[-1] < report.norms[0]
        assert report.slope < 0
        assert report.passed == (report.within_band and report.extras['decreasing'])

    def test_mu_below_shift(self, pair):
        """Test that a mu list starting below mu* is rejected."""
        problem, _, _ = pair
        mu_star, _ = mb.lower_bound_shift(problem)
        if mu_star <= 0:
            pytest.skip('mu* is zero for this pair')
        with pytest.raises(ParameterDomainError):
            mb.mb_parametrix_scan(problem, [mu_star / 2, mu_star, 10 * mu_star, 100 * mu_star, 1000 * mu_star])
