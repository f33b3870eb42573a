"""Tests for parameter families and the sensitivity equation."""
import numpy as np
import pytest

from qdamp.errors import ExpressionError, ParameterDomainError
from qdamp.models import DampingSpec, EvolveConfig, GrowthClass, PotentialSpec, SamplingBox, variable_names
from qdamp.modules.field import gaussian_state, l2_norm
from qdamp.modules.sensitivity import (
    CLOSED_FORM, FINITE_DIFFERENCE, ParametrizedFamily, check_parameter_growth, continuity_scan,
    convergence_study, dpar_operator, dpar_symbol, ratios_in_band, solve_sensitivity, _trajectory,
)
from qdamp.utils.parsers import parse_expression


def family_of(grid, V='rho*x**2/2', dV='x**2/2', fallback=True, interval=(0.5, 1.5)):
    potentials = PotentialSpec.from_strings(V, None, 1.0, {'rho': 1.0}, 1)
    derivatives = {}
    if dV is not None:
        derivatives['V'] = parse_expression(dV, allowed=variable_names(1) | {'rho'})
    return ParametrizedFamily(potentials, DampingSpec(), GrowthClass('confining', 0.0), grid,
                              gaussian_state(grid, 0.5, 1.0), 0.2, 'rho', interval, derivatives, fallback)


@pytest.fixture(scope='module')
def config():
    return EvolveConfig(dt=1e-2)


class TestDerivativeSymbol:
    """Tests for d_rho h~ and its source."""

    def test_closed_form_matches_finite_difference(self, grid64):
        """Test both derivative sources at one point."""
        exact, numeric = family_of(grid64), family_of(grid64, dV=None)
        assert exact.derivative_source == CLOSED_FORM
        assert numeric.derivative_source == FINITE_DIFFERENCE
        point = (0.0, (np.array(1.5),), (np.array(0.3),))
        assert np.real(dpar_symbol(numeric, 1.0)(*point)) == pytest.approx(
            np.real(dpar_symbol(exact, 1.0)(*point)), rel=1e-6)

    def test_missing_derivative_without_fallback(self, grid64):
        """Test that a missing closed form is an error when fallback is off."""
        family = family_of(grid64, dV=None, fallback=False)
        with pytest.raises(ExpressionError):
            family.derivative_source

    def test_independent_family_has_zero_derivative(self, grid64):
        """Test that a family not depending on rho has d_rho h~ = 0."""
        family = family_of(grid64, V='x**2/2', dV=None)
        assert dpar_symbol(family, 1.0)(0.0, (np.array(1.0),), (np.array(1.0),)) == 0.0

    def test_domain(self, grid64):
        """Test that rho outside the interval is rejected."""
        with pytest.raises(ParameterDomainError):
            family_of(grid64).problem(2.0)

    def test_interval_must_increase(self, grid64):
        """Test that an empty interval is rejected."""
        with pytest.raises(ValueError):
            family_of(grid64, interval=(1.0, 1.0))


class TestSensitivity:
    """Tests for the sensitivity solve and the convergence studies."""

    def test_difference_quotients_converge(self, grid64, config):
        """Test first-order convergence of (u(rho + tau) - u(rho)) / tau to w."""
        report = convergence_study(family_of(grid64), 1.0, [1e-2, 5e-3, 2.5e-3], config)
        assert report.passed
        assert report.order >= 0.9
        assert report.monotone
        assert report.bound_ratio > 0
        assert list(report.to_frame().columns) == ['tau', 'error', 'ratio']
        assert np.all((report.ratios >= 0.4) & (report.ratios <= 0.6))
        assert report.ratio_band == pytest.approx((0.4, 0.6))
        assert report.refined_bound_ratio is not None
        assert report.refinement_gap <= 0.1

    def test_sensitivity_starts_at_zero(self, grid64, config):
        """Test w(0) = 0 and w nonzero afterwards."""
        family = family_of(grid64)
        w = solve_sensitivity(family, 1.0, _trajectory(family, 1.0, config), config)
        assert w.norms[0] == 0.0
        assert w.norms[-1] > 0.0
        assert len(w.states) == 21

    def test_sensitivity_needs_every_step(self, grid64, config):
        """Test that a strided trajectory is rejected."""
        from qdamp.modules.evolve import propagate
        family = family_of(grid64)
        strided = propagate(family.problem(1.0), EvolveConfig(dt=1e-2, stride=5, keep_states=True))
        with pytest.raises(ValueError):
            solve_sensitivity(family, 1.0, strided, config)

    def test_taus_must_be_geometric(self, grid64, config):
        """Test that a non-geometric tau list is rejected."""
        with pytest.raises(ValueError):
            convergence_study(family_of(grid64), 1.0, [1e-2, 5e-3, 1e-3], config)

    def test_continuity_gaps_shrink(self, grid64, config):
        """Test that ||u(rho + tau) - u(rho)|| decreases with tau."""
        report = continuity_scan(family_of(grid64), 1.0, [0.2, 0.1, 0.05], config)
        assert report.passed
        assert report.norms[0] > report.norms[-1] > 0

    def test_parameter_growth_samples_interval(self, grid64):
        """Test one growth report per sampled rho."""
        reports = check_parameter_growth(family_of(grid64), SamplingBox(6.0, 6.0), n_samples=21)
        assert len(reports) == 3
        assert any('rho=0.5' in note for note in reports[0].notes)

    def test_norm_of_trajectory(self, grid64, config):
        """Test that the kept trajectory is unitary."""
        family = family_of(grid64)
        u = _trajectory(family, 1.0, config)
        assert abs(l2_norm(u.final_state) - 1.0) < 1e-8

    def test_discrete_equation_residual(self, grid64, config):
        """Test that every w step solves the differentiated CN step to rounding."""
        family = family_of(grid64)
        u = _trajectory(family, 1.0, config)
        w = solve_sensitivity(family, 1.0, u, config)
        G = family.problem(1.0).generator()
        S = dpar_operator(family, 1.0)
        dt = w.dt
        for n in range(len(w.states) - 1):
            a, b = w.states[n].flat, w.states[n + 1].flat
            average = 0.5 * (u.states[n].flat + u.states[n + 1].flat)
            residual = (b + 0.5j * dt * G.matvec(b)) - (a - 0.5j * dt * G.matvec(a)) + 1j * dt * S.matvec(average)
            assert np.linalg.norm(residual) <= 1e-9

    def test_ratio_band(self):
        """Test the successive-ratio band around the tau step."""
        ok, band = ratios_in_band([0.49, 0.51], 0.5)
        assert ok
        assert band == pytest.approx((0.4, 0.6))
        assert not ratios_in_band([0.49, 0.75], 0.5)[0]
        assert not ratios_in_band([0.5, np.nan], 0.5)[0]
        assert ratios_in_band([0.65], 0.5, slack=0.4)[0]
