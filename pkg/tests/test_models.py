"""Tests for the value types and report containers."""
import numpy as np
import pytest

from qdamp.errors import GridError
from qdamp.models import (
    AssumptionReport, ClauseResult, DampingSpec, EvolutionReport, EvolveConfig, Grid, GrowthClass, Interaction,
    NormSpec, PotentialSpec, SamplingBox, ScanReport, _plain, variable_names,
)


class TestSpecs:
    """Tests for grid, growth, norm and interaction specs."""

    def test_grid_size_cap(self):
        """Test that grids above 2^22 points are rejected."""
        with pytest.raises(GridError):
            Grid(3, 256, 1.0)

    def test_box_for_grid(self):
        """Test that the default box covers the lattice and its Nyquist frequency."""
        grid = Grid(1, 64, 8.0)
        box = SamplingBox.for_grid(grid)
        assert box.x_extent == 8.0
        assert box.xi_extent == pytest.approx(4.0 * np.pi)

    def test_growth_weight_index(self):
        """Test that the subquadratic class weighs with M = 0."""
        assert GrowthClass('confining', 2.0).weight_index == 2.0
        assert GrowthClass('subquadratic', 2.0).weight_index == 0.0
        with pytest.raises(ValueError):
            GrowthClass('cubic')

    def test_norm_spec_label(self):
        """Test the column label of a monitored level."""
        assert NormSpec(a=2, M=0.5).label == 'a2_M0.5'
        with pytest.raises(ValueError):
            NormSpec(a=1, M=-1.0)

    def test_zero_damping(self):
        """Test that '0' and None give the zero symbol."""
        assert DampingSpec.from_string('0').is_zero
        assert DampingSpec.from_string(None).is_zero
        assert not DampingSpec.from_string('x**2').is_zero

    def test_potential_mass(self):
        """Test that the mass must be positive."""
        with pytest.raises(ValueError):
            PotentialSpec.from_strings('x**2', None, 0.0)

    def test_w12_joins_first_pair(self):
        """Test that the w12 tag only fits particles 0 and 1."""
        with pytest.raises(ValueError):
            Interaction.from_string(0, 2, 'x**2', 'w12')
        with pytest.raises(ValueError):
            Interaction.from_string(1, 0, 'x**2')

    def test_variable_names(self):
        """Test the coordinate names of a 2D grid."""
        assert variable_names(2) == {'t', 'x1', 'x2', 'xi1', 'xi2'}

    def test_evolve_config_stride(self):
        """Test that stride must be a positive integer."""
        with pytest.raises(ValueError):
            EvolveConfig(stride=0)


class TestReports:
    """Tests for report containers."""

    def test_assumption_report(self):
        """Test passed, failing and to_dict."""
        report = AssumptionReport('subquadratic', {'x': 4.0}, 41, clauses=[
            ClauseResult('a', 1.0, 0.0, True),
            ClauseResult('b', 2.0, 1.5, False, witness={'x': [3.0]}),
        ])
        assert not report.passed
        assert report.failing == ['b']
        payload = report.to_dict()
        assert payload['clauses'][1]['growth_exponent'] == 1.5
        with pytest.raises(KeyError):
            report.clause('c')

    def test_evolution_frame(self):
        """Test the series frame and norm drift."""
        report = EvolutionReport(times=np.array([0.0, 0.5, 1.0]), norms=np.array([1.0, 0.9, 0.8]),
                                 levels={'a1_M0': np.array([2.0, 1.8, 1.6])})
        frame = report.to_frame()
        assert list(frame.columns) == ['t', 'norm', 'a1_M0']
        assert report.norm_drift() == pytest.approx(0.2)

    def test_scan_frame(self):
        """Test that the fit mask becomes a column."""
        report = ScanReport('mu', np.array([1.0, 10.0]), np.array([0.5, 0.1]), fit_mask=np.array([True, False]))
        assert list(report.to_frame().columns) == ['mu', 'norm', 'in_fit']

    def test_plain_values(self):
        """Test JSON conversion of numpy, complex and non-finite values."""
        assert _plain({'a': np.float64(np.nan), 'b': 1 + 2j, 'c': np.int64(3), 'd': np.bool_(True)}) == {
            'a': None, 'b': {'re': 1.0, 'im': 2.0}, 'c': 3, 'd': True}
