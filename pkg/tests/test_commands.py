"""
Tests for the command-line surface.

Tests cover:
- validate (ok and diagnostics)
- solve (reports, series and verdict lines)
- assumptions with a failing clause, and the solve gate with --force
- the bundled commutator and two-particle configurations end to end
- quantize-check on the bundled configuration
- configuration, command and guard errors
"""
import json
from pathlib import Path

import pytest

CONFIGS = Path(__file__).parent.parent / 'configs'


def harmonic_tree(out, **overrides):
    tree = {
        'command': 'solve',
        'grid': {'D': 1, 'N': 64, 'L': 8},
        'problem': {'V': 'x**2/2', 'growth': {'kind': 'confining', 'M': 0}},
        'evolve': {'dt': 0.01, 'T': 0.1, 'stride': 5},
        'output': {'directory': str(out)},
    }
    tree.update(overrides)
    return tree


def exp_tree(out):
    return {
        'command': 'solve',
        'grid': {'D': 1, 'N': 64, 'L': 4.0},
        'problem': {'V': 'exp(x**2)', 'u0': {'kind': 'gaussian', 'width': 0.5}},
        'evolve': {'dt': 0.01, 'T': 0.05},
        'output': {'directory': str(out)},
    }


class TestValidate:
    """Tests for the validate command."""

    def test_valid_config(self, runner, write_config, tmp_path):
        """Test that a valid config prints ok and exits 0."""
        result = runner.invoke(args=['validate', '--config', str(write_config(harmonic_tree(tmp_path)))])
        assert result.exit_code == 0
        assert result.output.strip() == 'ok'

    def test_diagnostics(self, runner, write_config, tmp_path):
        """Test that every diagnostic is printed and the exit code is nonzero."""
        tree = harmonic_tree(tmp_path, grid={'D': 1, 'N': 63, 'L': 8, 'Q': 2})
        result = runner.invoke(args=['validate', '--config', str(write_config(tree))])
        assert result.exit_code == 1
        assert 'grid.Q: unknown field' in result.output
        assert 'grid:' in result.output

    def test_force_must_be_boolean(self, runner, write_config, tmp_path):
        """Test that evolve.force accepts only true or false."""
        tree = harmonic_tree(tmp_path, evolve={'dt': 0.01, 'T': 0.1, 'force': 'yes'})
        result = runner.invoke(args=['validate', '--config', str(write_config(tree))])
        assert result.exit_code == 1
        assert "evolve.force: expected true or false, got 'yes'" in result.output

    @pytest.mark.parametrize('name', sorted(p.name for p in CONFIGS.glob('*.json')))
    def test_bundled_configs_are_valid(self, runner, name):
        """Test that every shipped configuration validates."""
        result = runner.invoke(args=['validate', '--config', str(CONFIGS / name)])
        assert result.exit_code == 0, result.output


class TestRunCommands:
    """Tests for the run commands and their outputs."""

    def test_solve_writes_outputs(self, runner, write_config, tmp_path):
        """Test exit 0, verdict lines, report.json and series.csv."""
        out = tmp_path / 'solve'
        result = runner.invoke(args=['solve', '--config', str(write_config(harmonic_tree(out)))])
        assert result.exit_code == 0, result.output
        assert 'unitary: pass' in result.output
        report = json.loads((out / 'report.json').read_text())
        assert report['command'] == 'solve'
        assert report['passed'] is True
        assert report['seed'] == 7
        assert (out / 'series.csv').exists()

    def test_out_and_seed_override(self, runner, write_config, tmp_path):
        """Test that --out and --seed win over the config."""
        out = tmp_path / 'override'
        path = write_config(harmonic_tree(tmp_path / 'ignored'))
        result = runner.invoke(args=['solve', '--config', str(path), '--out', str(out), '--seed', '42'])
        assert result.exit_code == 0, result.output
        assert json.loads((out / 'report.json').read_text())['seed'] == 42

    def test_failing_assumptions_exit_one(self, runner, write_config, tmp_path):
        """Test that V = exp(x^2) fails with the gradient clause named."""
        out = tmp_path / 'exp'
        tree = {'command': 'assumptions', 'grid': {'D': 1, 'N': 64, 'L': 4.0},
                'problem': {'V': 'exp(x**2)'}, 'scan': {'samples': 101}, 'output': {'directory': str(out)}}
        result = runner.invoke(args=['assumptions', '--config', str(write_config(tree))])
        assert result.exit_code == 1
        assert 'assumptions: FAIL' in result.output
        report = json.loads((out / 'report.json').read_text())
        assert 'potential_gradient_linear' in report['results']['assumptions']['failing']

    def test_quantize_check(self, runner, tmp_path):
        """Test the bundled quantize-check configuration."""
        out = tmp_path / 'quantize'
        result = runner.invoke(args=['quantize-check', '--config', str(CONFIGS / 'quantize_check.json'),
                                     '--out', str(out)])
        assert result.exit_code == 0, result.output
        assert 'path_equivalence: pass' in result.output
        report = json.loads((out / 'report.json').read_text())
        assert report['constants']['max_relative_gap'] <= 1e-10


    def test_solve_refuses_failing_assumptions(self, runner, write_config, tmp_path):
        """Test that solve stops with a ConfigError when a growth clause fails."""
        out = tmp_path / 'gate'
        result = runner.invoke(args=['solve', '--config', str(write_config(exp_tree(out))), '--out', str(out)])
        assert result.exit_code == 2
        assert 'potential_gradient_linear' in result.output
        report = json.loads((out / 'report.json').read_text())
        assert report['errors'][0]['error'] == 'ConfigError'

    def test_force_overrides_the_gate(self, runner, write_config, tmp_path):
        """Test that --force runs anyway and records the override."""
        out = tmp_path / 'forced'
        path = write_config(exp_tree(out))
        result = runner.invoke(args=['solve', '--config', str(path), '--out', str(out), '--force'])
        assert result.exit_code in (0, 1), result.output
        report = json.loads((out / 'report.json').read_text())
        assert any('assumption check overridden' in note for note in report['notes'])
        assert not report['results']['assumptions']['passed']

    def test_force_in_config(self, runner, write_config, tmp_path):
        """Test that evolve.force = true has the same effect as --force."""
        out = tmp_path / 'forced_config'
        tree = exp_tree(out)
        tree['evolve']['force'] = True
        result = runner.invoke(args=['solve', '--config', str(write_config(tree))])
        assert result.exit_code in (0, 1), result.output
        report = json.loads((out / 'report.json').read_text())
        assert any('assumption check overridden' in note for note in report['notes'])

    def test_bundled_commutator_scan(self, runner, tmp_path):
        """Test that the bundled commutator norms stay bounded as epsilon shrinks."""
        out = tmp_path / 'commutator'
        result = runner.invoke(args=['commutator-scan', '--config', str(CONFIGS / 'commutator.json'),
                                     '--out', str(out)])
        assert result.exit_code in (0, 1), result.output
        report = json.loads((out / 'report.json').read_text())
        extras = report['results']['commutator']['extras']
        assert not extras['divergent_run']
        assert extras['bounded']
        assert report['constants']['band_ratio'] >= 1.0
        assert 'q_1' in report['results']

    def test_bundled_two_particle_run(self, runner, tmp_path):
        """Test that the bundled many-body run reports the parametrix decay."""
        out = tmp_path / 'two_particle'
        result = runner.invoke(args=['manybody', '--config', str(CONFIGS / 'two_particle.json'),
                                     '--out', str(out)])
        assert result.exit_code in (0, 1), result.output
        assert 'parametrix_decay:' in result.output
        report = json.loads((out / 'report.json').read_text())
        assert report['constants']['parametrix_slope'] < 0
        assert report['results']['parametrix']['extras']['particles'] == 2


class TestErrors:
    """Tests for exit codes of configuration and guard errors."""

    def test_invalid_config_exits_two(self, runner, write_config, tmp_path):
        """Test that odd N stops before running."""
        out = tmp_path / 'bad'
        tree = harmonic_tree(out, grid={'D': 1, 'N': 63, 'L': 8})
        result = runner.invoke(args=['solve', '--config', str(write_config(tree)), '--out', str(out)])
        assert result.exit_code == 2
        report = json.loads((out / 'report.json').read_text())
        assert report['errors'][0]['error'] == 'ConfigError'

    def test_command_mismatch(self, runner, write_config, tmp_path):
        """Test that a solve config cannot run as assumptions."""
        result = runner.invoke(args=['assumptions', '--config', str(write_config(harmonic_tree(tmp_path))),
                                     '--out', str(tmp_path / 'mismatch')])
        assert result.exit_code == 2

    def test_boundary_guard_exits_three(self, runner, write_config, tmp_path):
        """Test that an initial datum at the box edge trips the guard."""
        out = tmp_path / 'edge'
        problem = {'V': 'x**2/2', 'u0': {'kind': 'gaussian', 'center': 7.8, 'width': 0.5}}
        tree = harmonic_tree(out, problem=problem)
        result = runner.invoke(args=['solve', '--config', str(write_config(tree)), '--out', str(out)])
        assert result.exit_code == 3
        report = json.loads((out / 'report.json').read_text())
        assert report['errors'][0]['error'] == 'BoundaryContaminationError'
