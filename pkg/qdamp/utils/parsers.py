import ast
import json
import logging
import math
from pathlib import Path

import numpy as np

from qdamp.errors import ConfigError, ExpressionError, GridError
from qdamp.models import COMMANDS, Grid, RunConfig, variable_names

logger = logging.getLogger(__name__)

GENERAL = 'general'


def bracket(*args):
    """Japanese bracket <v> = sqrt(1 + sum v_j^2)."""
    return np.sqrt(1.0 + sum(np.square(a) for a in args))


FUNCTIONS = {
    'sin': np.sin,
    'cos': np.cos,
    'exp': np.exp,
    'sqrt': np.sqrt,
    'pow': np.power,
    'w': bracket,
}

_BINARY_OPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.BitXor)
_UNARY_OPS = (ast.UAdd, ast.USub)


class _Normalize(ast.NodeTransformer):
    """Rewrite '^' as power and integer literals as floats."""

    def visit_BinOp(self, node):
        self.generic_visit(node)
        if isinstance(node.op, ast.BitXor):
            node.op = ast.Pow()
        return node

    def visit_Constant(self, node):
        if isinstance(node.value, int) and not isinstance(node.value, bool):
            return ast.copy_location(ast.Constant(float(node.value)), node)
        return node


class Expression:
    """
    A compiled closed-form expression from the run configuration.
    Evaluates vectorized on numpy arrays; knows the names it references
    and its polynomial degree in any set of frequency variables.
    """

    def __init__(self, source, tree, field=None):
        self.source = source
        self.field = field
        self._tree = tree
        self._code = compile(tree, filename=f'<{field or "expression"}>', mode='eval')
        callees = {id(node.func) for node in ast.walk(tree) if isinstance(node, ast.Call)}
        self.names = frozenset(
            node.id for node in ast.walk(tree)
            if isinstance(node, ast.Name) and id(node) not in callees
        )

    def __repr__(self):
        return f'Expression({self.source!r})'

    def evaluate(self, env):
        namespace = dict(FUNCTIONS)
        namespace.update(env)
        try:
            return eval(self._code, {'__builtins__': {}}, namespace)
        except NameError as e:
            raise ExpressionError(f'unbound name in {self.source!r}: {e}',
                                  expression=self.source, field=self.field)
        except (ArithmeticError, ValueError, TypeError) as e:
            raise ExpressionError(f'cannot evaluate {self.source!r}: {e}',
                                  expression=self.source, field=self.field)

    def depends_on(self, *names):
        return any(n in self.names for n in names)

    def degree_in(self, names):
        """Static polynomial degree in `names`: 0, 1, 2, ... or 'general'."""
        degree = _degree(self._tree.body, frozenset(names))
        return GENERAL if math.isinf(degree) else int(degree)


def _degree(node, names):
    if isinstance(node, ast.Constant):
        return 0
    if isinstance(node, ast.Name):
        return 1 if node.id in names else 0
    if isinstance(node, ast.UnaryOp):
        return _degree(node.operand, names)
    if isinstance(node, ast.BinOp):
        left = _degree(node.left, names)
        right = _degree(node.right, names)
        if isinstance(node.op, (ast.Add, ast.Sub)):
            return max(left, right)
        if isinstance(node.op, ast.Mult):
            return left + right
        if isinstance(node.op, ast.Div):
            return left if right == 0 else math.inf
        if isinstance(node.op, ast.Pow):
            return _power_degree(left, right, node.right)
    if isinstance(node, ast.Call):
        args = [_degree(a, names) for a in node.args]
        if node.func.id == 'pow' and len(node.args) == 2:
            return _power_degree(args[0], args[1], node.args[1])
        return 0 if all(a == 0 for a in args) else math.inf
    return math.inf


def _power_degree(base, exponent, exponent_node):
    if base == 0 and exponent == 0:
        return 0
    if exponent == 0 and isinstance(exponent_node, ast.Constant):
        value = exponent_node.value
        if float(value).is_integer() and value >= 0:
            return base * int(value)
    return math.inf


def _check_nodes(tree, source, field):
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.Load)) or isinstance(node, _BINARY_OPS + _UNARY_OPS):
            continue
        if isinstance(node, ast.BinOp):
            if not isinstance(node.op, _BINARY_OPS):
                raise ExpressionError(f'operator {type(node.op).__name__} not allowed in {source!r}',
                                      expression=source, field=field)
            continue
        if isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, _UNARY_OPS):
                raise ExpressionError(f'operator {type(node.op).__name__} not allowed in {source!r}',
                                      expression=source, field=field)
            continue
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ExpressionError(f'literal {node.value!r} not allowed in {source!r}',
                                      expression=source, field=field)
            continue
        if isinstance(node, ast.Name):
            continue
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
                name = getattr(node.func, 'id', ast.unparse(node.func))
                raise ExpressionError(f'unknown function {name!r} in {source!r}',
                                      expression=source, field=field)
            if node.keywords:
                raise ExpressionError(f'keyword arguments not allowed in {source!r}',
                                      expression=source, field=field)
            if node.func.id == 'pow' and len(node.args) != 2:
                raise ExpressionError(f'pow takes two arguments in {source!r}',
                                      expression=source, field=field)
            if node.func.id in ('sin', 'cos', 'exp', 'sqrt') and len(node.args) != 1:
                raise ExpressionError(f'{node.func.id} takes one argument in {source!r}',
                                      expression=source, field=field)
            if node.func.id == 'w' and not node.args:
                raise ExpressionError(f'w needs at least one argument in {source!r}',
                                      expression=source, field=field)
            continue
        raise ExpressionError(f'syntax {type(node).__name__} not allowed in {source!r}',
                              expression=source, field=field)


def parse_expression(source, allowed=None, field=None):
    """
    Parse an expression string over t, x1..xD, xi1..xiD and named parameters.
    Raises ExpressionError naming the field for syntax errors, disallowed
    constructs and names outside `allowed`.
    """
    if isinstance(source, (int, float)) and not isinstance(source, bool):
        source = repr(float(source))
    if not isinstance(source, str) or not source.strip():
        raise ExpressionError(f'{field or "expression"}: expected a non-empty expression string',
                              expression=source, field=field)
    try:
        tree = ast.parse(source.strip(), mode='eval')
    except SyntaxError as e:
        raise ExpressionError(f'{field or "expression"}: syntax error at column {e.offset}: {e.msg}',
                              expression=source, field=field)

    _check_nodes(tree, source, field)
    tree = ast.fix_missing_locations(_Normalize().visit(tree))
    expression = Expression(source, tree, field=field)

    for name in expression.names:
        if name in FUNCTIONS:
            raise ExpressionError(f'{field or "expression"}: function {name!r} used as a variable',
                                  expression=source, field=field)
    if allowed is not None:
        unbound = sorted(expression.names - set(allowed))
        if unbound:
            raise ExpressionError(
                f'{field or "expression"}: unbound name(s) {", ".join(unbound)}',
                expression=source, field=field,
                errors=[f'{field}: unbound name {n!r}' for n in unbound])
    return expression


# ==================== RUN CONFIG ====================

TOP_KEYS = {'command', 'description', 'grid', 'problem', 'particles', 'interactions',
            'evolve', 'scan', 'output', 'seed'}
GRID_KEYS = {'D', 'N', 'L'}
PROBLEM_KEYS = {'V', 'A', 'k', 'mass', 'growth', 'params', 'dparams', 'u0', 'chi'}
GROWTH_KEYS = {'kind', 'M', 'delta'}
U0_KEYS = {'kind', 'center', 'width', 'momentum', 'amplitude', 'phase'}
U0_KINDS = {'gaussian', 'ground_state', 'expression'}
DPARAM_KEYS = {'V', 'A', 'k'}
EVOLVE_KEYS = {'scheme', 'dt', 'T', 'monitor', 'stride', 'adjoint', 'snapshots', 'force'}
SCAN_KEYS = {'mus', 'epsilons', 'taus', 'rho', 'rho_interval', 'parameter', 'a_values',
             'samples', 'box', 'mu', 'epsilon', 'iters', 'vectors', 'ensemble'}
BOX_KEYS = {'x', 'xi', 'times'}
OUTPUT_KEYS = {'directory', 'formats'}
PARTICLE_KEYS = {'V', 'A', 'k', 'mass', 'growth', 'u0'}
INTERACTION_KEYS = {'pair', 'W', 'tag', 'delta'}
INTERACTION_TAGS = {'coupled', 'generic'}


def _unknown(block, allowed, path, diagnostics):
    for key in sorted(set(block) - allowed):
        diagnostics.append(f'{path}.{key}: unknown field' if path else f'{key}: unknown field')


def _expect_dict(tree, key, path, diagnostics, required=False):
    value = tree.get(key)
    if value is None:
        if required:
            diagnostics.append(f'{path}: missing required block')
        return {}
    if not isinstance(value, dict):
        diagnostics.append(f'{path}: expected an object')
        return {}
    return value


def _positive(value, path, diagnostics, allow_zero=False):
    try:
        number = float(value)
    except (TypeError, ValueError):
        diagnostics.append(f'{path}: expected a number, got {value!r}')
        return None
    if number < 0 or (number == 0 and not allow_zero):
        diagnostics.append(f'{path}: must be positive, got {value!r}')
        return None
    return number


def _number_list(value, path, diagnostics, positive=True):
    if not isinstance(value, list) or not value:
        diagnostics.append(f'{path}: expected a non-empty list of numbers')
        return []
    out = []
    for i, item in enumerate(value):
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            diagnostics.append(f'{path}[{i}]: expected a number, got {item!r}')
        elif positive and item <= 0:
            diagnostics.append(f'{path}[{i}]: must be positive, got {item!r}')
        else:
            out.append(float(item))
    return out


def _check_expression(source, names, path, diagnostics):
    try:
        return parse_expression(source, allowed=names, field=path)
    except ExpressionError as e:
        diagnostics.extend(e.errors or [e.message])
        return None


def _check_growth(block, path, diagnostics):
    if not isinstance(block, dict):
        diagnostics.append(f'{path}: expected an object')
        return
    _unknown(block, GROWTH_KEYS, path, diagnostics)
    kind = block.get('kind', 'subquadratic')
    if kind not in ('subquadratic', 'confining'):
        diagnostics.append(f'{path}.kind: must be subquadratic or confining, got {kind!r}')
    if 'M' in block:
        _positive(block['M'], f'{path}.M', diagnostics, allow_zero=True)
    if 'delta' in block:
        _positive(block['delta'], f'{path}.delta', diagnostics)


def _check_u0(block, names, path, diagnostics):
    if not isinstance(block, dict):
        diagnostics.append(f'{path}: expected an object')
        return
    _unknown(block, U0_KEYS, path, diagnostics)
    kind = block.get('kind', 'gaussian')
    if kind not in U0_KINDS:
        diagnostics.append(f'{path}.kind: must be one of {sorted(U0_KINDS)}, got {kind!r}')
    if 'width' in block:
        _positive(block['width'], f'{path}.width', diagnostics)
    if kind == 'expression':
        if 'amplitude' not in block:
            diagnostics.append(f'{path}.amplitude: required for kind "expression"')
        else:
            _check_expression(block['amplitude'], names, f'{path}.amplitude', diagnostics)
        if 'phase' in block:
            _check_expression(block['phase'], names, f'{path}.phase', diagnostics)


def _check_symbols(block, dim, params, path, diagnostics, require_v=True):
    names = variable_names(dim) | set(params)
    if 'V' in block:
        _check_expression(block['V'], names, f'{path}.V', diagnostics)
    elif require_v:
        diagnostics.append(f'{path}.V: missing required expression')
    A = block.get('A') or []
    if not isinstance(A, list):
        diagnostics.append(f'{path}.A: expected a list of expressions')
    else:
        if A and len(A) != dim:
            diagnostics.append(f'{path}.A: expected {dim} components, got {len(A)}')
        for j, a in enumerate(A):
            _check_expression(a, names, f'{path}.A[{j}]', diagnostics)
    if block.get('k') not in (None, 0, '0', ''):
        _check_expression(block['k'], names, f'{path}.k', diagnostics)
    if 'mass' in block:
        _positive(block['mass'], f'{path}.mass', diagnostics)
    if 'growth' in block:
        _check_growth(block['growth'], f'{path}.growth', diagnostics)


def validate_run_config(tree):
    """
    Validate a run-config tree without executing anything.
    Returns the list of diagnostics, each prefixed with its dotted field path.
    """
    diagnostics = []
    if not isinstance(tree, dict):
        return ['config: top level must be an object']

    _unknown(tree, TOP_KEYS, '', diagnostics)

    command = tree.get('command')
    if command not in COMMANDS:
        diagnostics.append(f'command: must be one of {list(COMMANDS)}, got {command!r}')

    grid_block = _expect_dict(tree, 'grid', 'grid', diagnostics, required=True)
    _unknown(grid_block, GRID_KEYS, 'grid', diagnostics)
    dim = grid_block.get('D', 1)
    try:
        Grid(int(dim), int(grid_block.get('N', 0)), float(grid_block.get('L', 0)))
    except GridError as e:
        diagnostics.append(f'grid: {e.message}')
    except (TypeError, ValueError):
        diagnostics.append('grid: D, N and L must be numbers')
    if not isinstance(dim, int) or dim < 1:
        dim = 1

    problem = _expect_dict(tree, 'problem', 'problem', diagnostics)
    _unknown(problem, PROBLEM_KEYS, 'problem', diagnostics)
    params = problem.get('params') or {}
    if not isinstance(params, dict):
        diagnostics.append('problem.params: expected an object of named numbers')
        params = {}
    for name, value in params.items():
        if not name.isidentifier() or name in variable_names(dim) or name in FUNCTIONS:
            diagnostics.append(f'problem.params.{name}: reserved or invalid parameter name')
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            diagnostics.append(f'problem.params.{name}: expected a number, got {value!r}')

    particles = tree.get('particles') or []
    if command == 'manybody':
        if not isinstance(particles, list) or len(particles) < 2:
            diagnostics.append('particles: manybody needs a list of at least two particles')
            particles = []
        elif len(particles) != dim:
            diagnostics.append(f'grid.D: must equal the particle count {len(particles)}')
        for i, particle in enumerate(particles):
            path = f'particles[{i}]'
            if not isinstance(particle, dict):
                diagnostics.append(f'{path}: expected an object')
                continue
            _unknown(particle, PARTICLE_KEYS, path, diagnostics)
            _check_symbols(particle, 1, params, path, diagnostics, require_v=False)
            if 'u0' in particle:
                _check_u0(particle['u0'], variable_names(1) | set(params), f'{path}.u0', diagnostics)
        interactions = tree.get('interactions') or []
        if not isinstance(interactions, list):
            diagnostics.append('interactions: expected a list')
            interactions = []
        for i, item in enumerate(interactions):
            path = f'interactions[{i}]'
            if not isinstance(item, dict):
                diagnostics.append(f'{path}: expected an object')
                continue
            _unknown(item, INTERACTION_KEYS, path, diagnostics)
            pair = item.get('pair')
            if (not isinstance(pair, list) or len(pair) != 2 or pair[0] == pair[1]
                    or not all(isinstance(p, int) and 0 <= p < len(particles) for p in pair)):
                diagnostics.append(f'{path}.pair: expected two distinct particle indices')
            if item.get('tag', 'generic') not in INTERACTION_TAGS:
                diagnostics.append(f'{path}.tag: must be one of {sorted(INTERACTION_TAGS)}')
            if 'W' not in item:
                diagnostics.append(f'{path}.W: missing required expression')
            else:
                _check_expression(item['W'], variable_names(1) | set(params), f'{path}.W', diagnostics)
    elif command in COMMANDS:
        _check_symbols(problem, dim, params, 'problem', diagnostics)

    names = variable_names(dim) | set(params)
    if 'u0' in problem:
        _check_u0(problem['u0'], names, 'problem.u0', diagnostics)

    dparams = problem.get('dparams')
    if dparams is not None:
        if not isinstance(dparams, dict):
            diagnostics.append('problem.dparams: expected an object')
        else:
            _unknown(dparams, DPARAM_KEYS, 'problem.dparams', diagnostics)
            for key in ('V', 'k'):
                if dparams.get(key) is not None:
                    _check_expression(dparams[key], names, f'problem.dparams.{key}', diagnostics)
            for j, a in enumerate(dparams.get('A') or []):
                _check_expression(a, names, f'problem.dparams.A[{j}]', diagnostics)

    evolve = _expect_dict(tree, 'evolve', 'evolve', diagnostics,
                          required=command in ('solve', 'sensitivity', 'manybody'))
    _unknown(evolve, EVOLVE_KEYS, 'evolve', diagnostics)
    if evolve:
        dt = _positive(evolve.get('dt', 1e-3), 'evolve.dt', diagnostics)
        T = _positive(evolve.get('T', 1.0), 'evolve.T', diagnostics)
        if dt is not None and T is not None and dt > T:
            diagnostics.append(f'evolve.dt: must not exceed evolve.T ({dt} > {T})')
        if evolve.get('scheme', 'crank_nicolson') not in ('crank_nicolson', 'rk4'):
            diagnostics.append(f'evolve.scheme: must be crank_nicolson or rk4, got {evolve.get("scheme")!r}')
        stride = evolve.get('stride', 1)
        if not isinstance(stride, int) or stride < 1:
            diagnostics.append(f'evolve.stride: must be a positive integer, got {stride!r}')
        if not isinstance(evolve.get('force', False), bool):
            diagnostics.append(f'evolve.force: expected true or false, got {evolve.get("force")!r}')
        for i, level in enumerate(evolve.get('monitor') or []):
            if (not isinstance(level, list) or len(level) != 2
                    or not isinstance(level[0], int) or not 0 <= level[0] <= 3):
                diagnostics.append(f'evolve.monitor[{i}]: expected [a, M] with integer 0 <= a <= 3')

    scan = _expect_dict(tree, 'scan', 'scan', diagnostics)
    _unknown(scan, SCAN_KEYS, 'scan', diagnostics)
    for key in ('mus', 'epsilons', 'taus'):
        if key in scan:
            _number_list(scan[key], f'scan.{key}', diagnostics)
    if 'epsilons' in scan and any(e > 1 for e in _number_list(scan['epsilons'], 'scan.epsilons', [])):
        diagnostics.append('scan.epsilons: values must lie in (0, 1]')
    if command == 'parametrix-scan' and 'mus' not in scan:
        diagnostics.append('scan.mus: required for parametrix-scan')
    if command == 'commutator-scan' and 'epsilons' not in scan:
        diagnostics.append('scan.epsilons: required for commutator-scan')
    if command == 'sensitivity':
        if 'taus' not in scan:
            diagnostics.append('scan.taus: required for sensitivity')
        parameter = scan.get('parameter', 'rho')
        if parameter not in params:
            diagnostics.append(f'scan.parameter: {parameter!r} is not bound in problem.params')
    if 'rho_interval' in scan:
        interval = scan['rho_interval']
        if (not isinstance(interval, list) or len(interval) != 2
                or not all(isinstance(v, (int, float)) for v in interval) or interval[0] >= interval[1]):
            diagnostics.append('scan.rho_interval: expected [low, high] with low < high')
    if 'box' in scan:
        box = scan['box']
        if not isinstance(box, dict):
            diagnostics.append('scan.box: expected an object')
        else:
            _unknown(box, BOX_KEYS, 'scan.box', diagnostics)
            for key in ('x', 'xi'):
                if key in box:
                    _positive(box[key], f'scan.box.{key}', diagnostics)
    if 'samples' in scan:
        samples = scan['samples']
        if not isinstance(samples, int) or samples < 5:
            diagnostics.append(f'scan.samples: expected an integer >= 5, got {samples!r}')

    output = _expect_dict(tree, 'output', 'output', diagnostics)
    _unknown(output, OUTPUT_KEYS, 'output', diagnostics)
    formats = output.get('formats', ['json', 'csv'])
    if not isinstance(formats, list) or set(formats) - {'json', 'csv'}:
        diagnostics.append(f'output.formats: expected a subset of ["json", "csv"], got {formats!r}')

    seed = tree.get('seed')
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int) or seed < 0):
        diagnostics.append(f'seed: expected a nonnegative integer, got {seed!r}')

    return diagnostics


def read_config_tree(path):
    """Read the JSON tree; syntax errors carry line and column."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f'cannot read config {path}: {e.strerror}')
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f'{path.name}: line {e.lineno}, column {e.colno}: {e.msg}',
                          errors=[f'line {e.lineno}, column {e.colno}: {e.msg}'])


def load_run_config(path, seed=None):
    """
    Read and validate a run configuration.
    Returns a RunConfig; raises ConfigError carrying every diagnostic.
    """
    tree = read_config_tree(path)
    diagnostics = validate_run_config(tree)
    if diagnostics:
        logger.warning('config %s has %d problem(s)', path, len(diagnostics))
        raise ConfigError(f'invalid config {Path(path).name}: {diagnostics[0]}', errors=diagnostics)

    grid_block = tree['grid']
    grid = Grid(int(grid_block.get('D', 1)), int(grid_block['N']), float(grid_block['L']))
    return RunConfig(
        command=tree['command'],
        grid=grid,
        problem=tree.get('problem') or {},
        particles=tree.get('particles') or [],
        interactions=tree.get('interactions') or [],
        evolve=tree.get('evolve') or {},
        scan=tree.get('scan') or {},
        output=tree.get('output') or {},
        seed=seed if seed is not None else tree.get('seed'),
        source=str(path),
        raw=tree,
    )
