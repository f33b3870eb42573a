"""Exception hierarchy shared by the numerical modules and the CLI."""


class LabError(Exception):
    """Base error carrying a message, optional diagnostics and an exit code."""

    exit_code = 2

    def __init__(self, message, errors=None, exit_code=None):
        super().__init__(message)
        self.message = message
        self.errors = list(errors) if errors else []
        if exit_code is not None:
            self.exit_code = exit_code

    def to_dict(self):
        return {
            'error': type(self).__name__,
            'message': self.message,
            'errors': self.errors,
        }


class GridError(LabError):
    """Invalid grid parameters or mismatched grids."""


class StateFormatError(LabError):
    """Malformed serialized state."""


class ExpressionError(LabError):
    """Expression string that does not parse or references unbound names."""

    def __init__(self, message, expression=None, field=None, errors=None):
        super().__init__(message, errors=errors)
        self.expression = expression
        self.field = field


class ConfigError(LabError):
    """Run configuration failed validation."""


class GuardError(LabError):
    """A runtime guard tripped."""

    exit_code = 3


class BoundaryContaminationError(GuardError):
    """Too much mass near the edge of the periodic box."""

    def __init__(self, message, mass=None, time=None, step=None):
        super().__init__(message)
        self.mass = mass
        self.time = time
        self.step = step


class BlowupError(GuardError):
    """Norm grew by more than the blowup factor in a single step."""

    def __init__(self, message, step=None, time=None, factor=None):
        super().__init__(message)
        self.step = step
        self.time = time
        self.factor = factor


class SolverError(LabError):
    """Linear solver or eigen solver did not reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class FitError(LabError):
    """Infeasible constant fit or degenerate regression."""


class DegeneratePairingError(LabError):
    """Reference pairing too small to normalize against."""


class ParameterDomainError(LabError):
    """Parameter value outside the admissible interval."""
