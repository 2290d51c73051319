"""Exception types shared across the toolkit.

The CLI maps ConfigError (and subclasses) to exit code 2 and
SolverError to exit code 3.
"""


class ConfigError(Exception):
    """Invalid user-facing configuration: bad parameter file, unknown marker,
    unsupported degree, malformed mesh input."""


class MeshParseError(ConfigError):
    """Malformed mesh file. Carries the offending 1-based line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ParamParseError(ConfigError):
    """Malformed parameter file. Carries the offending 1-based line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnsupportedDegreeError(ConfigError):
    """Polynomial or quadrature degree outside the tabulated family."""


class FormError(ValueError):
    """Structurally invalid weak form (wrong arity in trial/test functions)."""


class PatternError(ValueError):
    """Matrix entry outside a precomputed sparsity pattern, or a structurally
    required entry (e.g. a diagonal) missing from one."""


class SolverError(RuntimeError):
    """Iterative solver failed to reach the requested tolerance."""

    def __init__(self, message, iterations=None, relres=None):
        super().__init__(message)
        self.iterations = iterations
        self.relres = relres
