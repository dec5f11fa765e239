"""Exception hierarchy.  Every class carries a short machine-readable ``code``."""


class EdrError(Exception):
    code = "error"


class DataError(EdrError, ValueError):
    code = "data-error"


class NoVariationError(EdrError, ValueError):
    code = "no-variation"


class SeparationError(EdrError, RuntimeError):
    code = "separation-detected"


class RankDeficientError(EdrError, RuntimeError):
    code = "rank-deficient"

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class NonConvergenceError(EdrError, RuntimeError):
    code = "non-convergence"

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class InfeasibleError(EdrError, RuntimeError):
    """The EL inner problem has no interior solution (0 outside the convex hull)."""

    code = "el-infeasible"


class SingularMatrixError(EdrError, RuntimeError):
    code = "singular-matrix"


class ConfigError(EdrError, ValueError):
    """Invalid run configuration; ``line`` and ``field`` locate the problem when known."""

    code = "config-error"

    def __init__(self, message, line=None, field=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.field = field


class BootstrapError(EdrError, RuntimeError):
    code = "bootstrap-failure"


class DesignMismatchError(ConfigError):
    code = "design-mismatch"
