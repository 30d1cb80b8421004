"""Exception types shared across the package.

Exit-code mapping used by the command line front end:
config problems -> 2, solver/convergence problems -> 3, integration -> 4.
"""


class CvscGridError(Exception):
    """Base class for all package errors."""


class InvalidBaseError(CvscGridError):
    """A per-unit base is zero, negative, or non-finite."""


class ValidationError(CvscGridError):
    """A data-model invariant is violated."""


class TopologyError(CvscGridError):
    """The network graph is disconnected or otherwise unusable."""


class ReferenceError_(CvscGridError):
    """An event refers to a bus or branch that does not exist."""


class ConvergenceError(CvscGridError):
    """An iterative solver failed to converge."""

    def __init__(self, message, mismatch=None):
        super().__init__(message)
        self.mismatch = mismatch


class ReductionError(CvscGridError):
    """Kron reduction hit a singular interior block."""


class SolveError(CvscGridError):
    """The algebraic network solve failed (singular admittance)."""


class TrimError(CvscGridError):
    """Equilibrium trim did not reach the required residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class IntegrationError(CvscGridError):
    """Time stepping failed even after step-size reduction."""


class LinearizationError(CvscGridError):
    """A finite-difference column produced a non-finite derivative."""


class EigenSolverError(CvscGridError):
    """Eigen decomposition failed or did not meet the residual contract."""


class ConfigError(CvscGridError):
    """Configuration text is malformed; message lists every problem found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))
