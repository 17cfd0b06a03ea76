"""Exception types raised by the library."""


class ClusterBAError(Exception):
    """Base class for all library errors."""


class NearPiError(ClusterBAError, ValueError):
    """Rotation angle too close to pi for a well-defined logarithm."""


class EmptyClusterError(ClusterBAError, ValueError):
    """Operation needs at least one point in the cluster."""


class DegenerateFeatureError(ClusterBAError, ValueError):
    """A feature has too few points to define its cost."""

    def __init__(self, message, feature_index=None):
        if feature_index is not None:
            message = f"feature {feature_index}: {message}"
        super().__init__(message)
        self.feature_index = feature_index


class NumericalFailure(ClusterBAError, ArithmeticError):
    """Non-finite cost or derivatives during optimization."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration


class UnobservableProblem(ClusterBAError, ValueError):
    """The gauge-reduced Hessian is singular."""


class NoConstraintsError(ClusterBAError, ValueError):
    """Association produced no usable features."""


class FormatError(ClusterBAError, ValueError):
    """Malformed input file; carries path and line number."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class SolverStalled(ClusterBAError, RuntimeError):
    """Damping escalated without finding an acceptable step."""

    def __init__(self, message, poses=None, report=None):
        super().__init__(message)
        self.poses = poses
        self.report = report
