"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class GraphError(RuntimeError):
    """Invalid use of the autodiff graph, e.g. backward on a detached node."""


class NumericalError(ArithmeticError):
    """A computation produced NaN/inf where finite values are required."""


class MissingArtifactError(FileNotFoundError):
    """A required dataset, checkpoint, or config artifact is absent."""


class UsageError(ValueError):
    """Bad command-line arguments or configuration values."""
