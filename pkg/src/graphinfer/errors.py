"""Exception hierarchy shared across the package."""


class GraphInferError(Exception):
    """Base class for all library errors."""


class ConfigError(GraphInferError):
    """Invalid configuration value or combination."""


class ShapeError(GraphInferError):
    """Operands with incompatible shapes passed to a numeric primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class GraphError(GraphInferError):
    """Structurally invalid graph or sparse matrix."""


class DatasetError(GraphInferError):
    """Unreadable, inconsistent, or corrupt dataset files."""


class TrainingError(GraphInferError):
    """Optimization failure (divergence, non-finite loss)."""


class NondeterminismError(GraphInferError):
    """A closure expected to be deterministic returned differing values."""
