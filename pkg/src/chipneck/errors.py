"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor or graph shapes do not line up."""


class ConfigError(ValueError):
    """Invalid layer, partition or experiment configuration."""


class UsageError(RuntimeError):
    """API called out of order (e.g. backward before any forward)."""


class FormatError(ValueError):
    """A data file does not match its binary layout."""


class ExecutionError(RuntimeError):
    """A node failed while executing a graph."""

    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, message, step=None, ratio=None):
        super().__init__(message)
        self.step = step
        self.ratio = ratio
