"""Exception hierarchy. Everything derives from GatewireError (a ValueError)."""


class GatewireError(ValueError):
    """Base class for all errors raised by this package."""


class ShapeError(GatewireError):
    """Tensor rank or dimension mismatch."""


class SpecError(GatewireError):
    """Invalid network, layer, or dataset spec object."""


class ConfigError(GatewireError):
    """Invalid run configuration (bad keys, bad values, bad flag combinations)."""


class DataError(GatewireError):
    """Malformed dataset contents or inconsistent features/labels."""


class OptimizerError(GatewireError):
    """Optimizer misuse, e.g. stepping a parameter without a gradient."""


class SchedulerError(GatewireError):
    """Invalid input to the learning-rate scheduler."""


class ProbabilityError(GatewireError):
    """A row that should be a probability distribution is not one."""


class CheckpointError(GatewireError):
    """Corrupt or truncated checkpoint file."""
