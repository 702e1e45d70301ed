"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class WindowError(DimensionError):
    """Convolution window is wider than the page."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ConsistencyError(ValueError):
    """Two parameter sets (or a set and its gradients) are keyed or shaped differently."""


class FeasibilityError(ValueError):
    """An action violates the slot/inventory constraints of a state."""


class EpisodeEnd(Exception):
    """No feasible action exists in the state; the episode cannot continue."""


class DataCorruptionError(ValueError):
    """A logged transition is internally inconsistent."""
