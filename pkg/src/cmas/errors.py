"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array does not have the shape a contract requires."""


class ConfigurationError(ValueError):
    """Inconsistent or out-of-range configuration (bad flag, shape mismatch with a model, ...)."""


class ProjectionError(RuntimeError):
    """A 3D point cannot be projected (nonpositive camera-frame depth)."""


class NormalizationError(ValueError):
    """A 2D track cannot be normalized (degenerate torso, no observed root, ...)."""
