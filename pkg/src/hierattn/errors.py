"""Exception types shared across the package."""


class HierAttnError(Exception):
    """Base class for all package errors."""


class ConfigError(HierAttnError, ValueError):
    """Invalid or inconsistent configuration."""


class BoundsError(HierAttnError, IndexError):
    """Index or coordinate outside its valid range."""


class SizeError(HierAttnError, ValueError):
    """Shape or size mismatch, or a size over a configured cap."""


class StateError(HierAttnError, RuntimeError):
    """Operation called in the wrong state (e.g. backward before forward)."""


class MaskError(HierAttnError, ValueError):
    """A query row has no allowed key."""
