"""Exception types shared across the package."""


class MimostreamError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MimostreamError):
    """A scenario configuration violates a structural or feasibility condition."""


class NumericalError(MimostreamError):
    """A solver failed to converge or produced an unusable result."""
