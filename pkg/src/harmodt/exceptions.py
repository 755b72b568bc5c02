"""Exception types shared across the package."""


class HarmoError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HarmoError, ValueError):
    """Inconsistent shapes, lengths or hyper-parameters."""


class DomainError(HarmoError, ValueError):
    """A mathematical operation was evaluated outside its domain."""


class StateError(HarmoError, RuntimeError):
    """An object was used in the wrong lifecycle state."""


class DataError(HarmoError, ValueError):
    """Malformed, truncated or inconsistent data."""


class RunError(HarmoError, RuntimeError):
    """A training or rollout run produced an unusable result."""
