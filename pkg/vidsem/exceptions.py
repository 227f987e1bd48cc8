"""
Exception classes for the vidsem package.

Every exception carries the process exit code the CLI maps it to.
"""


class VidsemError(Exception):
    """Base exception for vidsem errors."""
    exit_code = 1


class ConfigError(VidsemError):
    """Raised when a configuration key is unknown or an invariant is violated."""
    exit_code = 2


class ArgumentError(VidsemError, ValueError):
    """Raised when a call argument is out of its valid range."""
    pass


class ShapeError(VidsemError, ValueError):
    """Raised on shape, channel or frame-count mismatches."""
    pass


class FitError(VidsemError):
    """Raised when a statistical fit (PCA, normalization, probe) has degenerate input."""
    pass


class CacheInvalidError(VidsemError):
    """Raised when an on-disk cache has a bad header or a stale fingerprint."""
    exit_code = 3


class DependencyError(VidsemError):
    """Raised when a stage runs before the artifact it depends on exists."""
    exit_code = 3


class FingerprintMismatchError(DependencyError):
    """Raised when an upstream artifact's content hash no longer matches."""
    pass


class NumericalError(VidsemError):
    """Raised on non-finite losses or activations."""
    exit_code = 4
