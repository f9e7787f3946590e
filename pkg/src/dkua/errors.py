"""Exception hierarchy shared across the package."""


class DkuaError(Exception):
    """Base class for all package errors."""


class ShapeError(DkuaError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class DegenerateInputError(DkuaError, ValueError):
    """Input is numerically degenerate (e.g. a near-zero row norm)."""


class DegenerateBatchError(DkuaError, ValueError):
    """Batch admits no valid triplet anchor."""


class InsufficientSamplesError(DkuaError, ValueError):
    """Fewer samples than a statistic requires (covariance needs >= 2 rows)."""


class SimplexError(DkuaError, ValueError):
    """Vector expected on the probability simplex is not."""


class NumericalError(DkuaError, ArithmeticError):
    """A numerical failure: non-finite value, failed factorization, diverged loss."""


class UsageError(DkuaError, RuntimeError):
    """API misuse (e.g. backward from a non-scalar node)."""


class ProtocolError(DkuaError, RuntimeError):
    """Lifelong-training protocol violated (e.g. growing mid-domain)."""


class ConfigError(DkuaError, ValueError):
    """Invalid or unknown configuration."""


class IntegrityError(DkuaError, RuntimeError):
    """Checkpoint manifest and payload disagree."""


class ParseError(DkuaError, ValueError):
    """Malformed on-disk index or image file."""
