"""Error types shared across the package.

Every error carries enough context to be actionable (offending shapes,
names, values). The CLI maps each category to a stable exit code.
"""


class KGSemComError(Exception):
    """Base class for structured errors raised by this package."""

    exit_code = 1


class ShapeMismatchError(KGSemComError):
    """Operand shapes are incompatible for the requested operation."""

    exit_code = 4


class ValueRangeError(KGSemComError):
    """A value lies outside its documented domain."""

    exit_code = 5


class SignalError(KGSemComError):
    """Channel-side failure: all-zero normalization input, deep fade, etc."""

    exit_code = 5


class RateError(KGSemComError):
    """Requested bandwidth compression ratio cannot be realized."""

    exit_code = 5


class DataError(KGSemComError):
    """Malformed input file (triples, config, checkpoint)."""

    exit_code = 3


class ConfigError(KGSemComError):
    """Invalid or incomplete run configuration."""

    exit_code = 2


class MissingArtifactError(KGSemComError):
    """A required checkpoint/embedding/dataset file does not exist."""

    exit_code = 6


class DivergenceError(KGSemComError):
    """Training produced a non-finite loss."""

    exit_code = 7
