"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ArgumentError(ValueError):
    """An argument value is outside the operation's domain."""


class RankError(ValueError):
    """A matrix or stack of matrices has insufficient numerical rank."""


class ParseError(ValueError):
    """A serialized file is malformed or violates its schema."""


class TrainingError(RuntimeError):
    """Optimization produced a non-finite loss or otherwise failed."""


class CompatibilityError(ValueError):
    """Checkpoint and dataset disagree on dimensions or class count."""
