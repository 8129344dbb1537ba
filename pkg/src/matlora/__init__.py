"""Temporal domain generalization with shared-basis low-rank adapters.

Frozen backbone + low-rank adapters whose time variation lives in a small
core matrix, plus the rotating 2-moons benchmark, baselines, and a numerical
harness for the subspace-stability guarantees of warm-started gradient
descent. Desk scale: dense float64 matrices up to a few hundred rows.
"""

from matlora.errors import (
    ArgumentError,
    CompatibilityError,
    DimensionError,
    ParseError,
    RankError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "CompatibilityError",
    "DimensionError",
    "ParseError",
    "RankError",
    "TrainingError",
    "__version__",
]
