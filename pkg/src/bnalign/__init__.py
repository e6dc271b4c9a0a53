"""bnalign: a desk-scale lab for aligning batch-norm statistics under distribution shift.

The package bundles a small float64 CNN stack with replaceable normalization
statistics, procedural image data with controlled shifts, post-hoc statistic
alignment (plain, layer-masked, and augmentation-aware), closed-form one
dimensional failure-mode models with Monte Carlo companions, and a config
driven experiment runner that writes CSV/JSONL reports and figures.
"""

__version__ = "0.1.0"

from .errors import (
    BnalignError,
    ConfigError,
    DegenerateBatchError,
    IdxParseError,
    ShapeError,
    TrainingDivergedError,
    UsageError,
)

__all__ = [
    "__version__",
    "BnalignError",
    "ConfigError",
    "DegenerateBatchError",
    "IdxParseError",
    "ShapeError",
    "TrainingDivergedError",
    "UsageError",
]
