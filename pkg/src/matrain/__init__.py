"""Modular NTK analysis and modular adaptive training for small networks."""

from matrain.errors import (
    AlignmentError,
    CompatibilityError,
    ConfigError,
    ConvergenceError,
    LockError,
    MatrainError,
    NumericError,
    OrderingError,
    ProtectionError,
    ShapeError,
    SpectrumError,
    StateError,
    UnknownModuleError,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "CompatibilityError",
    "ConfigError",
    "ConvergenceError",
    "LockError",
    "MatrainError",
    "NumericError",
    "OrderingError",
    "ProtectionError",
    "ShapeError",
    "SpectrumError",
    "StateError",
    "UnknownModuleError",
]
