"""Asymmetric cross-scale fusion of infrared and visible images with UNets."""

from .errors import (
    ConfigError,
    ContractError,
    DependencyError,
    DimensionError,
    FileError,
    GeometryError,
    MMAError,
    NumericalError,
    ParseError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DependencyError",
    "DimensionError",
    "FileError",
    "GeometryError",
    "MMAError",
    "NumericalError",
    "ParseError",
    "__version__",
]
