"""Quantitative global approximation of local Stokes solutions.

The package constructs global solutions of the Stokes resolvent system that
approximate a prescribed local solution on the unit ball, with explicit
truncation and growth control, and lifts the construction through a contour
quadrature to the time-dependent problem.
"""

__version__ = "0.1.0"

from .errors import (
    BesselOverflowError,
    ConfigError,
    GridMismatchError,
    NumericalFailureError,
    QuadratureRefinementError,
    TailIntegrationError,
)

__all__ = [
    "BesselOverflowError",
    "ConfigError",
    "GridMismatchError",
    "NumericalFailureError",
    "QuadratureRefinementError",
    "TailIntegrationError",
    "__version__",
]
