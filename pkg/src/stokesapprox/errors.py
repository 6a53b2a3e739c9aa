"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or incomplete run configuration (maps to CLI exit code 2)."""


class GridMismatchError(ValueError):
    """Two sampled fields do not live on the same quadrature grid."""


class BesselOverflowError(OverflowError):
    """Unscaled Bessel evaluation would overflow.

    Carries the exponential scale so callers can switch to the scaled
    (mantissa, scale) representation instead of silently saturating.
    """

    def __init__(self, scale, cap):
        self.scale = float(scale)
        self.cap = float(cap)
        super().__init__(
            f"exponential scale {self.scale:.1f} exceeds the configured cap "
            f"{self.cap:.1f}; use the scaled evaluation instead"
        )


class QuadratureRefinementError(RuntimeError):
    """An adaptive quadrature failed to converge within its refinement cap."""


class TailIntegrationError(RuntimeError):
    """A semi-infinite radial integral did not decay within its node budget."""


class NumericalFailureError(RuntimeError):
    """Numerical failure in a pipeline step (maps to CLI exit code 3)."""

    def __init__(self, module, message):
        self.module = module
        super().__init__(f"[{module}] {message}")
