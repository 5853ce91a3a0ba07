"""Exception types shared across the package."""


class HeatOEDError(Exception):
    """Base class for all package-specific errors."""


class GeometryError(HeatOEDError):
    """Invalid or inconsistent domain geometry."""


class LocationError(HeatOEDError):
    """A point could not be located inside the mesh."""


class AssemblyError(HeatOEDError):
    """Finite element assembly failed (degenerate element, bad coefficient)."""


class DefinitenessError(HeatOEDError):
    """A matrix expected to be positive definite is not."""


class GuardError(HeatOEDError):
    """A dense/reference code path was requested beyond its size guard."""


class DesignInfeasibleError(HeatOEDError):
    """A sensor design places stencil points outside the admissible region."""


class DataError(HeatOEDError):
    """Measurement data is missing, inconsistent, or degenerate."""
