"""Heat-source reconstruction and A-optimal sensor placement.

Library layout:

- `mesh`: structured triangulations (unit square, half-transformer) with
  subdomain labels, tagged boundary edges and duplicated interface nodes.
- `fem`: closed-form linear-element assembly and banded SPD factorization.
- `stepping`: implicit-midpoint propagation, spectral reference oracle and
  transposed assembly of forward-map rows.
- `sensing`: boundary pixel and internal disk-sensor measurement rows plus
  their position derivatives.
- `bayes`: Gaussian prior/noise models, posterior mean/covariance, metrics.
- `reduction`: randomized low-rank boundary operator and reduced posterior.
- `design`: A-optimality target, gradient, sliding sensors, sparsification.
- `experiments`: the two seeded reference experiment suites and reports.
- `cli`: command-line entry point (`heatoed`).
"""

__version__ = "0.1.0"

from . import bayes, design, fem, mesh, reduction, sensing, sources, stepping
from .errors import (
    AssemblyError,
    DataError,
    DefinitenessError,
    DesignInfeasibleError,
    GeometryError,
    GuardError,
    HeatOEDError,
    LocationError,
)

__all__ = [
    "__version__",
    "bayes",
    "design",
    "fem",
    "mesh",
    "reduction",
    "sensing",
    "sources",
    "stepping",
    "HeatOEDError",
    "GeometryError",
    "LocationError",
    "AssemblyError",
    "DefinitenessError",
    "GuardError",
    "DesignInfeasibleError",
    "DataError",
]
