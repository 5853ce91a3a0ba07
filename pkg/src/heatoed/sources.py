"""True-source generators for the two reference experiments."""

from __future__ import annotations

import numpy as np

from .errors import GeometryError
from .mesh import LABEL_COIL, Mesh


def generate_random_source(mesh: Mesh, seed, n_modes: int | None = None) -> np.ndarray:
    """Multi-modal Gaussian bump field on the unit square, seeded.

    The mode count is uniform on {1..11} unless forced, widths a_i, b_i are
    uniform on [0, 100] and centers uniform over the domain; the field is the
    sum of exp(-a (x - cx)^2 - b (y - cy)^2) evaluated at the nodes.
    """
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 12)) if n_modes is None else int(n_modes)
    a = rng.uniform(0.0, 100.0, m)
    b = rng.uniform(0.0, 100.0, m)
    (x0, x1), (y0, y1) = mesh.extents if mesh.extents else ((0.0, 1.0), (0.0, 1.0))
    cx = rng.uniform(x0, x1, m)
    cy = rng.uniform(y0, y1, m)
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    field = np.zeros(mesh.n_nodes)
    for i in range(m):
        field += np.exp(-a[i] * (x - cx[i]) ** 2 - b[i] * (y - cy[i]) ** 2)
    return field


def dist_to_rect(points: np.ndarray, rect) -> np.ndarray:
    """Exact Euclidean distance from points to a closed axis-aligned rectangle."""
    x0, x1, y0, y1 = rect
    p = np.atleast_2d(points)
    dx = np.maximum(np.maximum(x0 - p[:, 0], p[:, 0] - x1), 0.0)
    dy = np.maximum(np.maximum(y0 - p[:, 1], p[:, 1] - y1), 0.0)
    return np.hypot(dx, dy)


def true_source_transformer(
    mesh: Mesh,
    coil_value: float = 2.557e5,
    core_scale: float = 1.0e5,
    decay: float = 150.0,
) -> np.ndarray:
    """Reference heat source: constant ohmic loss in the coil, exponentially
    decaying iron loss in the core measured from the coil rectangle."""
    if mesh.coil_rect is None:
        raise GeometryError("transformer source needs a mesh with a coil rectangle")
    field = np.empty(mesh.n_nodes)
    coil_nodes = mesh.node_labels == LABEL_COIL
    field[coil_nodes] = coil_value
    core = ~coil_nodes
    d = dist_to_rect(mesh.nodes[core], mesh.coil_rect)
    field[core] = core_scale * np.exp(-decay * d)
    return field
