"""Spatial measurement rows for boundary pixels and movable internal sensors.

A boundary pixel averages the piecewise-linear temperature trace over one of
`count` equal-arclength segments of the measured boundary.  An internal
sensor averages the field over a disk, approximated by a Q-point stencil
(center plus Q-1 points on the circle); the stencil keeps the rows cheap to
differentiate with respect to the sensor position, since moving the sensor
moves every stencil point rigidly and the barycentric interpolation weights
are affine within each triangle.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .errors import DesignInfeasibleError, GeometryError, LocationError
from .fem import _tri_geometry
from .mesh import Mesh


@dataclass(frozen=True)
class AdmissibleRegion:
    """Feasible box for sensor centers: `outer` minus an optional open `hole`.

    Both rectangles are stored as (x0, x1, y0, y1) and already include the
    margin, so containment tests and projections act on centers directly.
    `label`, when set, is the subdomain every stencil point must land in.
    """

    outer: tuple[float, float, float, float]
    hole: tuple[float, float, float, float] | None = None
    label: int | None = None

    @classmethod
    def from_mesh(cls, mesh: Mesh, margin: float, label: int | None = None):
        if mesh.extents is None:
            raise GeometryError("mesh carries no extents; cannot build region")
        (x0, x1), (y0, y1) = mesh.extents
        outer = (x0 + margin, x1 - margin, y0 + margin, y1 - margin)
        hole = None
        if mesh.coil_rect is not None:
            cx0, cx1, cy0, cy1 = mesh.coil_rect
            hole = (cx0 - margin, cx1 + margin, cy0 - margin, cy1 + margin)
        return cls(outer, hole, label)

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        x0, x1, y0, y1 = self.outer
        ok = (p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)
        if self.hole is not None:
            hx0, hx1, hy0, hy1 = self.hole
            inside_hole = (
                (p[:, 0] > hx0) & (p[:, 0] < hx1) & (p[:, 1] > hy0) & (p[:, 1] < hy1)
            )
            ok &= ~inside_hole
        return ok

    def project(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float)).copy()
        x0, x1, y0, y1 = self.outer
        p[:, 0] = np.clip(p[:, 0], x0, x1)
        p[:, 1] = np.clip(p[:, 1], y0, y1)
        if self.hole is not None:
            hx0, hx1, hy0, hy1 = self.hole
            for k in range(p.shape[0]):
                px, py = p[k]
                if hx0 < px < hx1 and hy0 < py < hy1:
                    moves = [
                        (px - hx0, (hx0, py)),
                        (hx1 - px, (hx1, py)),
                        (py - hy0, (px, hy0)),
                        (hy1 - py, (px, hy1)),
                    ]
                    _, target = min(moves, key=lambda m: m[0])
                    p[k] = np.clip(target, (x0, y0), (x1, y1))
        return p


@dataclass(frozen=True)
class SensorDesign:
    """Positions and geometry of the movable internal sensors."""

    positions: np.ndarray  # (m_int, 2)
    radius: float
    n_stencil: int = 7
    region: AdmissibleRegion | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        pos = pos.reshape(0, 2) if pos.size == 0 else np.atleast_2d(pos)
        object.__setattr__(self, "positions", pos)
        if self.radius <= 0:
            raise DesignInfeasibleError("sensor radius must be positive")
        if self.n_stencil < 1:
            raise DesignInfeasibleError("stencil needs at least one point")
        if not np.all(np.isfinite(pos)):
            raise DesignInfeasibleError("sensor positions must be finite")

    @property
    def m_int(self) -> int:
        return self.positions.shape[0]

    def with_positions(self, positions) -> "SensorDesign":
        return replace(self, positions=np.asarray(positions, dtype=float))

    def stencil(self, sensor: int) -> np.ndarray:
        """Stencil points of one sensor: center plus a symmetric ring."""
        c = self.positions[sensor]
        pts = [c]
        ring = self.n_stencil - 1
        if ring > 0:
            ang = 2.0 * np.pi * np.arange(ring) / ring
            pts.extend(c + self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1))
        return np.asarray(pts)

    def feasible(self) -> bool:
        if self.region is None:
            return True
        return bool(np.all(self.region.contains(self.positions)))


@dataclass
class MeasurementRows:
    """Sparse averaging rows (m_s x n) with per-row metadata."""

    matrix: sp.csr_matrix
    kind: str  # "internal" | "boundary"
    sensor_ids: np.ndarray

    @property
    def m_s(self) -> int:
        return self.matrix.shape[0]


# ---------------------------------------------------------------------------
# boundary pixels
# ---------------------------------------------------------------------------


def build_boundary_pixel_rows(mesh: Mesh, count: int) -> MeasurementRows:
    """Equal-arclength pixel averages over the measured boundary.

    The measured edges are chained into a polyline; each of the `count`
    segments integrates the linear trace exactly, so each row sums to one.
    """
    edges = mesh.boundary_edges[mesh.boundary_measured]
    if edges.shape[0] == 0:
        raise GeometryError("mesh has no measurement-tagged boundary edges")
    chain = _chain_edges(mesh, edges)
    lengths = mesh.edge_lengths(chain)
    total = lengths.sum()
    bounds = np.cumsum(np.concatenate([[0.0], lengths]))
    seg_len = total / count

    rows, cols, vals = [], [], []
    for k in range(count):
        s0, s1 = k * seg_len, (k + 1) * seg_len
        for e, (a, b) in enumerate(chain):
            e0, e1 = bounds[e], bounds[e + 1]
            lo, hi = max(s0, e0), min(s1, e1)
            if hi <= lo:
                continue
            ell = lengths[e]
            ta, tb = (lo - e0) / ell, (hi - e0) / ell
            wa = ell * ((tb - ta) - 0.5 * (tb**2 - ta**2))
            wb = ell * 0.5 * (tb**2 - ta**2)
            rows.extend([k, k])
            cols.extend([a, b])
            vals.extend([wa / seg_len, wb / seg_len])
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(count, mesh.n_nodes))
    matrix.sum_duplicates()
    return MeasurementRows(matrix, "boundary", np.arange(count))


def _chain_edges(mesh: Mesh, edges: np.ndarray) -> np.ndarray:
    """Order edges into a single traversal (open chain or closed loop)."""
    adj: dict[int, list[int]] = {}
    for a, b in edges:
        adj.setdefault(int(a), []).append(int(b))
        adj.setdefault(int(b), []).append(int(a))
    endpoints = sorted(k for k, v in adj.items() if len(v) == 1)
    if endpoints:
        start = min(endpoints, key=lambda k: tuple(mesh.nodes[k]))
    else:
        start = min(adj, key=lambda k: tuple(mesh.nodes[k]))
    ordered = []
    prev, cur = None, start
    for _ in range(edges.shape[0]):
        nxts = [v for v in sorted(adj[cur]) if v != prev]
        if not nxts:
            break
        nxt = nxts[0]
        ordered.append((cur, nxt))
        prev, cur = cur, nxt
    if len(ordered) != edges.shape[0]:
        raise GeometryError("measured boundary is not a single chain")
    return np.asarray(ordered, dtype=np.int64)


# ---------------------------------------------------------------------------
# internal sensors
# ---------------------------------------------------------------------------


def build_internal_sensor_rows(mesh: Mesh, design: SensorDesign) -> MeasurementRows:
    """Stencil-averaged interpolation rows, one per internal sensor."""
    if not design.feasible():
        raise DesignInfeasibleError("sensor center outside the admissible region")
    n = mesh.n_nodes
    rows, cols, vals = [], [], []
    for i in range(design.m_int):
        pts = design.stencil(i)
        w = 1.0 / pts.shape[0]
        for q in pts:
            try:
                tri, lam = mesh.locate(q)
            except LocationError as exc:
                raise DesignInfeasibleError(
                    f"stencil point of sensor {i} lies outside the domain"
                ) from exc
            _check_label(mesh, design, tri, i)
            rows.extend([i, i, i])
            cols.extend(mesh.triangles[tri].tolist())
            vals.extend((w * lam).tolist())
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(design.m_int, n))
    matrix.sum_duplicates()
    return MeasurementRows(matrix, "internal", np.arange(design.m_int))


def _check_label(mesh: Mesh, design: SensorDesign, tri: int, sensor: int):
    if design.region is not None and design.region.label is not None:
        if int(mesh.tri_labels[tri]) != design.region.label:
            raise DesignInfeasibleError(
                f"stencil point of sensor {sensor} falls outside subdomain "
                f"{design.region.label}"
            )


def internal_row_derivative(
    mesh: Mesh, design: SensorDesign, sensor: int, axis: int
) -> sp.csr_matrix:
    """d(row)/d(position along axis).

    Each stencil point contributes the basis gradient of its containing
    triangle dotted with the axis direction; the result is the exact
    derivative away from element crossings and has zero row sum.  For a
    point exactly on a shared edge the gradients of all containing triangles
    (within the same subdomain) are averaged, so a sensor resting on a mesh
    line at a symmetric optimum reports the balanced subgradient instead of
    an arbitrary one-sided value.
    """
    _, grads = _tri_geometry(mesh)
    n = mesh.n_nodes
    pts = design.stencil(sensor)
    w = 1.0 / pts.shape[0]
    cols, vals = [], []
    for q in pts:
        tris = mesh.locate_all(q)
        label = mesh.tri_labels[tris[0]]
        tris = [t for t in tris if mesh.tri_labels[t] == label]
        share = w / len(tris)
        for tri in tris:
            cols.extend(mesh.triangles[tri].tolist())
            vals.extend((share * grads[tri, :, axis]).tolist())
    rows = [0] * len(cols)
    out = sp.csr_matrix((vals, (rows, cols)), shape=(1, n))
    out.sum_duplicates()
    return out


def internal_row_derivatives(mesh: Mesh, design: SensorDesign) -> sp.csr_matrix:
    """All position derivatives stacked as rows (2*m_int, n).

    Row 2*i is d/dx of sensor i's row, row 2*i + 1 is d/dy.
    """
    if design.m_int == 0:
        return sp.csr_matrix((0, mesh.n_nodes))
    blocks = []
    for i in range(design.m_int):
        for axis in (0, 1):
            blocks.append(internal_row_derivative(mesh, design, i, axis))
    return sp.vstack(blocks).tocsr()


# ---------------------------------------------------------------------------
# overlap penalty
# ---------------------------------------------------------------------------


def overlap_penalty(design: SensorDesign, weight: float) -> tuple[float, np.ndarray]:
    """Quadratic hinge on pairwise center distances below one diameter.

    value = weight * sum_{i<j} max(0, 2 r - |p_i - p_j|)^2, with the exact
    gradient with respect to each position (zero for coincident pairs,
    where the distance is not differentiable).
    """
    if weight < 0:
        raise ValueError("penalty weight must be nonnegative")
    p = design.positions
    m = design.m_int
    value = 0.0
    grad = np.zeros_like(p)
    dmin = 2.0 * design.radius
    for i in range(m):
        for j in range(i + 1, m):
            diff = p[i] - p[j]
            d = float(np.hypot(*diff))
            gap = dmin - d
            if gap <= 0.0:
                continue
            value += weight * gap * gap
            if d > 0.0:
                g = -2.0 * weight * gap * diff / d
                grad[i] += g
                grad[j] -= g
    return value, grad
