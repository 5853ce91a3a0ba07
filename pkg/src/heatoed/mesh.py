"""Triangular meshes for the unit square and the half-transformer cross section.

Meshes are structured (tensor grids split into triangles) so that runs are
reproducible without an external mesh generator.  The transformer mesh labels
triangles as core/coil, duplicates the nodes on the core/coil interface so the
temperature (and source) fields may jump across the insulating layer, and tags
boundary edges by their physical role.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, LocationError

# Triangle subdomain labels.
LABEL_CORE = 0  # iron core; also the label of single-material domains
LABEL_COIL = 1

# Boundary edge tags.
TAG_ROBIN = 1
TAG_NEUMANN = 2

_BARY_SLACK = 1e-9


@dataclass(frozen=True)
class DomainSpec:
    """Geometry request for `build_transformer_mesh`.

    extents: ((x0, x1), (y0, y1)) of the full rectangle, meters.
    coil_rect: (cx0, cx1, cy0, cy1), strictly inside the extents.  The
        coordinates are a config input; the shipped default is a vertical coil
        slab whose area matches the nominal 2.0 W coil loss at the reference
        loss density.
    target_h: requested edge length of the structured grid.
    interface_band_splits: number of times the grid cell adjacent to each
        coil edge is halved (refinement band along the interface).
    """

    extents: tuple[tuple[float, float], tuple[float, float]] = (
        (0.0, 0.025),
        (-0.030, 0.030),
    )
    coil_rect: tuple[float, float, float, float] = (0.008, 0.016, -0.020, 0.020)
    target_h: float = 1.0e-3
    interface_band_splits: int = 1

    def __post_init__(self):
        (x0, x1), (y0, y1) = self.extents
        if not (x1 > x0 and y1 > y0):
            raise GeometryError("domain extents must have positive size")
        if self.target_h <= 0:
            raise GeometryError("target mesh size must be positive")
        cx0, cx1, cy0, cy1 = self.coil_rect
        if not (cx1 > cx0 and cy1 > cy0):
            raise GeometryError("coil rectangle must have positive size")
        if not (x0 < cx0 and cx1 < x1 and y0 < cy0 and cy1 < y1):
            raise GeometryError("coil rectangle must lie strictly inside the domain")


class Mesh:
    """Immutable triangulation with subdomain labels and tagged edges.

    Node/triangle arrays are plain ndarrays; boundary edges carry a tag
    (Robin or Neumann) plus a boolean flag marking the measured subset.
    Interface edges store the duplicated node quadruple (a1, a2, b1, b2)
    where (a1, b1) and (a2, b2) are coincident core/coil node pairs.
    """

    def __init__(
        self,
        nodes,
        triangles,
        tri_labels,
        boundary_edges,
        boundary_tags,
        boundary_measured,
        interface_edges=None,
        *,
        extents=None,
        coil_rect=None,
        analytic_area=None,
    ):
        self.nodes = np.ascontiguousarray(nodes, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        self.tri_labels = np.ascontiguousarray(tri_labels, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(boundary_edges, dtype=np.int64)
        self.boundary_tags = np.ascontiguousarray(boundary_tags, dtype=np.int64)
        self.boundary_measured = np.ascontiguousarray(boundary_measured, dtype=bool)
        if interface_edges is None:
            interface_edges = np.zeros((0, 4), dtype=np.int64)
        self.interface_edges = np.ascontiguousarray(interface_edges, dtype=np.int64)
        self.extents = extents
        self.coil_rect = coil_rect
        self.analytic_area = analytic_area
        self._validate()
        self._node_labels = self._compute_node_labels()
        self._locator = _TriangleLocator(self.nodes, self.triangles)

    # -- basic queries ----------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def node_labels(self) -> np.ndarray:
        """Per-node subdomain label, inherited from the referencing triangles."""
        return self._node_labels

    @property
    def interface_pairs(self) -> np.ndarray:
        """(k, 2) unique coincident (core_node, coil_node) index pairs."""
        if self.interface_edges.shape[0] == 0:
            return np.zeros((0, 2), dtype=np.int64)
        a = self.interface_edges[:, :2].ravel()
        b = self.interface_edges[:, 2:].ravel()
        pairs = np.stack([a, b], axis=1)
        return np.unique(pairs, axis=0)

    def triangle_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        return 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )

    def edge_lengths(self, edges: np.ndarray) -> np.ndarray:
        d = self.nodes[edges[:, 1]] - self.nodes[edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def max_edge_length(self) -> float:
        tri = self.triangles
        edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        return float(self.edge_lengths(edges).max())

    def diameter(self) -> float:
        lo = self.nodes.min(axis=0)
        hi = self.nodes.max(axis=0)
        return float(np.hypot(*(hi - lo)))

    # -- point location ---------------------------------------------------

    def locate(self, point) -> tuple[int, np.ndarray]:
        """Find the triangle containing `point` (lowest index on ties).

        Returns (triangle index, barycentric coordinates).  Raises
        LocationError for points outside the domain beyond tolerance.
        """
        return self._locator.locate(np.asarray(point, dtype=float))

    def locate_many(self, points) -> tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        idx = np.empty(pts.shape[0], dtype=np.int64)
        bary = np.empty((pts.shape[0], 3))
        for k, p in enumerate(pts):
            idx[k], bary[k] = self.locate(p)
        return idx, bary

    def locate_all(self, point) -> list[int]:
        """All triangles containing `point` (ascending index); more than one
        exactly on shared edges or vertices."""
        return self._locator.locate_all(np.asarray(point, dtype=float))

    # -- validation -------------------------------------------------------

    def _validate(self):
        areas = self.triangle_areas()
        if np.any(areas <= 0):
            raise GeometryError("mesh contains a triangle with nonpositive area")
        if self.analytic_area is not None:
            total = math.fsum(areas.tolist())
            if abs(total - self.analytic_area) > 1e-12 * self.analytic_area:
                raise GeometryError(
                    f"triangle areas sum to {total!r}, expected {self.analytic_area!r}"
                )
        if self.boundary_edges.shape[0] != self.boundary_tags.shape[0]:
            raise GeometryError("boundary edge/tag count mismatch")
        if not np.all(np.isin(self.boundary_tags, (TAG_ROBIN, TAG_NEUMANN))):
            raise GeometryError("unknown boundary tag")
        for a1, a2, b1, b2 in self.interface_edges:
            if not (
                np.array_equal(self.nodes[a1], self.nodes[b1])
                and np.array_equal(self.nodes[a2], self.nodes[b2])
            ):
                raise GeometryError("interface node pair coordinates differ")

    def _compute_node_labels(self) -> np.ndarray:
        labels = np.zeros(self.n_nodes, dtype=np.int64)
        for lab in np.unique(self.tri_labels):
            labels[np.unique(self.triangles[self.tri_labels == lab])] = lab
        return labels

    # -- plain-text serialization ------------------------------------------

    def save_text(self, path):
        """Write the mesh as a plain node/element text file."""
        with open(path, "w") as fh:
            fh.write(f"$nodes {self.n_nodes}\n")
            for i, (x, y) in enumerate(self.nodes):
                fh.write(f"{i} {float(x)!r} {float(y)!r}\n")
            fh.write(f"$triangles {self.n_triangles}\n")
            for i, (t, lab) in enumerate(zip(self.triangles, self.tri_labels)):
                fh.write(f"{i} {t[0]} {t[1]} {t[2]} {lab}\n")
            fh.write(f"$boundary_edges {self.boundary_edges.shape[0]}\n")
            for i, (e, tag, meas) in enumerate(
                zip(self.boundary_edges, self.boundary_tags, self.boundary_measured)
            ):
                fh.write(f"{i} {e[0]} {e[1]} {tag} {int(meas)}\n")
            fh.write(f"$interface_edges {self.interface_edges.shape[0]}\n")
            for i, q in enumerate(self.interface_edges):
                fh.write(f"{i} {q[0]} {q[1]} {q[2]} {q[3]}\n")
            if self.extents is not None:
                (x0, x1), (y0, y1) = self.extents
                fh.write(f"$extents {x0!r} {x1!r} {y0!r} {y1!r}\n")
            if self.coil_rect is not None:
                cx0, cx1, cy0, cy1 = self.coil_rect
                fh.write(f"$coil_rect {cx0!r} {cx1!r} {cy0!r} {cy1!r}\n")
            if self.analytic_area is not None:
                fh.write(f"$area {self.analytic_area!r}\n")

    @classmethod
    def load_text(cls, path) -> "Mesh":
        sections: dict[str, list[list[str]]] = {}
        extents = coil_rect = area = None
        with open(path) as fh:
            current = None
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0].startswith("$"):
                    key = parts[0][1:]
                    if key == "extents":
                        vals = [float(v) for v in parts[1:5]]
                        extents = ((vals[0], vals[1]), (vals[2], vals[3]))
                        current = None
                    elif key == "coil_rect":
                        coil_rect = tuple(float(v) for v in parts[1:5])
                        current = None
                    elif key == "area":
                        area = float(parts[1])
                        current = None
                    else:
                        current = key
                        sections[current] = []
                elif current is not None:
                    sections[current].append(parts)
        nodes = np.array([[float(r[1]), float(r[2])] for r in sections["nodes"]])
        tri_rows = sections["triangles"]
        triangles = np.array([[int(r[1]), int(r[2]), int(r[3])] for r in tri_rows])
        tri_labels = np.array([int(r[4]) for r in tri_rows])
        be_rows = sections.get("boundary_edges", [])
        boundary_edges = np.array(
            [[int(r[1]), int(r[2])] for r in be_rows], dtype=np.int64
        ).reshape(-1, 2)
        boundary_tags = np.array([int(r[3]) for r in be_rows], dtype=np.int64)
        boundary_measured = np.array([bool(int(r[4])) for r in be_rows], dtype=bool)
        ie_rows = sections.get("interface_edges", [])
        interface_edges = np.array(
            [[int(v) for v in r[1:5]] for r in ie_rows], dtype=np.int64
        ).reshape(-1, 4)
        return cls(
            nodes,
            triangles,
            tri_labels,
            boundary_edges,
            boundary_tags,
            boundary_measured,
            interface_edges,
            extents=extents,
            coil_rect=coil_rect,
            analytic_area=area,
        )


class _TriangleLocator:
    """Uniform-bucket point locator with lowest-triangle-index tie-break."""

    def __init__(self, nodes, triangles):
        self.nodes = nodes
        self.triangles = triangles
        self.lo = nodes.min(axis=0)
        self.hi = nodes.max(axis=0)
        span = np.maximum(self.hi - self.lo, 1e-300)
        ncell = max(1, int(math.sqrt(max(1, triangles.shape[0]))))
        self.shape = (ncell, ncell)
        self.cell = span / np.array(self.shape)
        self.buckets: dict[tuple[int, int], list[int]] = {}
        pts = nodes[triangles]
        los = pts.min(axis=1)
        his = pts.max(axis=1)
        for t in range(triangles.shape[0]):
            i0, j0 = self._cell_index(los[t])
            i1, j1 = self._cell_index(his[t])
            for i in range(i0, i1 + 1):
                for j in range(j0, j1 + 1):
                    self.buckets.setdefault((i, j), []).append(t)
        for key in self.buckets:
            self.buckets[key].sort()
        # precomputed affine maps: bary = T^{-1} (x - p0)
        p0 = pts[:, 0, :]
        d1 = pts[:, 1, :] - p0
        d2 = pts[:, 2, :] - p0
        det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
        self.p0 = p0
        self.inv = np.empty((triangles.shape[0], 2, 2))
        self.inv[:, 0, 0] = d2[:, 1] / det
        self.inv[:, 0, 1] = -d2[:, 0] / det
        self.inv[:, 1, 0] = -d1[:, 1] / det
        self.inv[:, 1, 1] = d1[:, 0] / det

    def _cell_index(self, p):
        ij = np.floor((p - self.lo) / self.cell).astype(int)
        return (
            min(max(ij[0], 0), self.shape[0] - 1),
            min(max(ij[1], 0), self.shape[1] - 1),
        )

    def bary(self, tri_index: int, point: np.ndarray) -> np.ndarray:
        lam12 = self.inv[tri_index] @ (point - self.p0[tri_index])
        return np.array([1.0 - lam12[0] - lam12[1], lam12[0], lam12[1]])

    def locate(self, point: np.ndarray) -> tuple[int, np.ndarray]:
        key = self._cell_index(point)
        for t in self.buckets.get(key, ()):
            lam = self.bary(t, point)
            if lam.min() >= -_BARY_SLACK:
                return t, lam
        # fallback scan covers points on bucket seams and boundary roundoff
        best, best_lam, best_min = -1, None, -np.inf
        for t in range(self.triangles.shape[0]):
            lam = self.bary(t, point)
            m = lam.min()
            if m >= -_BARY_SLACK:
                return t, lam
            if m > best_min:
                best, best_lam, best_min = t, lam, m
        if best >= 0 and best_min >= -1e-6:
            return best, best_lam
        raise LocationError(f"point {point.tolist()} lies outside the mesh")

    def locate_all(self, point: np.ndarray) -> list[int]:
        key = self._cell_index(point)
        hits = [
            t
            for t in self.buckets.get(key, ())
            if self.bary(t, point).min() >= -_BARY_SLACK
        ]
        if hits:
            return hits
        return [self.locate(point)[0]]


def locate_point(mesh: Mesh, point) -> tuple[int, np.ndarray]:
    """Module-level convenience wrapper around `Mesh.locate`."""
    return mesh.locate(point)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_unit_square_mesh(refinement: int) -> Mesh:
    """Structured triangulation of (0,1)^2 with `refinement` cells per axis.

    All boundary edges are tagged Robin and flagged as measured (the thermal
    camera sees the whole boundary in the square test case).
    """
    if refinement < 1:
        raise GeometryError("refinement must be at least 1")
    coords = np.linspace(0.0, 1.0, refinement + 1)
    nodes, triangles = _grid_triangulation(coords, coords)
    boundary_edges = _boundary_edges_of(triangles)
    tags = np.full(boundary_edges.shape[0], TAG_ROBIN, dtype=np.int64)
    measured = np.ones(boundary_edges.shape[0], dtype=bool)
    return Mesh(
        nodes,
        triangles,
        np.full(triangles.shape[0], LABEL_CORE, dtype=np.int64),
        boundary_edges,
        tags,
        measured,
        extents=((0.0, 1.0), (0.0, 1.0)),
        analytic_area=1.0,
    )


def build_transformer_mesh(spec: DomainSpec) -> Mesh:
    """Half-transformer cross section with core/coil subdomains.

    Grid lines are snapped to the coil rectangle so the core/coil interface
    is resolved exactly; interface nodes are duplicated (one copy per side)
    and recorded edge by edge.  Edges on x = x0 are tagged Neumann (symmetry
    plane), the rest of the boundary Robin, and the Robin edges on x = x1
    are additionally flagged as the measured boundary.
    """
    (x0, x1), (y0, y1) = spec.extents
    cx0, cx1, cy0, cy1 = spec.coil_rect
    xs = _graded_axis([x0, cx0, cx1, x1], spec.target_h, spec.interface_band_splits)
    ys = _graded_axis([y0, cy0, cy1, y1], spec.target_h, spec.interface_band_splits)
    nodes, triangles = _grid_triangulation(xs, ys)

    centroids = nodes[triangles].mean(axis=1)
    in_coil = (
        (centroids[:, 0] > cx0)
        & (centroids[:, 0] < cx1)
        & (centroids[:, 1] > cy0)
        & (centroids[:, 1] < cy1)
    )
    tri_labels = np.where(in_coil, LABEL_COIL, LABEL_CORE).astype(np.int64)

    nodes, triangles, interface_edges = _duplicate_interface_nodes(
        nodes, triangles, tri_labels, spec.coil_rect
    )

    # duplicated interface edges are topologically one-sided; they are not
    # part of the outer boundary
    iface_keys = set()
    for a1, a2, b1, b2 in interface_edges:
        iface_keys.add(_edge_key(int(a1), int(a2)))
        iface_keys.add(_edge_key(int(b1), int(b2)))
    boundary_edges = _boundary_edges_of(triangles)
    keep = [
        k
        for k, e in enumerate(boundary_edges)
        if _edge_key(int(e[0]), int(e[1])) not in iface_keys
    ]
    boundary_edges = boundary_edges[keep]
    mid = 0.5 * (nodes[boundary_edges[:, 0]] + nodes[boundary_edges[:, 1]])
    tol = 1e-9 * max(x1 - x0, y1 - y0)
    on_symmetry = np.abs(mid[:, 0] - x0) < tol
    on_measured = np.abs(mid[:, 0] - x1) < tol
    tags = np.where(on_symmetry, TAG_NEUMANN, TAG_ROBIN).astype(np.int64)
    if np.any(tri_labels[_boundary_edge_owners(triangles, boundary_edges)] == LABEL_COIL):
        raise GeometryError("coil rectangle touches the outer boundary")

    return Mesh(
        nodes,
        triangles,
        tri_labels,
        boundary_edges,
        tags,
        on_measured,
        interface_edges,
        extents=spec.extents,
        coil_rect=spec.coil_rect,
        analytic_area=(x1 - x0) * (y1 - y0),
    )


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _grid_triangulation(xs, ys):
    """Tensor grid split into two triangles per cell (diagonal SW-NE)."""
    nx, ny = len(xs), len(ys)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return i * ny + j

    tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            n00, n10 = nid(i, j), nid(i + 1, j)
            n01, n11 = nid(i, j + 1), nid(i + 1, j + 1)
            tris.append([n00, n10, n11])
            tris.append([n00, n11, n01])
    return nodes, np.asarray(tris, dtype=np.int64)


def _graded_axis(breaks, h, band_splits):
    """1-D grid through `breaks`, near-uniform per segment, with optional
    halving of the cells adjacent to interior break points."""
    pts = [breaks[0]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        ncell = max(1, round((b - a) / h))
        seg = np.linspace(a, b, ncell + 1)
        cells = list(zip(seg[:-1], seg[1:]))
        refine_first = a != breaks[0]
        refine_last = b != breaks[-1]
        out = []
        for k, (ca, cb) in enumerate(cells):
            splits = 0
            if refine_first and k == 0:
                splits = band_splits
            if refine_last and k == len(cells) - 1:
                splits = band_splits
            out.extend(_split_cell(ca, cb, splits, toward_start=(k == 0)))
        for ca, cb in out:
            pts.append(cb)
    return np.array(pts)


def _split_cell(a, b, splits, toward_start):
    cells = [(a, b)]
    for _ in range(splits):
        ca, cb = cells[0] if toward_start else cells[-1]
        mid = 0.5 * (ca + cb)
        halves = [(ca, mid), (mid, cb)]
        if toward_start:
            cells = halves + cells[1:]
        else:
            cells = cells[:-1] + halves
    return cells


def _edge_key(a, b):
    return (a, b) if a < b else (b, a)


def _boundary_edges_of(triangles) -> np.ndarray:
    count: dict[tuple[int, int], int] = {}
    for t in triangles:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            key = _edge_key(int(a), int(b))
            count[key] = count.get(key, 0) + 1
    edges = sorted(k for k, c in count.items() if c == 1)
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def _boundary_edge_owners(triangles, boundary_edges) -> np.ndarray:
    owner: dict[tuple[int, int], int] = {}
    for ti, t in enumerate(triangles):
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            owner[_edge_key(int(a), int(b))] = ti
    return np.array(
        [owner[_edge_key(int(e[0]), int(e[1]))] for e in boundary_edges],
        dtype=np.int64,
    )


def _duplicate_interface_nodes(nodes, triangles, tri_labels, coil_rect):
    cx0, cx1, cy0, cy1 = coil_rect
    x, y = nodes[:, 0], nodes[:, 1]
    on_vert = ((x == cx0) | (x == cx1)) & (y >= cy0) & (y <= cy1)
    on_horz = ((y == cy0) | (y == cy1)) & (x >= cx0) & (x <= cx1)
    iface = np.flatnonzero(on_vert | on_horz)

    dup_of = {}
    new_nodes = [nodes]
    next_id = nodes.shape[0]
    for k in iface:
        dup_of[int(k)] = next_id
        new_nodes.append(nodes[k : k + 1])
        next_id += 1
    nodes = np.concatenate(new_nodes, axis=0)

    triangles = triangles.copy()
    coil_tris = np.flatnonzero(tri_labels == LABEL_COIL)
    for ti in coil_tris:
        for v in range(3):
            rep = dup_of.get(int(triangles[ti, v]))
            if rep is not None:
                triangles[ti, v] = rep

    # interface edges: grid edges lying on the coil rectangle boundary,
    # found as edges shared between one core and one coil triangle before
    # duplication, i.e. edges whose two endpoints were both duplicated and
    # that appear in a coil triangle.
    iface_edges = []
    seen = set()
    orig = {v: k for k, v in dup_of.items()}
    for ti in coil_tris:
        t = triangles[ti]
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            a, b = int(a), int(b)
            if a in orig and b in orig:
                key = _edge_key(a, b)
                if key in seen:
                    continue
                # skip coil-interior diagonals whose endpoints merely sit on
                # the rectangle boundary (both on different edges)
                pa, pb = nodes[a], nodes[b]
                if not _on_same_rect_edge(pa, pb, coil_rect):
                    continue
                seen.add(key)
                iface_edges.append([orig[a], orig[b], a, b])
    iface_edges = np.asarray(iface_edges, dtype=np.int64).reshape(-1, 4)
    return nodes, triangles, iface_edges


def _on_same_rect_edge(pa, pb, rect):
    cx0, cx1, cy0, cy1 = rect
    for c in (cx0, cx1):
        if pa[0] == c and pb[0] == c:
            return True
    for c in (cy0, cy1):
        if pa[1] == c and pb[1] == c:
            return True
    return False
