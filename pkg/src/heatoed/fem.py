"""Sparse FE assembly for linear triangles, plus SPD factorization services.

All element integrals are evaluated in closed form (mass, stiffness, edge
terms), so assembly introduces no quadrature tolerance.  Every assembled
matrix is symmetrized bitwise via (A + A.T)/2, which is exact in binary
floating point when the accumulated halves already agree.

The Cholesky service reduces fill by a reverse Cuthill-McKee reordering and
factorizes the permuted matrix in LAPACK banded storage.  Writing P A P^T =
C C^T with C lower triangular, the factor exposed to callers is L := C^T P,
an upper-triangular-times-permutation operator satisfying

    L^T L = A        and        A^{-1} = L^{-1} L^{-T},

so identities stated in terms of L hold verbatim while all applications of
L, L^T and their inverses go through the solve/apply methods below (the
permutation never leaks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import AssemblyError, DefinitenessError
from .mesh import LABEL_CORE, TAG_ROBIN, Mesh


@dataclass(frozen=True)
class MaterialModel:
    """Piecewise-constant material data.

    kappa: per-label heat conductivity, scalar or 2x2 SPD matrix (W/m/K).
    rho: per-label density times heat capacity (J/m^3/K).
    h: boundary heat transfer coefficient on the Robin boundary (W/m^2/K).
    kappa_ins, d_ins: conductivity and thickness of the insulating layer on
        the core/coil interface; only used when the mesh has one.
    """

    kappa: dict
    rho: dict
    h: float
    kappa_ins: float | None = None
    d_ins: float | None = None

    def __post_init__(self):
        if self.h <= 0:
            raise AssemblyError("boundary heat transfer coefficient must be positive")
        for lab, k in self.kappa.items():
            km = coefficient_matrix(k)
            ev = np.linalg.eigvalsh(km)
            if km.shape != (2, 2) or not np.allclose(km, km.T) or ev.min() <= 0:
                raise AssemblyError(f"conductivity for label {lab} is not SPD")
        for lab, r in self.rho.items():
            if r <= 0:
                raise AssemblyError(f"rho for label {lab} must be positive")

    def kappa_matrix(self, label: int) -> np.ndarray:
        return coefficient_matrix(self.kappa[label])

    @classmethod
    def homogeneous(cls, kappa=1.0, rho=1.0, h=1.0) -> "MaterialModel":
        return cls(kappa={LABEL_CORE: kappa}, rho={LABEL_CORE: rho}, h=h)


def coefficient_matrix(value) -> np.ndarray:
    """Promote a scalar coefficient to an isotropic 2x2 matrix."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.eye(2) * float(arr)
    return arr


def _tri_geometry(mesh: Mesh):
    p = mesh.nodes[mesh.triangles]
    d1 = p[:, 1, :] - p[:, 0, :]
    d2 = p[:, 2, :] - p[:, 0, :]
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    if np.any(det <= 0):
        raise AssemblyError("degenerate or inverted triangle in mesh")
    area = 0.5 * det
    # gradients of the three barycentric basis functions, shape (ne, 3, 2)
    grads = np.empty((mesh.n_triangles, 3, 2))
    grads[:, 1, 0] = d2[:, 1] / det
    grads[:, 1, 1] = -d2[:, 0] / det
    grads[:, 2, 0] = -d1[:, 1] / det
    grads[:, 2, 1] = d1[:, 0] / det
    grads[:, 0, :] = -grads[:, 1, :] - grads[:, 2, :]
    return area, grads


def _accumulate(n, rows, cols, vals) -> sp.csr_matrix:
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    out = (mat + mat.T) * 0.5
    out.sum_duplicates()
    out.eliminate_zeros()
    return out


_LOCAL_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def assemble_mass(mesh: Mesh, weight=1.0) -> sp.csr_matrix:
    """Weighted mass matrix: entries are integrals of rho-like-weight * phi_i phi_j.

    `weight` is a scalar applied everywhere or a dict mapping subdomain label
    to a scalar.
    """
    area, _ = _tri_geometry(mesh)
    if isinstance(weight, dict):
        w = np.array([weight[int(lab)] for lab in mesh.tri_labels])
    else:
        w = np.full(mesh.n_triangles, float(weight))
    if np.any(w <= 0):
        raise AssemblyError("mass weights must be positive")
    tri = mesh.triangles
    local = (w * area)[:, None, None] * _LOCAL_MASS[None, :, :]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return _accumulate(mesh.n_nodes, [rows], [cols], [local.ravel()])


def assemble_stiffness(mesh: Mesh, material: MaterialModel) -> sp.csr_matrix:
    """Stiffness with Robin boundary mass and (if present) interface coupling.

    K = int kappa grad(phi_i).grad(phi_j) + int_{Robin} h phi_i phi_j
        [+ interface jump term from `assemble_interface_coupling`].
    """
    K = assemble_volume_stiffness(mesh, material.kappa)
    K = K + assemble_robin_mass(mesh, material.h)
    if mesh.interface_edges.shape[0] > 0:
        if material.kappa_ins is None or material.d_ins is None:
            raise AssemblyError("mesh has an interface but no insulation data")
        K = K + assemble_interface_coupling(mesh, material.kappa_ins, material.d_ins)
    K = (K + K.T) * 0.5
    K.sum_duplicates()
    return K.tocsr()


def assemble_volume_stiffness(mesh: Mesh, kappa) -> sp.csr_matrix:
    """Volume term int kappa grad(phi_i) . grad(phi_j), no boundary terms."""
    area, grads = _tri_geometry(mesh)
    if isinstance(kappa, dict):
        kmats = {int(lab): coefficient_matrix(v) for lab, v in kappa.items()}
        km = np.stack([kmats[int(lab)] for lab in mesh.tri_labels])
    else:
        km = np.broadcast_to(coefficient_matrix(kappa), (mesh.n_triangles, 2, 2))
    kg = np.einsum("eab,ejb->eja", km, grads)
    local = np.einsum("eia,eja->eij", grads, kg) * area[:, None, None]
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return _accumulate(mesh.n_nodes, [rows], [cols], [local.ravel()])


def assemble_robin_mass(mesh: Mesh, h: float) -> sp.csr_matrix:
    """Edge mass h * int_{Robin} phi_i phi_j over Robin-tagged boundary edges."""
    robin = mesh.boundary_edges[mesh.boundary_tags == TAG_ROBIN]
    n = mesh.n_nodes
    if robin.shape[0] == 0:
        return sp.csr_matrix((n, n))
    ell = mesh.edge_lengths(robin)
    local = (h * ell / 6.0)[:, None, None] * np.array([[2.0, 1.0], [1.0, 2.0]])
    rows = np.repeat(robin, 2, axis=1).ravel()
    cols = np.tile(robin, (1, 2)).ravel()
    return _accumulate(n, [rows], [cols], [local.ravel()])


def assemble_interface_coupling(mesh: Mesh, kappa_ins: float, d_ins: float) -> sp.csr_matrix:
    """Jump penalty (kappa_ins/d_ins) int_{AB} (u_B - u_A)(v_B - v_A) dS.

    The local block on the node quadruple (a1, a2, b1, b2) of an interface
    edge of length ell is (kappa_ins/d_ins) * (ell/6) * the signed 1-D mass
    pattern; its kernel contains every vector that is equal across each
    duplicated pair.
    """
    edges = mesh.interface_edges
    if edges.shape[0] == 0:
        raise AssemblyError("mesh has no interface edges")
    coeff = kappa_ins / d_ins
    ell = np.hypot(
        *(mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]]).T
    )
    pattern = np.array(
        [
            [2.0, 1.0, -2.0, -1.0],
            [1.0, 2.0, -1.0, -2.0],
            [-2.0, -1.0, 2.0, 1.0],
            [-1.0, -2.0, 1.0, 2.0],
        ]
    )
    local = (coeff * ell / 6.0)[:, None, None] * pattern[None, :, :]
    rows = np.repeat(edges, 4, axis=1).ravel()
    cols = np.tile(edges, (1, 4)).ravel()
    return _accumulate(mesh.n_nodes, [rows], [cols], [local.ravel()])


def assemble_prior_precision(mesh: Mesh, beta, alpha) -> sp.csr_matrix:
    """Elliptic prior precision: beta-weighted mass plus alpha-weighted
    volume stiffness (no boundary or interface terms)."""
    if isinstance(beta, dict):
        if any(b <= 0 for b in beta.values()):
            raise AssemblyError("beta must be positive")
    elif beta <= 0:
        raise AssemblyError("beta must be positive")
    P = assemble_mass(mesh, beta)
    nonzero_alpha = (
        any(np.any(coefficient_matrix(a) != 0) for a in alpha.values())
        if isinstance(alpha, dict)
        else np.any(coefficient_matrix(alpha) != 0)
    )
    if nonzero_alpha:
        P = P + assemble_volume_stiffness(mesh, alpha)
        P = (P + P.T) * 0.5
    return P.tocsr()


# ---------------------------------------------------------------------------
# SPD factorization
# ---------------------------------------------------------------------------


class SPDFactor:
    """Banded Cholesky of a sparse SPD matrix behind a fill-reducing permutation.

    Methods never expose the permutation: `solve` inverts the full matrix,
    `solve_l`/`solve_lt` invert the conceptual factor L (with L^T L = A), and
    `apply_l`/`apply_lt` multiply by it.
    """

    def __init__(self, matrix: sp.spmatrix):
        A = sp.csr_matrix(matrix)
        n = A.shape[0]
        if (A - A.T).nnz != 0:
            A = (A + A.T) * 0.5
        self.n = n
        self.perm = np.asarray(reverse_cuthill_mckee(A, symmetric_mode=True))
        self.iperm = np.argsort(self.perm)
        Ap = A[self.perm][:, self.perm].tocoo()
        i, j, v = Ap.row, Ap.col, Ap.data
        lower = i >= j
        i, j, v = i[lower], j[lower], v[lower]
        bw = int((i - j).max()) if len(i) else 0
        ab = np.zeros((bw + 1, n))
        ab[i - j, j] = v
        try:
            self._cb = sla.cholesky_banded(ab, lower=True)
        except sla.LinAlgError as exc:
            raise DefinitenessError(f"matrix is not positive definite: {exc}") from exc
        self.bandwidth = bw
        # C^T in LAPACK upper-banded storage for triangular solves
        self._cb_upper = np.zeros_like(self._cb)
        for d in range(bw + 1):
            if d == 0:
                self._cb_upper[bw, :] = self._cb[0, :]
            else:
                self._cb_upper[bw - d, d:] = self._cb[d, : n - d]
        self._c_sparse = self._banded_to_sparse()

    def _banded_to_sparse(self) -> sp.csr_matrix:
        n, bw = self.n, self.bandwidth
        rows, cols, vals = [], [], []
        for d in range(bw + 1):
            cols.append(np.arange(n - d))
            rows.append(np.arange(d, n))
            vals.append(self._cb[d, : n - d])
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )

    # -- full solve ---------------------------------------------------------

    def solve(self, b: np.ndarray) -> np.ndarray:
        """x = A^{-1} b (b may be a matrix of right-hand sides)."""
        bp = np.asarray(b)[self.perm]
        xp = sla.cho_solve_banded((self._cb, True), bp)
        return xp[self.iperm]

    # -- factor operations ----------------------------------------------------

    def apply_l(self, v: np.ndarray) -> np.ndarray:
        """L v, with L the conceptual factor (L^T L = A)."""
        return self._c_sparse.T @ np.asarray(v)[self.perm]

    def apply_lt(self, v: np.ndarray) -> np.ndarray:
        """L^T v."""
        return (self._c_sparse @ np.asarray(v))[self.iperm]

    def solve_l(self, v: np.ndarray) -> np.ndarray:
        """L^{-1} v; two of these give the covariance action A^{-1}."""
        z = sla.solve_banded((0, self.bandwidth), self._cb_upper, np.asarray(v))
        return z[self.iperm]

    def solve_lt(self, v: np.ndarray) -> np.ndarray:
        """L^{-T} v."""
        vp = np.asarray(v)[self.perm]
        return sla.solve_banded((self.bandwidth, 0), self._cb, vp)


def cholesky(matrix: sp.spmatrix) -> SPDFactor:
    """Factor a sparse SPD matrix; raises DefinitenessError otherwise."""
    return SPDFactor(matrix)
