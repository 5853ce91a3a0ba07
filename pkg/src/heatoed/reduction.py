"""Randomized low-rank factorization of the prior-conditioned boundary map
and the reduced posterior machinery built on it.

The boundary operator composed with the inverse prior factor has fast
singular-value decay, so a randomized range finder with a couple of power
iterations followed by an SVD of the projected (small) matrix captures it at
modest rank.  The resulting factors do not depend on the internal sensor
positions and are cached to disk keyed by a problem hash, so one precompute
serves every optimizer run on the same forward setup.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DataError, DefinitenessError
from .fem import SPDFactor

_SING_TINY = 1e-13


class PriorConditionedOperator:
    """Matrix-free F L^{-1} (and transpose) for a dense row block F."""

    def __init__(self, rows: np.ndarray, factor: SPDFactor):
        self.rows = np.asarray(rows, dtype=float)
        self.factor = factor

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.shape

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.rows @ self.factor.solve_l(x)

    def apply_t(self, y: np.ndarray) -> np.ndarray:
        return self.factor.solve_lt(self.rows.T @ y)


def prior_condition(rows: np.ndarray, factor: SPDFactor) -> PriorConditionedOperator:
    return PriorConditionedOperator(rows, factor)


def randomized_range(apply, apply_t, domain_dim: int, rank: int, power_iters: int = 2, seed=0):
    """Orthonormal basis approximately spanning the dominant range.

    Gaussian sketch, QR, then `power_iters` rounds of A^T / A applications
    with re-orthonormalization in between.
    """
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((domain_dim, rank))
    Q, _ = sla.qr(apply(omega), mode="economic")
    for _ in range(power_iters):
        Z, _ = sla.qr(apply_t(Q), mode="economic")
        Q, _ = sla.qr(apply(Z), mode="economic")
    return Q


@dataclass
class ReducedBoundaryOp:
    """Truncated SVD factors of the prior-conditioned boundary operator."""

    u: np.ndarray  # (m_rows, r), orthonormal columns
    sigma: np.ndarray  # (r,), positive nonincreasing
    vt: np.ndarray  # (r, n), orthonormal rows
    meta: dict = field(default_factory=dict)
    rank_deficient: bool = False

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    @property
    def n(self) -> int:
        return self.vt.shape[1]

    def rows_pr(self) -> np.ndarray:
        """The reduced prior-conditioned boundary rows Sigma_r V_r^T."""
        return self.sigma[:, None] * self.vt

    def project_data(self, y_bdry: np.ndarray) -> np.ndarray:
        """Reduce boundary data onto the kept left singular directions."""
        return self.u.T @ np.asarray(y_bdry, dtype=float)

    def reduced_noise_gram(self, gamma_bdry: float) -> np.ndarray:
        """U_r^T Gamma_bdry^{-1} U_r for the diagonal boundary noise."""
        return (self.u.T @ self.u) / gamma_bdry**2

    def apply_full(self, x: np.ndarray, factor: SPDFactor) -> np.ndarray:
        """Approximate boundary measurement U_r Sigma_r V_r^T L x."""
        return self.u @ (self.sigma[:, None] * (self.vt @ factor.apply_l(x)))


def reduce_boundary_operator(
    op: PriorConditionedOperator,
    rank: int,
    power_iters: int = 2,
    oversample: int = 10,
    seed=0,
) -> ReducedBoundaryOp:
    """Randomized truncated SVD of the prior-conditioned boundary operator.

    The sketch uses `rank + oversample` columns; the SVD of the projected
    operator is trimmed back to `rank` (fewer if the numerical rank is
    smaller, in which case the result is flagged rank deficient).
    """
    m_rows, n = op.shape
    request = min(rank + oversample, m_rows, n)
    Q = randomized_range(op.apply, op.apply_t, n, request, power_iters, seed)
    small = op.apply_t(Q).T  # Q^T F^pr, shape (request, n)
    u_tilde, sigma, vt = sla.svd(small, full_matrices=False)
    keep = min(rank, sigma.shape[0])
    cut = np.searchsorted(-sigma, -sigma[0] * _SING_TINY, side="right")
    deficient = cut < keep
    keep = min(keep, max(int(cut), 1))
    return ReducedBoundaryOp(
        u=Q @ u_tilde[:, :keep],
        sigma=sigma[:keep].copy(),
        vt=vt[:keep].copy(),
        meta={
            "rank_requested": rank,
            "oversample": oversample,
            "power_iters": power_iters,
            "seed": int(seed) if np.isscalar(seed) else str(seed),
        },
        rank_deficient=bool(deficient),
    )


# ---------------------------------------------------------------------------
# stacked reduced forward operator and posterior
# ---------------------------------------------------------------------------


@dataclass
class ReducedForward:
    """Stacked prior-conditioned operator [F_int L^{-1}; Sigma_r V_r^T].

    `noise_diag` holds the matching reduced noise variances: the internal
    block keeps its diagonal, and with white boundary noise the reduced
    boundary block is exactly gamma_bdry^2 I.
    """

    ops: np.ndarray  # (k, n)
    noise_diag: np.ndarray  # (k,)
    m_int: int
    n_obs: int
    r: int

    @property
    def k(self) -> int:
        return self.ops.shape[0]

    @property
    def n(self) -> int:
        return self.ops.shape[1]


def assemble_reduced_forward(
    f_int_pr: np.ndarray | None,
    reduced: ReducedBoundaryOp | None,
    gamma_int: float | None,
    gamma_bdry: float | None,
    n_obs: int,
) -> ReducedForward:
    parts, noises = [], []
    m_int = 0
    if f_int_pr is not None and f_int_pr.shape[0]:
        if not gamma_int or gamma_int <= 0:
            raise DataError("internal rows present but no internal noise level")
        parts.append(np.asarray(f_int_pr, dtype=float))
        m_int = f_int_pr.shape[0] // n_obs
        noises.append(np.full(f_int_pr.shape[0], gamma_int**2))
    r = 0
    if reduced is not None and reduced.rank:
        if not gamma_bdry or gamma_bdry <= 0:
            raise DataError("boundary rows present but no boundary noise level")
        parts.append(reduced.rows_pr())
        r = reduced.rank
        noises.append(np.full(r, gamma_bdry**2))
    if not parts:
        raise DataError("reduced forward operator needs at least one block")
    return ReducedForward(
        ops=np.vstack(parts),
        noise_diag=np.concatenate(noises),
        m_int=m_int,
        n_obs=n_obs,
        r=r,
    )


class ReducedPosterior:
    """Posterior mean/covariance actions through the reduced operator.

    Never materializes an n x n matrix: the covariance action is the prior
    covariance minus the data correction C^T H^{-1} C applied on the fly,
    with C^T = L^{-1} F~^T formed explicitly (n x k) and H = F~ F~^T +
    Gamma~ factorized densely at size k.
    """

    def __init__(self, prior, rf: ReducedForward):
        self.prior = prior
        self.rf = rf
        ops = rf.ops
        H = ops @ ops.T + np.diag(rf.noise_diag)
        try:
            self.h_factor = sla.cho_factor(H, lower=True)
        except sla.LinAlgError as exc:
            raise DefinitenessError(f"reduced data-space system not SPD: {exc}") from exc
        self.H = H
        self.ct = prior.factor.solve_l(ops.T)  # n x k

    def solve_h(self, b: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self.h_factor, b)

    def mean(self, y_reduced: np.ndarray) -> np.ndarray:
        """Posterior mean from reduced data [y_int; U_r^T y_bdry]."""
        resid = np.asarray(y_reduced, dtype=float)
        if np.any(self.prior.mean):
            resid = resid - self.rf.ops @ self.prior.factor.apply_l(self.prior.mean)
        return self.prior.mean + self.prior.factor.solve_l(
            self.rf.ops.T @ self.solve_h(resid)
        )

    def apply_covariance(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return self.prior.factor.solve(v) - self.ct @ self.solve_h(self.ct.T @ v)

    def trace_correction(self, weight) -> float:
        """tr(C^T H^{-1} C W) for sparse symmetric W (the data-induced
        variance reduction in the W seminorm)."""
        s = self.ct.T @ (weight @ self.ct)
        return float(np.trace(self.solve_h(s)))


def reduce_data(rf: ReducedForward, reduced: ReducedBoundaryOp | None, y_int, y_bdry):
    """Stack measured data into the reduced layout [y_int; U_r^T y_bdry]."""
    parts = []
    if rf.m_int:
        parts.append(np.asarray(y_int, dtype=float))
    if rf.r:
        parts.append(reduced.project_data(y_bdry))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# disk cache
# ---------------------------------------------------------------------------


def reduction_cache_key(mesh, params: dict) -> str:
    """Stable hash of the mesh geometry and the forward/reduction parameters."""
    h = hashlib.sha256()
    h.update(mesh.nodes.tobytes())
    h.update(mesh.triangles.tobytes())
    h.update(json.dumps(params, sort_keys=True).encode())
    return h.hexdigest()[:16]


def save_reduced(path, reduced: ReducedBoundaryOp, key: str = ""):
    np.savez_compressed(
        path,
        u=reduced.u,
        sigma=reduced.sigma,
        vt=reduced.vt,
        meta=json.dumps({**reduced.meta, "key": key}),
        rank_deficient=np.array(reduced.rank_deficient),
    )


def load_reduced(path) -> ReducedBoundaryOp:
    data = np.load(path, allow_pickle=False)
    return ReducedBoundaryOp(
        u=data["u"],
        sigma=data["sigma"],
        vt=data["vt"],
        meta=json.loads(str(data["meta"])),
        rank_deficient=bool(data["rank_deficient"]),
    )
