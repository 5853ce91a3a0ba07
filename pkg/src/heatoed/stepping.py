"""Implicit-midpoint propagation of the semi-discrete heat system and the
assembly of discrete forward-map rows by transposition.

The semi-discrete system is  M_rho u'(t) + K u(t) = f  with u(0) = 0 and a
time-independent load f.  One implicit midpoint step of size dt solves

    (M_rho + dt/2 K) u_{k+1} = (M_rho - dt/2 K) u_k + dt f,

and the step matrix is factorized once per grid.  Because the resulting
discrete solution operator at any fixed time is a symmetric matrix, a row of
the measurement-to-source map can be generated by propagating the transposed
sensor row as a load, which is what `assemble_forward_rows` does.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import GuardError
from .fem import SPDFactor

DENSE_EIG_GUARD = 2000


@dataclass(frozen=True)
class TimeGrid:
    """Uniform observation grid t_j = j T / n_obs with `substeps` integration
    steps per observation interval, so dt = T / (n_obs * substeps)."""

    final_time: float
    n_obs: int
    substeps: int = 10

    def __post_init__(self):
        if self.final_time <= 0 or self.n_obs < 1 or self.substeps < 1:
            raise ValueError("TimeGrid requires T > 0, n_obs >= 1, substeps >= 1")

    @property
    def dt(self) -> float:
        return self.final_time / (self.n_obs * self.substeps)

    @property
    def observation_times(self) -> np.ndarray:
        return self.final_time * np.arange(1, self.n_obs + 1) / self.n_obs

    @property
    def n_steps(self) -> int:
        return self.n_obs * self.substeps


class MidpointPropagator:
    """Implicit midpoint stepper with a shared factorization of the step matrix."""

    def __init__(self, m_rho: sp.spmatrix, stiffness: sp.spmatrix, grid: TimeGrid):
        self.grid = grid
        dt = grid.dt
        self._step_factor = SPDFactor(m_rho + (dt / 2.0) * stiffness)
        self._explicit = (m_rho - (dt / 2.0) * stiffness).tocsr()
        self._dt = dt
        self.n = m_rho.shape[0]

    def observe(self, load: np.ndarray) -> np.ndarray:
        """Snapshots at the observation times.

        load: (n,) or (n, k).  Returns (n_obs, n) or (n_obs, n, k).
        """
        load = np.asarray(load, dtype=float)
        single = load.ndim == 1
        cols = load[:, None] if single else load
        u = np.zeros_like(cols)
        out = np.empty((self.grid.n_obs, self.n, cols.shape[1]))
        for j in range(self.grid.n_obs):
            for _ in range(self.grid.substeps):
                rhs = self._explicit @ u + self._dt * cols
                u = self._step_factor.solve(rhs)
            out[j] = u
        return out[:, :, 0] if single else out

    def final(self, load: np.ndarray) -> np.ndarray:
        return self.observe(load)[-1]


def propagate_midpoint(m_rho, stiffness, load, grid: TimeGrid) -> np.ndarray:
    """One-shot propagation; see `MidpointPropagator.observe`."""
    return MidpointPropagator(m_rho, stiffness, grid).observe(load)


def spectral_reference(m_rho, stiffness, load, t: float) -> np.ndarray:
    """Exact-in-time solution of the semi-discrete system via a dense
    generalized eigensolve of (K, M_rho); test oracle only (n guarded)."""
    n = m_rho.shape[0]
    if n > DENSE_EIG_GUARD:
        raise GuardError(f"spectral_reference limited to n <= {DENSE_EIG_GUARD}")
    lam, vecs = sla.eigh(_dense(stiffness), _dense(m_rho))
    coeff = vecs.T @ np.asarray(load, dtype=float)
    weights = np.where(
        lam * t > 1e-14, (1.0 - np.exp(-lam * t)) / lam, t * (1.0 - lam * t / 2.0)
    )
    return vecs @ (weights * coeff)


def exact_propagator(m_rho, stiffness, load, t: float) -> np.ndarray:
    """Matrix-exponential form (I - exp(-M_rho^{-1} K t)) K^{-1} f.

    Optional second oracle under the same guard.  The sign in front of the
    exponential is the one consistent with decay to the steady state
    K^{-1} f; see `spectral_reference` for the equivalent eigenform.
    """
    n = m_rho.shape[0]
    if n > DENSE_EIG_GUARD:
        raise GuardError(f"exact_propagator limited to n <= {DENSE_EIG_GUARD}")
    Kd = _dense(stiffness)
    Md = _dense(m_rho)
    prop = np.eye(n) - sla.expm(-np.linalg.solve(Md, Kd) * t)
    return prop @ np.linalg.solve(Kd, np.asarray(load, dtype=float))


def steady_state(stiffness_factor: SPDFactor, load: np.ndarray) -> np.ndarray:
    """Long-time limit K^{-1} f of the propagated solution."""
    return stiffness_factor.solve(load)


def thermal_time_constant(m_rho, stiffness) -> float:
    """Slowest decay time 1/lambda_min of the (K, M_rho) pencil.

    Uses inverse power iteration on K^{-1} M_rho, which is self-adjoint in
    the M_rho inner product.
    """
    factor = SPDFactor(stiffness)
    m = sp.csr_matrix(m_rho)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(m.shape[0])
    lam = 0.0
    for _ in range(200):
        w = factor.solve(m @ v)
        new_lam = float(v @ (m @ w)) / float(v @ (m @ v))
        w /= np.linalg.norm(w)
        if abs(new_lam - lam) <= 1e-10 * abs(new_lam):
            lam = new_lam
            break
        v, lam = w, new_lam
    return lam


def _dense(mat) -> np.ndarray:
    return mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)


# ---------------------------------------------------------------------------
# forward-map blocks
# ---------------------------------------------------------------------------


@dataclass
class ForwardBlocks:
    """Rows of the source-to-measurement map, internal block above boundary.

    Within each block rows are time-major: row (j * m_sensors + i) holds the
    reading of sensor i at observation time t_{j+1}.  The boundary block is
    either a dense array or deferred to a reduced operator held elsewhere.
    """

    f_int: np.ndarray | None
    f_bdry: np.ndarray | None
    n_obs: int
    n: int

    @property
    def m_int(self) -> int:
        return 0 if self.f_int is None else self.f_int.shape[0] // self.n_obs

    @property
    def m_bdry(self) -> int:
        return 0 if self.f_bdry is None else self.f_bdry.shape[0] // self.n_obs

    def stacked(self) -> np.ndarray:
        parts = [b for b in (self.f_int, self.f_bdry) if b is not None]
        if not parts:
            return np.zeros((0, self.n))
        return np.vstack(parts)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.stacked() @ np.asarray(x, dtype=float)

    def split_data(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k = self.m_int * self.n_obs
        y = np.asarray(y)
        return y[:k], y[k:]


def assemble_forward_rows(
    mass: sp.spmatrix,
    propagator: MidpointPropagator,
    sensor_rows,
    chunk: int = 64,
) -> np.ndarray:
    """Rows of the forward map for one sensor group via transposition.

    For each sensor row b of the spatial measurement matrix, one midpoint
    propagation with load b^T yields the solution snapshots at every
    observation time; multiplying by the mass matrix gives the forward-map
    rows of that sensor at all times in a single sweep.  Output shape is
    (m_sensors * n_obs, n) in time-major layout.
    """
    rows = sensor_rows.tocsr() if sp.issparse(sensor_rows) else sp.csr_matrix(sensor_rows)
    m_s, n = rows.shape
    n_obs = propagator.grid.n_obs
    if m_s == 0:
        return np.zeros((0, n))
    out = np.empty((m_s * n_obs, n))
    for start in range(0, m_s, chunk):
        stop = min(start + chunk, m_s)
        loads = rows[start:stop].T.toarray()
        snaps = propagator.observe(loads)  # (n_obs, n, k)
        for j in range(n_obs):
            out[j * m_s + start : j * m_s + stop, :] = (mass @ snaps[j]).T
    return out


def apply_forward(blocks: ForwardBlocks, x: np.ndarray) -> np.ndarray:
    """Simulated (noise-free) measurement vector for a nodal source."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != blocks.n:
        raise ValueError(f"source has {x.shape[0]} entries, expected {blocks.n}")
    return blocks.apply(x)
