"""Gaussian prior/noise models, posterior mean and covariance, synthetic data.

The prior precision is the elliptic FE matrix from `assemble_prior_precision`
and is carried together with its factor, so covariance applications are two
triangular solves.  Posterior formulas come in the normal-equation form and
the Woodbury form; both are kept because their agreement is one of the
package's correctness checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import DataError, GuardError
from .fem import SPDFactor, assemble_prior_precision
from .mesh import Mesh
from .stepping import ForwardBlocks

DENSE_POSTERIOR_GUARD = 3000


class PriorModel:
    """Gaussian prior with elliptic sparse precision and zero default mean."""

    def __init__(self, precision: sp.spmatrix, mean: np.ndarray | None = None):
        self.precision = sp.csr_matrix(precision)
        self.factor = SPDFactor(self.precision)
        n = self.precision.shape[0]
        self.mean = np.zeros(n) if mean is None else np.asarray(mean, dtype=float)
        self._trace_cache: dict[int, float] = {}

    @classmethod
    def from_mesh(cls, mesh: Mesh, alpha, beta, mean=None) -> "PriorModel":
        return cls(assemble_prior_precision(mesh, beta, alpha), mean)

    @property
    def n(self) -> int:
        return self.precision.shape[0]

    def apply_covariance(self, v: np.ndarray) -> np.ndarray:
        return self.factor.solve(v)

    def trace_covariance_against(self, weight: sp.spmatrix) -> float:
        """tr(Gamma_pr W) for sparse symmetric W; cached per weight object."""
        key = id(weight)
        if key not in self._trace_cache:
            if self.n > DENSE_POSTERIOR_GUARD + 1000:
                raise GuardError("prior trace requires a dense covariance pass")
            cov = self.factor.solve(np.eye(self.n))
            self._trace_cache[key] = float(
                sp.csr_matrix(weight).multiply(cov).sum()
            )
        return self._trace_cache[key]


@dataclass(frozen=True)
class NoiseModel:
    """Independent Gaussian noise, one standard deviation per sensor group.

    Standard deviations are in kelvins; either may be None when that sensor
    group is absent.  Inversion paths require the present deviations to be
    strictly positive.
    """

    gamma_int: float | None
    gamma_bdry: float | None

    def variances(self, blocks: ForwardBlocks) -> np.ndarray:
        parts = []
        if blocks.m_int:
            if not self.gamma_int or self.gamma_int <= 0:
                raise DataError("internal noise deviation must be positive")
            parts.append(np.full(blocks.m_int * blocks.n_obs, self.gamma_int**2))
        if blocks.m_bdry:
            if not self.gamma_bdry or self.gamma_bdry <= 0:
                raise DataError("boundary noise deviation must be positive")
            parts.append(np.full(blocks.m_bdry * blocks.n_obs, self.gamma_bdry**2))
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    def deviations(self, blocks: ForwardBlocks) -> np.ndarray:
        g_int = self.gamma_int or 0.0
        g_bdry = self.gamma_bdry or 0.0
        return np.concatenate(
            [
                np.full(blocks.m_int * blocks.n_obs, g_int),
                np.full(blocks.m_bdry * blocks.n_obs, g_bdry),
            ]
        )


def calibrate_noise(clean_internal, clean_boundary, percent: float) -> NoiseModel:
    """Deviation = 0.01 * percent * max absolute clean reading, per group."""
    def level(block):
        if block is None or np.size(block) == 0:
            return None
        peak = float(np.max(np.abs(block)))
        if peak == 0.0:
            raise DataError("cannot calibrate noise against all-zero data")
        return 0.01 * percent * peak

    g_int = level(clean_internal)
    g_bdry = level(clean_boundary)
    if g_int is None and g_bdry is None:
        raise DataError("no data to calibrate noise against")
    return NoiseModel(g_int, g_bdry)


def simulate_measurements(
    blocks: ForwardBlocks, f_true: np.ndarray, noise: NoiseModel, seed
) -> np.ndarray:
    """y = F f_true + eps with eps ~ N(0, Gamma_noise), seeded."""
    rng = np.random.default_rng(seed)
    clean = blocks.apply(f_true)
    std = noise.deviations(blocks)
    return clean + std * rng.standard_normal(clean.shape[0])


def posterior_mean(
    prior: PriorModel,
    noise: NoiseModel,
    blocks: ForwardBlocks,
    y: np.ndarray,
    method: str = "auto",
) -> np.ndarray:
    """Posterior mean of the nodal source.

    method 'normal' solves the n x n normal equations densely (small n);
    'woodbury' solves the m x m data-space system; 'auto' picks by shape.
    The two paths agree to solver accuracy wherever both are allowed.
    """
    F = blocks.stacked()
    m, n = F.shape
    y = np.asarray(y, dtype=float)
    if m == 0:
        return prior.mean.copy()
    var = noise.variances(blocks)
    if method == "auto":
        method = "woodbury" if m <= n or n > DENSE_POSTERIOR_GUARD else "normal"
    if method == "normal":
        if n > DENSE_POSTERIOR_GUARD:
            raise GuardError(f"normal-equation path limited to n <= {DENSE_POSTERIOR_GUARD}")
        A = prior.precision.toarray() + F.T @ (F / var[:, None])
        rhs = prior.precision @ prior.mean + F.T @ (y / var)
        factor = sla.cho_factor(A, lower=True)
        x = sla.cho_solve(factor, rhs)
        x += sla.cho_solve(factor, rhs - A @ x)  # one refinement step
        return x
    if method == "woodbury":
        cov_Ft = prior.factor.solve(F.T)  # n x m
        G = F @ cov_Ft + np.diag(var)
        resid = y - F @ prior.mean
        factor = sla.cho_factor(G, lower=True)
        sol = sla.cho_solve(factor, resid)
        sol += sla.cho_solve(factor, resid - G @ sol)
        return prior.mean + cov_Ft @ sol
    raise ValueError(f"unknown posterior method {method!r}")


def posterior_covariance_dense(
    prior: PriorModel,
    noise: NoiseModel,
    blocks: ForwardBlocks,
    form: str = "precision",
) -> np.ndarray:
    """Dense posterior covariance for reference use (n guarded).

    form 'precision' inverts the normal-equation matrix; 'woodbury' subtracts
    the data correction from the dense prior covariance.
    """
    n = prior.n
    if n > DENSE_POSTERIOR_GUARD:
        raise GuardError(f"dense posterior limited to n <= {DENSE_POSTERIOR_GUARD}")
    F = blocks.stacked()
    if form == "precision":
        A = prior.precision.toarray()
        if F.shape[0]:
            var = noise.variances(blocks)
            A = A + F.T @ (F / var[:, None])
        cov = sla.cho_solve(sla.cho_factor(A, lower=True), np.eye(n))
        return 0.5 * (cov + cov.T)
    if form == "woodbury":
        cov_pr = prior.factor.solve(np.eye(n))
        if not F.shape[0]:
            return 0.5 * (cov_pr + cov_pr.T)
        var = noise.variances(blocks)
        cov_Ft = prior.factor.solve(F.T)
        G = F @ cov_Ft + np.diag(var)
        corr = cov_Ft @ sla.cho_solve(sla.cho_factor(G, lower=True), cov_Ft.T)
        cov = cov_pr - corr
        return 0.5 * (cov + cov.T)
    raise ValueError(f"unknown covariance form {form!r}")


def sample_prior(prior: PriorModel, seed=None, rng=None) -> np.ndarray:
    """Draw from the prior: mean + L^{-1} z with z standard normal."""
    if rng is None:
        rng = np.random.default_rng(seed)
    z = rng.standard_normal(prior.n)
    return prior.mean + prior.factor.solve_l(z)


def reconstruction_error(xhat: np.ndarray, f_true: np.ndarray, mass: sp.spmatrix) -> float:
    """Relative L2 error of the reconstruction against the true nodal source."""
    f_true = np.asarray(f_true, dtype=float)
    denom = float(f_true @ (mass @ f_true))
    if denom <= 0.0:
        raise DataError("reconstruction error undefined for zero truth")
    diff = np.asarray(xhat, dtype=float) - f_true
    return float(np.sqrt((diff @ (mass @ diff)) / denom))
