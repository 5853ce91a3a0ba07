"""A-optimality target, its position gradient, and the two design optimizers.

The target is the trace of the (reduced) posterior covariance in a chosen
seminorm: mode "M" weighs by the FE mass matrix (L2 distance of source
fields), mode "L" by the prior precision.  With C^T = L^{-1} F~^T and
H = F~ F~^T + Gamma~, the mode-M value is

    Phi(p) = tr(Gamma_pr M) - tr(H(p)^{-1} C(p) M C(p)^T),

where the p-independent constant may be dropped for optimization.  The trace
is accumulated through the sparse mass matrix, never through an n x n dense
product.  Gradients expand the p-derivative of C and H through the internal
measurement rows only; each sensor coordinate costs one extra transposed
propagation, batched per iterate.

`sliding_sensors_optimize` is projected steepest descent with Armijo
backtracking.  `sparsify_design` is the fixed-candidate reference method:
per-candidate weights in [0, 1] scale the measurement rows, a concave
penalty with a continuation schedule drives them toward binary values, and
the surviving candidates are returned as a design.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import DesignInfeasibleError
from .sensing import (
    SensorDesign,
    build_internal_sensor_rows,
    internal_row_derivatives,
    overlap_penalty,
)
from .reduction import ReducedBoundaryOp, prior_condition, reduce_boundary_operator
from .stepping import MidpointPropagator, assemble_forward_rows


@dataclass(frozen=True)
class DesignObjectiveConfig:
    mode: str = "M"  # "M": mass seminorm, "L": prior-precision seminorm
    drop_constant: bool = True
    overlap_weight: float | None = None  # None: auto-scale on first evaluation
    barrier_value: float = 1e30

    def __post_init__(self):
        if self.mode not in ("M", "L"):
            raise ValueError("seminorm mode must be 'M' or 'L'")


@dataclass
class OptTrajectory:
    positions: list
    phi_values: list
    step_sizes: list
    grad_norms: list
    termination: str = ""

    @property
    def phi_shifted(self) -> np.ndarray:
        v = np.asarray(self.phi_values)
        return v - v[0]

    @property
    def n_iterations(self) -> int:
        return len(self.positions)


class DesignProblem:
    """Fixed data of one sensor-placement problem.

    Bundles the mesh, mass matrix, shared midpoint propagator, prior, noise
    levels, the (optional) precomputed reduced boundary operator and the
    sensor template (radius, stencil, admissible region).
    """

    def __init__(
        self,
        mesh,
        mass: sp.spmatrix,
        propagator: MidpointPropagator,
        prior,
        gamma_int: float,
        template: SensorDesign,
        reduced_bdry: ReducedBoundaryOp | None = None,
        gamma_bdry: float | None = None,
        config: DesignObjectiveConfig = DesignObjectiveConfig(),
    ):
        self.mesh = mesh
        self.mass = sp.csr_matrix(mass)
        self.propagator = propagator
        self.prior = prior
        self.gamma_int = gamma_int
        self.template = template
        self.reduced_bdry = reduced_bdry
        self.gamma_bdry = gamma_bdry
        self.config = config
        self._auto_overlap: float | None = None
        self._mass_factor = None

    @property
    def mass_factor(self):
        """Factor of the mass matrix; gives the split M = A A^T used to
        evaluate traces as Frobenius norms (no cancellation noise)."""
        if self._mass_factor is None:
            from .fem import SPDFactor

            self._mass_factor = SPDFactor(self.mass)
        return self._mass_factor

    # -- building blocks ----------------------------------------------------

    def design_at(self, positions) -> SensorDesign:
        return self.template.with_positions(positions)

    def internal_rows_pr(self, design: SensorDesign, with_derivatives=False):
        """Prior-conditioned internal forward rows (and derivative rows)."""
        rows = build_internal_sensor_rows(self.mesh, design)
        mats = [rows.matrix]
        if with_derivatives:
            mats.append(internal_row_derivatives(self.mesh, design))
        stacked = sp.vstack(mats).tocsr() if with_derivatives else mats[0]
        f_rows = assemble_forward_rows(self.mass, self.propagator, stacked)
        f_pr = self.prior.factor.solve_lt(f_rows.T).T
        m_s = rows.matrix.shape[0]
        n_obs = self.propagator.grid.n_obs
        m_tot = stacked.shape[0]
        f_int = np.empty((m_s * n_obs, f_pr.shape[1]))
        for j in range(n_obs):
            f_int[j * m_s : (j + 1) * m_s] = f_pr[j * m_tot : j * m_tot + m_s]
        if not with_derivatives:
            return f_int, None
        n_d = m_tot - m_s
        f_der = np.empty((n_d * n_obs, f_pr.shape[1]))
        for j in range(n_obs):
            f_der[j * n_d : (j + 1) * n_d] = f_pr[j * m_tot + m_s : (j + 1) * m_tot]
        return f_int, f_der

    def stack_operator(self, f_int_pr: np.ndarray | None):
        parts, noise = [], []
        m_rows = 0
        if f_int_pr is not None and f_int_pr.shape[0]:
            parts.append(f_int_pr)
            noise.append(np.full(f_int_pr.shape[0], self.gamma_int**2))
            m_rows = f_int_pr.shape[0]
        if self.reduced_bdry is not None and self.reduced_bdry.rank:
            parts.append(self.reduced_bdry.rows_pr())
            noise.append(np.full(self.reduced_bdry.rank, self.gamma_bdry**2))
        if not parts:
            return None, None, m_rows
        return np.vstack(parts), np.concatenate(noise), m_rows

    def constant_term(self) -> float:
        if self.config.mode == "L":
            return float(self.prior.n)
        return self.prior.trace_covariance_against(self.mass)

    def overlap_weight_for(self, trace_scale: float) -> float:
        if self.config.overlap_weight is not None:
            return self.config.overlap_weight
        if self._auto_overlap is None:
            self._auto_overlap = (
                1e-2 * abs(trace_scale) / (2.0 * self.template.radius) ** 2
            )
        return self._auto_overlap

    # -- objective ------------------------------------------------------------

    def phi(self, positions) -> float:
        value, _, _ = self._evaluate(positions, with_grad=False)
        return value

    def phi_and_grad(self, positions) -> tuple[float, np.ndarray]:
        value, grad, _ = self._evaluate(positions, with_grad=True)
        return value, grad

    def trace_term(self, positions) -> float:
        """The p-dependent data correction tr(H^{-1} C A^T A C^T); sets the
        scale of tolerances and of the auto overlap weight."""
        _, _, trace = self._evaluate(positions, with_grad=False)
        return trace

    def trace_from_rows(self, f_int_pr: np.ndarray | None) -> float:
        """Data-correction trace for prebuilt prior-conditioned internal rows."""
        ops, noise_diag, _ = self.stack_operator(f_int_pr)
        if ops is None:
            return 0.0
        H = ops @ ops.T + np.diag(noise_diag)
        h_factor = sla.cho_factor(H, lower=True)
        if self.config.mode == "M":
            ct = self.prior.factor.solve_l(ops.T)
            ca = self.mass_factor.apply_l(ct).T
            x = sla.solve_triangular(h_factor[0], ca, lower=True)
        else:
            x = sla.solve_triangular(h_factor[0], ops, lower=True)
        return float(np.einsum("ij,ij->", x, x))

    def _evaluate(self, positions, with_grad: bool):
        cfg = self.config
        design = self.design_at(positions)
        try:
            f_int, f_der = self.internal_rows_pr(design, with_derivatives=with_grad)
        except DesignInfeasibleError:
            grad = np.zeros_like(design.positions) if with_grad else None
            return cfg.barrier_value, grad, 0.0

        ops, noise_diag, m_int_rows = self.stack_operator(f_int)
        constant = 0.0 if cfg.drop_constant else self.constant_term()
        if ops is None:
            grad = np.zeros_like(design.positions) if with_grad else None
            return constant, grad, 0.0

        H = ops @ ops.T + np.diag(noise_diag)
        h_factor = sla.cho_factor(H, lower=True)
        k = ops.shape[0]

        # traces are evaluated as squared Frobenius norms of triangular
        # solves; the sum of squares avoids the cancellation noise of
        # tr(H^{-1} S) when H has a large dynamic range
        if cfg.mode == "M":
            ct = self.prior.factor.solve_l(ops.T)  # n x k
            ca = self.mass_factor.apply_l(ct).T  # C L_M^T, k x n
            x = sla.solve_triangular(h_factor[0], ca, lower=True)
            trace = float(np.einsum("ij,ij->", x, x))
        else:
            x = sla.solve_triangular(h_factor[0], ops, lower=True)
            trace = float(np.einsum("ij,ij->", x, x))

        value = constant - trace
        pen_value, pen_grad = 0.0, None
        m_int = design.m_int
        if m_int > 1:
            w = self.overlap_weight_for(trace)
            pen_value, pen_grad = overlap_penalty(design, w)
            value += pen_value
        if not with_grad:
            return value, None, trace

        grad = np.zeros((m_int, 2))
        if m_int:
            n_obs = self.propagator.grid.n_obs
            if cfg.mode == "M":
                s_small = ct.T @ (self.mass @ ct)
                y_mat = self.prior.factor.solve_lt(self.mass @ ct)
                y_mat = sla.cho_solve(h_factor, y_mat.T).T  # n x k
                z = sla.cho_solve(h_factor, sla.cho_solve(h_factor, s_small).T)
                w_mat = (z @ ops).T  # n x k
            else:
                h_inv = sla.cho_solve(h_factor, np.eye(k))
                y_mat = ops.T @ h_inv
                z = h_inv @ (ops @ ops.T) @ h_inv
                w_mat = ops.T @ z
            delta = y_mat - w_mat  # n x k
            for s in range(m_int):
                ti_rows = np.arange(n_obs) * m_int + s
                for axis in (0, 1):
                    der_rows = f_der[np.arange(n_obs) * (2 * m_int) + 2 * s + axis]
                    grad[s, axis] = -2.0 * float(
                        np.einsum("tn,nt->", der_rows, delta[:, ti_rows])
                    )
        if pen_grad is not None:
            grad += pen_grad
        return value, grad, trace


def phi_A(problem: DesignProblem, positions) -> float:
    """A-optimality target at the given internal sensor positions."""
    return problem.phi(positions)


def grad_phi_A(problem: DesignProblem, positions) -> np.ndarray:
    """Gradient of the target with respect to the (m_int, 2) positions."""
    _, grad = problem.phi_and_grad(positions)
    return grad


# ---------------------------------------------------------------------------
# sliding sensors
# ---------------------------------------------------------------------------


def _masked_rescue(problem, p, value, grad, region, diam, armijo_c, step_tol):
    """Retry the projected search with the steepest components masked out.

    The measurement rows are only piecewise smooth in the positions; a
    sensor coordinate resting in a kink valley reports a large one-sided
    derivative that is not a descent direction and drowns the valid
    components.  Masking the largest entries in doubling batches restores a
    usable direction built from the still-smooth coordinates.  Returns
    (trial, value, step) or None.
    """
    order = np.argsort(-np.abs(grad).ravel())
    n_coords = order.size
    masked = grad.copy().ravel()
    k = 1
    while k < n_coords:
        masked[order[:k]] = 0.0
        direction = masked.reshape(grad.shape)
        dmax = float(np.abs(direction).max())
        if dmax == 0.0:
            return None
        step = 0.01 * diam / dmax
        for _ in range(10):
            trial = p - step * direction
            if region is not None:
                trial = region.project(trial)
            move = trial - p
            if float(np.abs(move).max()) < step_tol:
                break
            trial_value = problem.phi(trial)
            if trial_value <= value + armijo_c * float((direction * move).sum()):
                return trial, trial_value, step
            step *= 0.5
        k *= 2
    return None


def sliding_sensors_optimize(
    problem: DesignProblem,
    p0,
    max_iters: int = 200,
    armijo_c: float = 1e-4,
    max_halvings: int = 30,
    grad_tol_rel: float = 1e-6,
    step_tol_rel: float = 1e-12,
) -> OptTrajectory:
    """Projected steepest descent on the sensor positions.

    The first trial step moves the steepest coordinate by a tenth of the
    domain diameter; accepted steps double the next trial.  Iterates are
    projected onto the admissible region, and the gradient/step tolerances
    scale with the initial data-correction magnitude over the diameter.
    When the gradient line search fails at a kink, single-coordinate probes
    keep the descent going before the run is declared converged.
    """
    p = np.atleast_2d(np.asarray(p0, dtype=float)).copy()
    region = problem.template.region
    if region is not None and not np.all(region.contains(p)):
        raise DesignInfeasibleError("initial design outside the admissible region")

    diam = problem.mesh.diameter()
    value, grad, trace0 = problem._evaluate(p, with_grad=True)
    scale = max(abs(trace0), 1e-300)
    grad_tol = grad_tol_rel * scale / diam
    step_tol = step_tol_rel * diam

    traj = OptTrajectory([p.copy()], [value], [0.0], [float(np.abs(grad).max())])
    step = 0.1 * diam / max(float(np.abs(grad).max()), 1e-300)

    for _ in range(max_iters):
        if float(np.abs(grad).max()) < grad_tol:
            traj.termination = "gradient"
            return traj
        accepted = False
        for _ in range(max_halvings):
            trial = p - step * grad
            if region is not None:
                trial = region.project(trial)
            move = trial - p
            if float(np.abs(move).max()) < step_tol:
                break
            trial_value = problem.phi(trial)
            if trial_value <= value + armijo_c * float((grad * move).sum()):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            rescue = _masked_rescue(
                problem, p, value, grad, region, diam, armijo_c, step_tol
            )
            if rescue is None:
                traj.termination = "step"
                return traj
            trial, trial_value, step = rescue
        p = trial
        value, grad, _ = problem._evaluate(p, with_grad=True)
        traj.positions.append(p.copy())
        traj.phi_values.append(value)
        traj.step_sizes.append(step)
        traj.grad_norms.append(float(np.abs(grad).max()))
        step *= 2.0
    traj.termination = "max_iters"
    return traj


# ---------------------------------------------------------------------------
# l0-style sparsification on a fixed candidate grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SparsifyConfig:
    rank: int = 150  # reduction rank for the candidate-row operator
    power_iters: int = 1
    inner_iters: int = 60
    max_rounds: int = 6
    q_start: float = 1.0
    q_decay: float = 0.7
    q_floor: float = 0.2
    gamma_growth: float = 2.0
    binary_eps: float = 0.05
    ladder: tuple = (0.5, 1.0, 2.0)  # penalty-scale multipliers tried first
    search_rounds: int = 5  # extra bisection steps toward the survivor hint


@dataclass
class SparsificationState:
    candidates: np.ndarray
    weights: np.ndarray
    selected: np.ndarray
    binary: bool
    history: list = field(default_factory=list)
    phi_weighted: float = np.nan

    @property
    def n_selected(self) -> int:
        return int(self.selected.sum())

    def selected_positions(self) -> np.ndarray:
        return self.candidates[self.selected]


class _WeightedObjective:
    """tr(Gamma_post M) as a function of the candidate weights.

    Built on a randomized SVD of the prior-conditioned candidate operator so
    each weight evaluation works in the reduced coordinates: with
    U, S, V the factors and W the per-row weights,

        Phi(w) = const - tr(G(I+G)^{-1} S_c),
        G = (1/gamma^2) S U^T W^2 U S,   S_c = (L^{-1}V)^T M (L^{-1}V).
    """

    def __init__(self, problem: DesignProblem, candidates: np.ndarray, cfg: SparsifyConfig, seed):
        if problem.reduced_bdry is not None and problem.reduced_bdry.rank:
            raise DesignInfeasibleError(
                "sparsification supports internal-only measurement setups"
            )
        if problem.config.mode != "M":
            raise ValueError("sparsification is implemented for the mass seminorm")
        self.problem = problem
        self.candidates = np.atleast_2d(candidates)
        self.n_cand = self.candidates.shape[0]
        design = problem.design_at(self.candidates)
        rows = build_internal_sensor_rows(problem.mesh, design)
        f_rows = assemble_forward_rows(problem.mass, problem.propagator, rows.matrix)
        op = prior_condition(f_rows, problem.prior.factor)
        rank = min(cfg.rank, *op.shape)
        red = reduce_boundary_operator(op, rank, cfg.power_iters, seed=seed)
        self.us = red.u * red.sigma[None, :]  # (n_cand * n_obs, r)
        ct = problem.prior.factor.solve_l(red.vt.T)  # n x r
        self.s_small = ct.T @ (problem.mass @ ct)
        lam, q = sla.eigh(self.s_small)
        self.s_sqrt = q * np.sqrt(np.clip(lam, 0.0, None))
        self.s_trace = float(np.trace(self.s_small))
        self.n_obs = problem.propagator.grid.n_obs
        self.inv_var = 1.0 / problem.gamma_int**2

    def _factorized(self, weights: np.ndarray):
        w_rows = np.tile(weights, self.n_obs)
        g = self.inv_var * (self.us.T @ (w_rows[:, None] ** 2 * self.us))
        r = g.shape[0]
        factor = sla.cho_factor(np.eye(r) + g, lower=True)
        x = sla.solve_triangular(factor[0], self.s_sqrt, lower=True)
        corr = self.s_trace - float(np.einsum("ij,ij->", x, x))
        return -corr, factor

    def value(self, weights: np.ndarray) -> float:
        return self._factorized(weights)[0]

    def value_and_grad(self, weights: np.ndarray):
        value, factor = self._factorized(weights)
        k_w = sla.cho_solve(factor, sla.cho_solve(factor, self.s_small).T)
        yw = self.us @ k_w
        row_terms = np.einsum("ij,ij->i", self.us, yw)
        per_cand = row_terms.reshape(self.n_obs, self.n_cand).sum(axis=0)
        grad = -2.0 * self.inv_var * weights * per_cand
        return value, grad  # Phi minus its constant


def sparsify_design(
    problem: DesignProblem,
    candidates: np.ndarray,
    target_hint: int | None = None,
    cfg: SparsifyConfig = SparsifyConfig(),
    seed=0,
) -> SparsificationState:
    """Weight-driven selection of sensors from a fixed candidate grid.

    Minimizes the weighted A-optimality value plus gamma_s * sum w^q over
    the box [0,1]^N by projected gradient descent, with a continuation loop
    that raises gamma_s and lowers q until the weights are epsilon-binary.
    A small ladder of base penalties is tried and the run whose survivor
    count is closest to `target_hint` is returned (the count cannot be
    prescribed exactly; it reacts to the penalty strength).
    """
    objective = _WeightedObjective(problem, candidates, cfg, seed)
    n_cand = objective.n_cand

    # base penalty from the per-candidate marginal values at full weights:
    # with the linear (q = 1) penalty a candidate survives roughly when its
    # data gradient exceeds gamma_s, so the survivor-count hint picks the
    # matching gradient quantile as the starting scale
    _, base_grad = objective.value_and_grad(np.ones(n_cand))
    magnitudes = np.abs(base_grad)
    if target_hint is not None and 0 < target_hint < n_cand:
        gamma_base = float(np.quantile(magnitudes, 1.0 - target_hint / n_cand))
    else:
        gamma_base = float(np.median(magnitudes))
    gamma_base = max(gamma_base, 1e-300)

    if target_hint is None:
        best = _run_continuation(objective, gamma_base, cfg)
    else:
        best = _survivor_search(objective, gamma_base, target_hint, cfg)
    best.phi_weighted = objective.value(best.weights)
    return best


def _survivor_search(objective, gamma_base, target, cfg: SparsifyConfig):
    """Try a small multiplier ladder, then bisect (survivor count is close
    to monotone decreasing in the penalty scale) toward the hinted count."""
    states: dict[float, SparsificationState] = {}

    def run(mult: float) -> SparsificationState:
        if mult not in states:
            states[mult] = _run_continuation(objective, gamma_base * mult, cfg)
        return states[mult]

    for mult in cfg.ladder:
        if run(mult).n_selected == target:
            break
    for _ in range(cfg.search_rounds):
        counts = sorted((m, st.n_selected) for m, st in states.items())
        if any(c == target for _, c in counts):
            break
        lo = max((m for m, c in counts if c > target), default=None)
        hi = min((m for m, c in counts if c < target), default=None)
        if lo is None:
            nxt = counts[0][0] / 2.0
        elif hi is None:
            nxt = counts[-1][0] * 2.0
        elif hi > lo:
            nxt = float(np.sqrt(lo * hi))
        else:
            break
        if nxt in states:
            break
        run(nxt)
    return min(states.values(), key=lambda st: abs(st.n_selected - target))


def _run_continuation(objective: _WeightedObjective, gamma_s: float, cfg: SparsifyConfig):
    n_cand = objective.n_cand
    w = np.full(n_cand, 0.5)
    q = cfg.q_start
    history = []
    binary = False
    for _ in range(cfg.max_rounds):
        w, iters = _projected_descent(objective, w, gamma_s, q, cfg.inner_iters)
        history.append({"q": q, "gamma_s": gamma_s, "iterations": iters})
        if np.all((w < cfg.binary_eps) | (w > 1.0 - cfg.binary_eps)):
            binary = True
            break
        q = max(q * cfg.q_decay, cfg.q_floor)
        gamma_s *= cfg.gamma_growth
    selected = w > 0.5
    return SparsificationState(
        candidates=objective.candidates,
        weights=w,
        selected=selected,
        binary=binary,
        history=history,
    )


def _projected_descent(objective, w0, gamma_s, q, max_iters, armijo_c=1e-4):
    eps = 1e-8
    w = np.clip(w0, 0.0, 1.0)

    def penalty(weights):
        return gamma_s * float(np.sum(weights**q))

    def total_with_grad(weights):
        val, grad = objective.value_and_grad(weights)
        grad = grad + gamma_s * q * (weights + eps) ** (q - 1.0)
        return val + penalty(weights), grad

    value, grad = total_with_grad(w)
    step = 0.25 / max(float(np.abs(grad).max()), 1e-300)
    iters = 0
    for _ in range(max_iters):
        iters += 1
        accepted = False
        for _ in range(30):
            trial = np.clip(w - step * grad, 0.0, 1.0)
            move = trial - w
            if float(np.abs(move).max()) < 1e-12:
                break
            t_value = objective.value(trial) + penalty(trial)
            if t_value <= value + armijo_c * float(grad @ move):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        w = trial
        value, grad = total_with_grad(w)
        step *= 2.0
    return w, iters
