"""Config-driven reproduction of the two reference experiments.

Experiment one runs on the unit square: steady versus transient boundary
reconstructions, sliding-sensor optimization of 16 internal sensors,
sparsification on a candidate grid, and the target-versus-error sweep over
randomly perturbed sensor configurations.  Experiment two runs on the
half-transformer cross section: reduced boundary operator, sliding-sensor
optimization for several sensor counts, grid-versus-optimized reconstruction
errors, and a rank sweep against the dense reference on a coarsened mesh.

Every random draw is seeded through a (seed, purpose, index) sequence, so a
report's `results` section is byte-identical across runs with the same
config; timings and timestamps live in `meta`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
import traceback
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.stats import spearmanr

from . import __version__ as _pkg_version
from .bayes import (
    NoiseModel,
    PriorModel,
    calibrate_noise,
    posterior_mean,
    reconstruction_error,
    simulate_measurements,
)
from .design import (
    DesignObjectiveConfig,
    DesignProblem,
    SparsifyConfig,
    sliding_sensors_optimize,
    sparsify_design,
)
from .fem import MaterialModel, SPDFactor, assemble_mass, assemble_stiffness
from .mesh import LABEL_COIL, LABEL_CORE, DomainSpec, Mesh, build_transformer_mesh, build_unit_square_mesh
from .reduction import (
    ReducedBoundaryOp,
    ReducedPosterior,
    assemble_reduced_forward,
    prior_condition,
    reduce_boundary_operator,
    reduce_data,
)
from .sensing import AdmissibleRegion, SensorDesign, build_boundary_pixel_rows, build_internal_sensor_rows
from .sources import generate_random_source, true_source_transformer
from .stepping import (
    ForwardBlocks,
    MidpointPropagator,
    TimeGrid,
    assemble_forward_rows,
    thermal_time_constant,
)

SCHEMA_VERSION = 1

# seed stream purposes
_S_SOURCE = 11
_S_BUMP = 12
_S_NOISE_A = 13
_S_CONFIG = 14
_S_CONFIG_NOISE = 15
_S_RSVD = 16
_S_SPARSIFY = 17
_S_EXP2_NOISE = 21


def child_seed(seed: int, *codes: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *[int(c) for c in codes]])


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Exp1Config:
    refinement: int = 44
    final_time: float = 0.6
    n_obs: int = 20
    substeps: int = 10
    boundary_pixels: int = 76
    noise_percent: float = 0.5
    alpha: float = 10.0
    beta: float = 0.1
    n_sensors: int = 16
    sensor_radius: float = 0.05
    stencil_points: int = 7
    margin: float = 0.05
    n_sources: int = 200
    n_configs: int = 100
    candidate_grid: int = 20
    sparsify_target: int = 16
    opt_max_iters: int = 120
    steady_time_factor: float = 5.0
    steady_substeps: int = 50
    seed: int = 1
    stages: tuple = ("a", "b", "c", "d")


@dataclass(frozen=True)
class Exp2Config:
    target_h: float = 7.5e-4
    coil_rect: tuple = (0.008, 0.016, -0.020, 0.020)
    interface_band_splits: int = 1
    kappa_core: float = 10.0
    rho_core: float = 3.43e6
    kappa_coil: float = 26.0
    rho_coil: float = 3.26e6
    h_robin: float = 14.0
    d_ins: float = 5.0e-4
    kappa_ins: float = 0.028
    coil_loss_density: float = 2.557e5
    core_loss_scale: float = 1.0e5
    core_loss_decay: float = 150.0
    depth: float = 0.025
    final_time: float = 2.0e4
    n_obs: int = 20
    substeps: int = 10
    boundary_pixels: int = 60
    noise_percent: float = 0.1
    alpha: float = 1.0e-8
    beta: float = 1.0e-7
    sensor_radius: float = 5.0e-4
    stencil_points: int = 7
    margin: float = 1.0e-3
    sensor_counts: tuple = (18, 26)
    sensor_sweep: tuple = ()
    rank: int = 120
    oversample: int = 10
    power_iters: int = 2
    opt_max_iters: int = 60
    run_rank_sweep: bool = True
    rank_sweep: tuple = (10, 20, 40, 80, 120)
    rank_sweep_h: float = 1.7e-3
    seed: int = 1


def config_hash(cfg) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> tuple[str, Exp1Config | Exp2Config]:
    """Read {"experiment": "one"|"two", ...field overrides...} from JSON."""
    with open(path) as fh:
        raw = json.load(fh)
    name = raw.pop("experiment", "one")
    cls = Exp1Config if name == "one" else Exp2Config
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - fields
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in ("stages", "sensor_counts", "sensor_sweep", "rank_sweep", "coil_rect"):
        if key in raw and isinstance(raw[key], list):
            raw[key] = tuple(raw[key])
    return name, cls(**raw)


# ---------------------------------------------------------------------------
# problem bundles
# ---------------------------------------------------------------------------


@dataclass
class SquareProblem:
    cfg: Exp1Config
    mesh: Mesh
    mass: object
    stiffness: object
    grid: TimeGrid
    propagator: MidpointPropagator
    prior: PriorModel
    region: AdmissibleRegion
    template: SensorDesign

    def grid_positions(self) -> np.ndarray:
        side = int(round(np.sqrt(self.cfg.n_sensors)))
        ticks = np.arange(1, side + 1) / (side + 1)
        gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])


def build_square_problem(cfg: Exp1Config) -> SquareProblem:
    mesh = build_unit_square_mesh(cfg.refinement)
    mass = assemble_mass(mesh, 1.0)
    material = MaterialModel.homogeneous(kappa=1.0, rho=1.0, h=1.0)
    stiffness = assemble_stiffness(mesh, material)
    grid = TimeGrid(cfg.final_time, cfg.n_obs, cfg.substeps)
    propagator = MidpointPropagator(mass, stiffness, grid)
    prior = PriorModel.from_mesh(mesh, alpha=cfg.alpha, beta=cfg.beta)
    region = AdmissibleRegion.from_mesh(mesh, cfg.margin)
    template = SensorDesign(
        np.zeros((0, 2)), cfg.sensor_radius, cfg.stencil_points, region
    )
    return SquareProblem(cfg, mesh, mass, stiffness, grid, propagator, prior, region, template)


@dataclass
class TransformerProblem:
    cfg: Exp2Config
    mesh: Mesh
    mass: object
    m_rho: object
    stiffness: object
    grid: TimeGrid
    propagator: MidpointPropagator
    prior: PriorModel
    region: AdmissibleRegion
    template: SensorDesign
    pixel_rows: object
    f_bdry: np.ndarray
    f_true: np.ndarray
    gamma_int: float
    gamma_bdry: float
    reduced: ReducedBoundaryOp | None = None

    def core_lattice(self, count: int) -> np.ndarray:
        """Regular sensor lattice filling the admissible core region.

        A uniform candidate grid over the domain is filtered to the feasible
        region and subsampled evenly (x-major order) down to `count` points,
        so layouts are deterministic for every sensor count.
        """
        (x0, x1), (y0, y1) = self.mesh.extents
        m = self.cfg.margin
        aspect = (y1 - y0) / (x1 - x0)
        for divisions in range(2, 60):
            xs = np.linspace(x0 + m, x1 - m, divisions)
            ys = np.linspace(y0 + 2 * m, y1 - 2 * m, max(2, int(round(divisions * aspect))))
            gx, gy = np.meshgrid(xs, ys, indexing="ij")
            pts = np.column_stack([gx.ravel(), gy.ravel()])
            cand = pts[self.region.contains(pts)]
            if cand.shape[0] >= count:
                break
        idx = np.round(np.linspace(0, cand.shape[0] - 1, count)).astype(int)
        return cand[idx]


def build_transformer_problem(
    cfg: Exp2Config, target_h: float | None = None, rank: int | None = None, with_reduction=True
) -> TransformerProblem:
    spec = DomainSpec(
        coil_rect=cfg.coil_rect,
        target_h=target_h or cfg.target_h,
        interface_band_splits=cfg.interface_band_splits,
    )
    mesh = build_transformer_mesh(spec)
    material = MaterialModel(
        kappa={LABEL_CORE: cfg.kappa_core, LABEL_COIL: cfg.kappa_coil},
        rho={LABEL_CORE: cfg.rho_core, LABEL_COIL: cfg.rho_coil},
        h=cfg.h_robin,
        kappa_ins=cfg.kappa_ins,
        d_ins=cfg.d_ins,
    )
    mass = assemble_mass(mesh, 1.0)
    m_rho = assemble_mass(mesh, {LABEL_CORE: cfg.rho_core, LABEL_COIL: cfg.rho_coil})
    stiffness = assemble_stiffness(mesh, material)
    grid = TimeGrid(cfg.final_time, cfg.n_obs, cfg.substeps)
    propagator = MidpointPropagator(m_rho, stiffness, grid)
    prior = PriorModel.from_mesh(mesh, alpha=cfg.alpha, beta=cfg.beta)
    region = AdmissibleRegion.from_mesh(mesh, cfg.margin, label=LABEL_CORE)
    template = SensorDesign(np.zeros((0, 2)), cfg.sensor_radius, cfg.stencil_points, region)
    pixel_rows = build_boundary_pixel_rows(mesh, cfg.boundary_pixels)
    f_bdry = assemble_forward_rows(mass, propagator, pixel_rows.matrix)
    f_true = true_source_transformer(
        mesh, cfg.coil_loss_density, cfg.core_loss_scale, cfg.core_loss_decay
    )
    clean_bdry = f_bdry @ f_true

    problem = TransformerProblem(
        cfg, mesh, mass, m_rho, stiffness, grid, propagator, prior, region,
        template, pixel_rows, f_bdry, f_true, 0.0, 0.0,
    )
    ref_design = template.with_positions(problem.core_lattice(cfg.sensor_counts[0]))
    rows = build_internal_sensor_rows(mesh, ref_design)
    f_int_ref = assemble_forward_rows(mass, propagator, rows.matrix)
    noise = calibrate_noise(f_int_ref @ f_true, clean_bdry, cfg.noise_percent)
    problem.gamma_int = noise.gamma_int
    problem.gamma_bdry = noise.gamma_bdry

    if with_reduction:
        op = prior_condition(f_bdry, prior.factor)
        problem.reduced = reduce_boundary_operator(
            op,
            rank or cfg.rank,
            power_iters=cfg.power_iters,
            oversample=cfg.oversample,
            seed=child_seed(cfg.seed, _S_RSVD),
        )
    return problem


def design_problem_for(problem, gamma_int=None, objective=None) -> DesignProblem:
    """Sensor-placement problem bound to a built experiment bundle."""
    if isinstance(problem, TransformerProblem):
        return DesignProblem(
            problem.mesh,
            problem.mass,
            problem.propagator,
            problem.prior,
            gamma_int if gamma_int is not None else problem.gamma_int,
            problem.template,
            reduced_bdry=problem.reduced,
            gamma_bdry=problem.gamma_bdry,
            config=objective or DesignObjectiveConfig(),
        )
    return DesignProblem(
        problem.mesh,
        problem.mass,
        problem.propagator,
        problem.prior,
        gamma_int,
        problem.template,
        config=objective or DesignObjectiveConfig(),
    )


# ---------------------------------------------------------------------------
# experiment one
# ---------------------------------------------------------------------------


def exp1_design_noise_level(sp: SquareProblem) -> float:
    """Fixed internal-noise deviation used by the design target: the stated
    percentage of the peak internal reading of the first ensemble source at
    the unperturbed sensor grid."""
    src = generate_random_source(sp.mesh, child_seed(sp.cfg.seed, _S_SOURCE, 0))
    design = sp.template.with_positions(sp.grid_positions())
    rows = build_internal_sensor_rows(sp.mesh, design)
    clean = assemble_forward_rows(sp.mass, sp.propagator, rows.matrix) @ src
    return 0.01 * sp.cfg.noise_percent * float(np.max(np.abs(clean)))


def _exp1_stage_a(sp: SquareProblem) -> dict:
    cfg = sp.cfg
    src = generate_random_source(sp.mesh, child_seed(cfg.seed, _S_BUMP), n_modes=1)
    pixels = build_boundary_pixel_rows(sp.mesh, cfg.boundary_pixels)

    f_bdry = assemble_forward_rows(sp.mass, sp.propagator, pixels.matrix)
    blocks = ForwardBlocks(None, f_bdry, cfg.n_obs, sp.mesh.n_nodes)
    noise = calibrate_noise(None, blocks.apply(src), cfg.noise_percent)
    y = simulate_measurements(blocks, src, noise, child_seed(cfg.seed, _S_NOISE_A, 0))
    xhat = posterior_mean(sp.prior, noise, blocks, y)
    err_transient = reconstruction_error(xhat, src, sp.mass)

    tau = thermal_time_constant(sp.mass, sp.stiffness)
    t_steady = cfg.steady_time_factor * tau
    grid_s = TimeGrid(t_steady, 1, cfg.steady_substeps)
    prop_s = MidpointPropagator(sp.mass, sp.stiffness, grid_s)
    f_bdry_s = assemble_forward_rows(sp.mass, prop_s, pixels.matrix)
    blocks_s = ForwardBlocks(None, f_bdry_s, 1, sp.mesh.n_nodes)
    noise_s = calibrate_noise(None, blocks_s.apply(src), cfg.noise_percent)
    y_s = simulate_measurements(blocks_s, src, noise_s, child_seed(cfg.seed, _S_NOISE_A, 1))
    xhat_s = posterior_mean(sp.prior, noise_s, blocks_s, y_s)
    err_steady = reconstruction_error(xhat_s, src, sp.mass)

    return {
        "err_transient": err_transient,
        "err_steady": err_steady,
        "transient_better": bool(err_transient < err_steady),
        "thermal_time_constant": tau,
        "steady_snapshot_time": t_steady,
    }


def _traj_record(traj) -> dict:
    return {
        "initial_positions": np.asarray(traj.positions[0]).tolist(),
        "final_positions": np.asarray(traj.positions[-1]).tolist(),
        "phi_shifted": traj.phi_shifted.tolist(),
        "step_sizes": traj.step_sizes,
        "grad_norms": traj.grad_norms,
        "termination": traj.termination,
        "iterations": traj.n_iterations,
    }


def _exp1_stage_b(sp: SquareProblem, design_problem: DesignProblem) -> dict:
    p0 = sp.grid_positions()
    traj = sliding_sensors_optimize(design_problem, p0, max_iters=sp.cfg.opt_max_iters)
    rec = _traj_record(traj)
    rec["monotone"] = bool(np.all(np.diff(traj.phi_values) <= 1e-12 * max(1.0, abs(traj.phi_values[0]))))
    rec["decreased"] = bool(traj.phi_values[-1] < traj.phi_values[0])
    return rec


def _exp1_stage_c(sp: SquareProblem, design_problem: DesignProblem) -> dict:
    cfg = sp.cfg
    m = cfg.margin
    ticks = np.linspace(m, 1.0 - m, cfg.candidate_grid)
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    candidates = np.column_stack([gx.ravel(), gy.ravel()])
    state = sparsify_design(
        design_problem,
        candidates,
        target_hint=cfg.sparsify_target,
        seed=child_seed(cfg.seed, _S_SPARSIFY),
    )
    selected = state.selected_positions()
    out = {
        "n_candidates": int(candidates.shape[0]),
        "n_selected": state.n_selected,
        "binary": state.binary,
        "weights_above_half": int((state.weights > 0.5).sum()),
        "selected_positions": selected.tolist(),
        "history": state.history,
    }
    if state.n_selected:
        phi_selected = design_problem.phi(selected)
        traj = sliding_sensors_optimize(
            design_problem, selected, max_iters=cfg.opt_max_iters
        )
        out["phi_selected"] = phi_selected
        out["phi_refined"] = traj.phi_values[-1]
        out["refinement_decreased"] = bool(traj.phi_values[-1] < phi_selected)
        out["refined_positions"] = np.asarray(traj.positions[-1]).tolist()
    return out


def _exp1_stage_d(sp: SquareProblem, design_problem: DesignProblem, p_optimized) -> dict:
    cfg = sp.cfg
    if cfg.n_sources == 0:
        return {"configs": [], "skipped": "no sources configured"}
    mesh, mass, prior = sp.mesh, sp.mass, sp.prior
    sources = np.column_stack(
        [
            generate_random_source(mesh, child_seed(cfg.seed, _S_SOURCE, i))
            for i in range(cfg.n_sources)
        ]
    )
    src_norms = np.einsum("ns,ns->s", sources, mass @ sources)

    p_grid = sp.grid_positions()
    entries = [("grid", p_grid)]
    for c in range(cfg.n_configs):
        rng = np.random.default_rng(child_seed(cfg.seed, _S_CONFIG, c))
        perturbed = p_grid + rng.uniform(-0.2, 0.2, p_grid.shape)
        entries.append(("random", sp.region.project(perturbed)))
    if p_optimized is not None:
        entries.append(("optimized", np.asarray(p_optimized)))

    constant = prior.trace_covariance_against(mass)
    rows_out = []
    for c, (kind, positions) in enumerate(entries):
        design = sp.template.with_positions(positions)
        rows = build_internal_sensor_rows(mesh, design)
        f_int = assemble_forward_rows(mass, sp.propagator, rows.matrix)
        f_int_pr = prior.factor.solve_lt(f_int.T).T
        phi_abs = constant - design_problem.trace_from_rows(f_int_pr)

        clean = f_int @ sources  # (m, S)
        cov_ft = prior.factor.solve(f_int.T)  # (n, m)
        gram = f_int @ cov_ft
        lam, vecs = sla.eigh(0.5 * (gram + gram.T))
        lam = np.maximum(lam, 0.0)
        gammas = 0.01 * cfg.noise_percent * np.max(np.abs(clean), axis=0)
        rng = np.random.default_rng(child_seed(cfg.seed, _S_CONFIG_NOISE, c))
        y = clean + gammas[None, :] * rng.standard_normal(clean.shape)
        w = vecs.T @ y
        w /= lam[:, None] + gammas[None, :] ** 2
        xhat = cov_ft @ (vecs @ w)
        diffs = xhat - sources
        errs = np.sqrt(np.einsum("ns,ns->s", diffs, mass @ diffs) / src_norms)
        rows_out.append(
            {
                "config": c,
                "kind": kind,
                "phi": float(phi_abs),
                "mean_err": float(errs.mean()),
            }
        )

    random_rows = [r for r in rows_out if r["kind"] == "random"]
    phis = np.array([r["phi"] for r in random_rows])
    errs = np.array([r["mean_err"] for r in random_rows])
    rho = float(spearmanr(phis, errs).statistic) if len(random_rows) > 2 else float("nan")
    out = {
        "configs": rows_out,
        "n_sources": cfg.n_sources,
        "spearman_phi_vs_err": rho,
        "prior_trace_constant": constant,
    }
    opt_rows = [r for r in rows_out if r["kind"] == "optimized"]
    if opt_rows and len(random_rows):
        opt_err = opt_rows[0]["mean_err"]
        out["optimized_mean_err"] = opt_err
        out["optimized_percentile"] = float((errs < opt_err).mean())
        out["optimized_phi"] = opt_rows[0]["phi"]
    return out


def run_experiment_one(cfg: Exp1Config, outdir=None, render: bool = True) -> dict:
    report = _new_report("one", cfg)
    timings = report["meta"]["timings"]

    t0 = time.perf_counter()
    sp = build_square_problem(cfg)
    gamma_design = exp1_design_noise_level(sp)
    design_problem = design_problem_for(sp, gamma_int=gamma_design)
    report["results"]["setup"] = {
        "n_nodes": sp.mesh.n_nodes,
        "n_triangles": sp.mesh.n_triangles,
        "design_noise_int": gamma_design,
    }
    timings["setup"] = time.perf_counter() - t0

    if cfg.n_sources > 0 and "a" in cfg.stages:
        _run_stage("stage_a", lambda: _exp1_stage_a(sp), report, timings)
    p_opt = None
    if "b" in cfg.stages:
        _run_stage("stage_b", lambda: _exp1_stage_b(sp, design_problem), report, timings)
        if "stage_b" in report["results"]:
            p_opt = np.asarray(report["results"]["stage_b"]["final_positions"])
    if "c" in cfg.stages:
        _run_stage("stage_c", lambda: _exp1_stage_c(sp, design_problem), report, timings)
    if cfg.n_sources > 0 and "d" in cfg.stages:
        _run_stage(
            "stage_d", lambda: _exp1_stage_d(sp, design_problem, p_opt), report, timings
        )

    if outdir is not None:
        _write_exp1_outputs(report, outdir, render)
    return report


# ---------------------------------------------------------------------------
# experiment two
# ---------------------------------------------------------------------------


def _full_blocks(tp: TransformerProblem, f_int: np.ndarray | None) -> ForwardBlocks:
    return ForwardBlocks(f_int, tp.f_bdry, tp.cfg.n_obs, tp.mesh.n_nodes)


def _exp2_reconstruct(tp: TransformerProblem, positions, noise_seed) -> tuple[float, np.ndarray]:
    design = tp.template.with_positions(positions)
    rows = build_internal_sensor_rows(tp.mesh, design)
    f_int = assemble_forward_rows(tp.mass, tp.propagator, rows.matrix)
    blocks = _full_blocks(tp, f_int)
    noise = NoiseModel(tp.gamma_int, tp.gamma_bdry)
    y = simulate_measurements(blocks, tp.f_true, noise, noise_seed)
    xhat = posterior_mean(tp.prior, noise, blocks, y, method="woodbury")
    return reconstruction_error(xhat, tp.f_true, tp.mass), xhat


def _exp2_steady_state(tp: TransformerProblem) -> dict:
    u = SPDFactor(tp.stiffness).solve(tp.mass @ tp.f_true)
    core = tp.mesh.node_labels == LABEL_CORE
    load = tp.mass @ tp.f_true
    return {
        "core_max_temperature": float(u[core].max()),
        "coil_max_temperature": float(u[~core].max()),
        "coil_watts": float(load[~core].sum() * tp.cfg.depth),
        "iron_watts": float(load[core].sum() * tp.cfg.depth),
        "note": "2-D model neglects axial dissipation; temperatures reported, not asserted",
    }


def _exp2_sensor_run(tp: TransformerProblem, design_problem: DesignProblem, m_int: int, idx: int) -> dict:
    cfg = tp.cfg
    p_grid = tp.core_lattice(m_int)
    traj = sliding_sensors_optimize(design_problem, p_grid, max_iters=cfg.opt_max_iters)
    p_opt = np.asarray(traj.positions[-1])
    err_grid, _ = _exp2_reconstruct(tp, p_grid, child_seed(cfg.seed, _S_EXP2_NOISE, idx, 0))
    err_opt, _ = _exp2_reconstruct(tp, p_opt, child_seed(cfg.seed, _S_EXP2_NOISE, idx, 1))
    return {
        "m_int": m_int,
        "err_grid": err_grid,
        "err_optimized": err_opt,
        "phi_corr_grid": -design_problem.trace_term(p_grid),
        "phi_corr_optimized": -design_problem.trace_term(p_opt),
        "trajectory": _traj_record(traj),
    }


def exp2_rank_sweep(cfg: Exp2Config) -> dict:
    """Reconstruction discrepancy versus reduction rank on a coarse mesh,
    against the dense (unreduced) reference reconstruction."""
    tp = build_transformer_problem(cfg, target_h=cfg.rank_sweep_h, with_reduction=False)
    m_int = cfg.sensor_counts[0]
    p_grid = tp.core_lattice(m_int)
    design = tp.template.with_positions(p_grid)
    rows = build_internal_sensor_rows(tp.mesh, design)
    f_int = assemble_forward_rows(tp.mass, tp.propagator, rows.matrix)
    blocks = _full_blocks(tp, f_int)
    noise = NoiseModel(tp.gamma_int, tp.gamma_bdry)
    y = simulate_measurements(blocks, tp.f_true, noise, child_seed(cfg.seed, _S_EXP2_NOISE, 99))
    y_int, y_bdry = blocks.split_data(y)
    xhat_full = posterior_mean(tp.prior, noise, blocks, y, method="woodbury")
    norm_full = float(np.sqrt(xhat_full @ (tp.mass @ xhat_full)))

    f_bdry_pr = tp.prior.factor.solve_lt(tp.f_bdry.T).T
    singular = sla.svd(f_bdry_pr, compute_uv=False)
    num_rank = int((singular > singular[0] * 1e-12).sum())
    max_rank = max([*cfg.rank_sweep, num_rank])
    reduced_big = reduce_boundary_operator(
        prior_condition(tp.f_bdry, tp.prior.factor),
        max_rank,
        power_iters=cfg.power_iters,
        oversample=cfg.oversample,
        seed=child_seed(cfg.seed, _S_RSVD, 1),
    )
    f_int_pr = tp.prior.factor.solve_lt(f_int.T).T

    def discrepancy(r: int) -> float:
        sub = ReducedBoundaryOp(
            reduced_big.u[:, :r], reduced_big.sigma[:r], reduced_big.vt[:r], {}, False
        )
        rf = assemble_reduced_forward(f_int_pr, sub, tp.gamma_int, tp.gamma_bdry, cfg.n_obs)
        post = ReducedPosterior(tp.prior, rf)
        xr = post.mean(reduce_data(rf, sub, y_int, y_bdry))
        diff = xr - xhat_full
        return float(np.sqrt(diff @ (tp.mass @ diff)) / norm_full)

    ranks = sorted(set([*cfg.rank_sweep, num_rank]))
    ranks = [r for r in ranks if r <= reduced_big.rank]
    return {
        "n_nodes": tp.mesh.n_nodes,
        "numerical_rank": num_rank,
        "achieved_rank": reduced_big.rank,
        "sweep": [{"rank": r, "discrepancy": discrepancy(r)} for r in ranks],
        "err_full": reconstruction_error(xhat_full, tp.f_true, tp.mass),
    }


def run_experiment_two(cfg: Exp2Config, outdir=None, render: bool = True) -> dict:
    report = _new_report("two", cfg)
    timings = report["meta"]["timings"]

    t0 = time.perf_counter()
    tp = build_transformer_problem(cfg)
    design_problem = design_problem_for(tp)
    report["results"]["setup"] = {
        "n_nodes": tp.mesh.n_nodes,
        "n_triangles": tp.mesh.n_triangles,
        "gamma_int": tp.gamma_int,
        "gamma_bdry": tp.gamma_bdry,
        "reduction_rank": tp.reduced.rank if tp.reduced else 0,
        "boundary_rows": int(tp.f_bdry.shape[0]),
    }
    timings["setup"] = time.perf_counter() - t0

    _run_stage("steady_state", lambda: _exp2_steady_state(tp), report, timings)

    runs = []
    counts = [*cfg.sensor_counts, *cfg.sensor_sweep]
    for idx, m_int in enumerate(counts):
        _run_stage(
            f"sensors_{m_int}",
            lambda m=m_int, i=idx: _exp2_sensor_run(tp, design_problem, m, i),
            report,
            timings,
        )
        key = f"sensors_{m_int}"
        if key in report["results"]:
            runs.append(report["results"][key])
    report["results"]["sensor_runs"] = runs

    if cfg.run_rank_sweep:
        _run_stage("rank_sweep", lambda: exp2_rank_sweep(cfg), report, timings)

    if outdir is not None:
        _write_exp2_outputs(report, outdir, render)
    return report


# ---------------------------------------------------------------------------
# report plumbing
# ---------------------------------------------------------------------------


def _new_report(experiment: str, cfg) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "package_version": _pkg_version,
        "experiment": experiment,
        "config": dataclasses.asdict(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "results": {},
        "errors": {},
        "meta": {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"), "timings": {}},
    }


def _run_stage(name: str, fn, report: dict, timings: dict):
    t0 = time.perf_counter()
    try:
        report["results"][name] = fn()
    except Exception:
        report["errors"][name] = traceback.format_exc()
    timings[name] = time.perf_counter() - t0


def write_report(report: dict, outdir) -> str:
    import os

    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, f"report_exp{report['experiment']}.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return path


def _write_csv(path, header_comment: str, columns: list[str], rows):
    with open(path, "w") as fh:
        fh.write(f"# {header_comment}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def _write_trajectory_csv(path, rec: dict, label: str):
    rows = []
    for k in range(rec["iterations"]):
        rows.append(
            (
                k,
                rec["phi_shifted"][k],
                rec["step_sizes"][k],
                rec["grad_norms"][k],
            )
        )
    _write_csv(
        path,
        f"{label}: shifted A-optimality target per accepted iteration",
        ["iteration", "phi_shifted", "step_size", "grad_inf_norm"],
        rows,
    )


def _write_exp1_outputs(report: dict, outdir, render: bool):
    import os

    write_report(report, outdir)
    res = report["results"]
    if "stage_b" in res:
        _write_trajectory_csv(
            os.path.join(outdir, "exp1_sliding_trajectory.csv"), res["stage_b"], "experiment one"
        )
    if "stage_d" in res and res["stage_d"].get("configs"):
        _write_csv(
            os.path.join(outdir, "exp1_phi_vs_error.csv"),
            "A-optimality target vs mean relative reconstruction error per sensor configuration",
            ["config", "kind", "phi", "mean_err"],
            [(r["config"], r["kind"], r["phi"], r["mean_err"]) for r in res["stage_d"]["configs"]],
        )
    if render:
        from . import plots

        plots.render_experiment_one(report, outdir)


def _write_exp2_outputs(report: dict, outdir, render: bool):
    import os

    write_report(report, outdir)
    res = report["results"]
    rows = []
    for run in res.get("sensor_runs", []):
        rows.append((run["m_int"], "grid", run["err_grid"], run["phi_corr_grid"]))
        rows.append((run["m_int"], "optimized", run["err_optimized"], run["phi_corr_optimized"]))
        _write_trajectory_csv(
            os.path.join(outdir, f"exp2_trajectory_{run['m_int']}.csv"),
            run["trajectory"],
            f"experiment two, {run['m_int']} internal sensors",
        )
    if rows:
        _write_csv(
            os.path.join(outdir, "exp2_errors.csv"),
            "relative reconstruction error and shifted target per sensor count and layout",
            ["m_int", "layout", "err_rel", "phi_corr"],
            rows,
        )
    if "rank_sweep" in res:
        _write_csv(
            os.path.join(outdir, "exp2_rank_sweep.csv"),
            "reconstruction discrepancy vs reduction rank against the dense reference",
            ["rank", "discrepancy"],
            [(r["rank"], r["discrepancy"]) for r in res["rank_sweep"]["sweep"]],
        )
    if render:
        from . import plots

        plots.render_experiment_two(report, outdir)
