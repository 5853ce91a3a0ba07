"""Command-line interface.

Subcommands: mesh, forward, reconstruct, optimize, sparsify, reduce, exp1,
exp2.  Configuration comes from a JSON file (see `experiments.load_config`);
--seed/--out/--rank/--sensors/--mode override the corresponding fields.
Exits 0 on success, 2 on usage errors, and 1 on failures, in which case a
machine-readable error record is printed to stderr and written to the
output directory when one is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import traceback

import numpy as np

from . import experiments
from .bayes import NoiseModel, posterior_mean, reconstruction_error, simulate_measurements
from .design import DesignObjectiveConfig, sliding_sensors_optimize, sparsify_design
from .experiments import (
    Exp1Config,
    Exp2Config,
    build_square_problem,
    build_transformer_problem,
    child_seed,
    design_problem_for,
    load_config,
)
from .mesh import build_unit_square_mesh
from .reduction import reduction_cache_key, save_reduced
from .sensing import build_internal_sensor_rows
from .sources import generate_random_source
from .stepping import ForwardBlocks, assemble_forward_rows

_S_CLI_SOURCE = 31
_S_CLI_NOISE = 32


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heatoed", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--rank", type=int, help="reduction rank override")
    common.add_argument("--sensors", type=int, help="number of internal sensors")
    common.add_argument("--mode", choices=["M", "L"], default="M", help="target seminorm")
    common.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    for name, desc in [
        ("mesh", "build a mesh and export it as plain text"),
        ("forward", "simulate noisy measurement data"),
        ("reconstruct", "posterior-mean reconstruction from a data file"),
        ("optimize", "sliding-sensors A-optimal placement"),
        ("sparsify", "candidate-grid sparsification"),
        ("reduce", "build and cache the reduced boundary operator"),
        ("exp1", "run the unit-square experiment suite"),
        ("exp2", "run the transformer experiment suite"),
    ]:
        sp = sub.add_parser(name, parents=[common], help=desc)
        if name == "mesh":
            sp.add_argument("--refinement", type=int, help="unit-square refinement")
        if name == "reconstruct":
            sp.add_argument("--data", required=True, help="data file from `forward`")
    return p


def _load(args) -> tuple[str, Exp1Config | Exp2Config]:
    if args.config:
        name, cfg = load_config(args.config)
    else:
        name, cfg = "one", Exp1Config()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return name, cfg


def _write_json(path, payload):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return path


def _build_forward_setup(name, cfg, n_sensors):
    """Common mesh/blocks/noise setup for forward, reconstruct and optimize."""
    if name == "two":
        tp = build_transformer_problem(cfg, with_reduction=False)
        positions = tp.core_lattice(n_sensors or cfg.sensor_counts[0])
        truth = tp.f_true
        bundle = tp
        f_bdry = tp.f_bdry
        gamma = (tp.gamma_int, tp.gamma_bdry)
    else:
        sp = build_square_problem(cfg)
        positions = sp.grid_positions()
        if n_sensors:
            side = int(round(np.sqrt(n_sensors)))
            ticks = np.arange(1, side + 1) / (side + 1)
            gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
            positions = np.column_stack([gx.ravel(), gy.ravel()])
        truth = generate_random_source(sp.mesh, child_seed(cfg.seed, _S_CLI_SOURCE))
        bundle = sp
        from .sensing import build_boundary_pixel_rows

        pixels = build_boundary_pixel_rows(sp.mesh, cfg.boundary_pixels)
        f_bdry = assemble_forward_rows(sp.mass, sp.propagator, pixels.matrix)
        gamma = (None, None)
    design = bundle.template.with_positions(positions)
    rows = build_internal_sensor_rows(bundle.mesh, design)
    f_int = assemble_forward_rows(bundle.mass, bundle.propagator, rows.matrix)
    blocks = ForwardBlocks(f_int, f_bdry, cfg.n_obs, bundle.mesh.n_nodes)
    if gamma == (None, None):
        from .bayes import calibrate_noise

        y_int, y_bdry = blocks.split_data(blocks.apply(truth))
        noise = calibrate_noise(y_int, y_bdry, cfg.noise_percent)
    else:
        noise = NoiseModel(*gamma)
    return bundle, blocks, noise, truth, positions


def _cmd_mesh(args) -> int:
    name, cfg = _load(args)
    if name == "two":
        mesh = build_transformer_problem(cfg, with_reduction=False).mesh
        out = os.path.join(args.out, "transformer.mesh.txt")
    else:
        refinement = args.refinement or cfg.refinement
        mesh = build_unit_square_mesh(refinement)
        out = os.path.join(args.out, f"unit_square_r{refinement}.mesh.txt")
    os.makedirs(args.out, exist_ok=True)
    mesh.save_text(out)
    print(out)
    return 0


def _cmd_forward(args) -> int:
    name, cfg = _load(args)
    bundle, blocks, noise, truth, positions = _build_forward_setup(name, cfg, args.sensors)
    y = simulate_measurements(blocks, truth, noise, child_seed(cfg.seed, _S_CLI_NOISE))
    path = _write_json(
        os.path.join(args.out, "data.json"),
        {
            "experiment": name,
            "config_hash": experiments.config_hash(cfg),
            "seed": cfg.seed,
            "positions": np.asarray(positions).tolist(),
            "gamma_int": noise.gamma_int,
            "gamma_bdry": noise.gamma_bdry,
            "layout": {
                "order": "internal-then-boundary, time-major within each block",
                "m_int": blocks.m_int,
                "m_bdry": blocks.m_bdry,
                "n_obs": blocks.n_obs,
            },
            "y": y.tolist(),
        },
    )
    print(path)
    return 0


def _cmd_reconstruct(args) -> int:
    name, cfg = _load(args)
    with open(args.data) as fh:
        data = json.load(fh)
    if data["experiment"] != name:
        raise ValueError("data file was produced for a different experiment")
    bundle, blocks, _, truth, _ = _build_forward_setup(
        name, dataclasses.replace(cfg, seed=data["seed"]), None
    )
    design = bundle.template.with_positions(np.asarray(data["positions"]))
    rows = build_internal_sensor_rows(bundle.mesh, design)
    f_int = assemble_forward_rows(bundle.mass, bundle.propagator, rows.matrix)
    blocks = ForwardBlocks(f_int, blocks.f_bdry, cfg.n_obs, bundle.mesh.n_nodes)
    noise = NoiseModel(data["gamma_int"], data["gamma_bdry"])
    xhat = posterior_mean(bundle.prior, noise, blocks, np.asarray(data["y"]))
    err = reconstruction_error(xhat, truth, bundle.mass)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "reconstruction.csv")
    with open(csv_path, "w") as fh:
        fh.write("# posterior-mean nodal reconstruction\nnode,x,y,value\n")
        for i, ((x, yy), v) in enumerate(zip(bundle.mesh.nodes, xhat)):
            fh.write(f"{i},{float(x)!r},{float(yy)!r},{float(v)!r}\n")
    path = _write_json(
        os.path.join(args.out, "reconstruction.json"),
        {"err_rel": err, "config_hash": experiments.config_hash(cfg), "csv": csv_path},
    )
    print(path)
    print(f"err_rel={err:.6g}")
    return 0


def _cmd_optimize(args) -> int:
    name, cfg = _load(args)
    objective = DesignObjectiveConfig(mode=args.mode)
    if name == "two":
        tp = build_transformer_problem(cfg, rank=args.rank)
        problem = design_problem_for(tp, objective=objective)
        p0 = tp.core_lattice(args.sensors or cfg.sensor_counts[0])
        radius = cfg.sensor_radius
    else:
        sp = build_square_problem(cfg)
        gamma = experiments.exp1_design_noise_level(sp)
        problem = design_problem_for(sp, gamma_int=gamma, objective=objective)
        if args.sensors:
            cfg = dataclasses.replace(cfg, n_sensors=args.sensors)
            sp = dataclasses.replace(sp, cfg=cfg)
        p0 = sp.grid_positions()
        radius = cfg.sensor_radius
    traj = sliding_sensors_optimize(problem, p0, max_iters=cfg.opt_max_iters)
    rec = experiments._traj_record(traj)
    os.makedirs(args.out, exist_ok=True)
    experiments._write_trajectory_csv(
        os.path.join(args.out, "trajectory.csv"), rec, "sliding sensors"
    )
    path = _write_json(os.path.join(args.out, "optimize.json"), rec)
    if not args.no_figures:
        from . import plots

        extents = ((0.0, 1.0), (0.0, 1.0)) if name == "one" else ((0.0, 0.025), (-0.030, 0.030))
        coil = None if name == "one" else cfg.coil_rect
        fig = plots.sensor_layout_figure(
            rec["initial_positions"], rec["final_positions"], radius, extents, coil
        )
        plots._save(fig, args.out, "sensor_layout.png")
    print(path)
    return 0


def _cmd_sparsify(args) -> int:
    name, cfg = _load(args)
    if name != "one":
        raise ValueError("sparsify is defined for the internal-only unit-square setup")
    sp = build_square_problem(cfg)
    gamma = experiments.exp1_design_noise_level(sp)
    problem = design_problem_for(sp, gamma_int=gamma)
    m = cfg.margin
    ticks = np.linspace(m, 1.0 - m, cfg.candidate_grid)
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    candidates = np.column_stack([gx.ravel(), gy.ravel()])
    state = sparsify_design(
        problem,
        candidates,
        target_hint=args.sensors or cfg.sparsify_target,
        seed=child_seed(cfg.seed, 17),
    )
    path = _write_json(
        os.path.join(args.out, "sparsify.json"),
        {
            "n_selected": state.n_selected,
            "binary": state.binary,
            "selected_positions": state.selected_positions().tolist(),
            "weights": state.weights.tolist(),
            "history": state.history,
        },
    )
    print(path)
    return 0


def _cmd_reduce(args) -> int:
    name, cfg = _load(args)
    if name != "two":
        raise ValueError("reduce targets the transformer boundary operator")
    rank = args.rank or cfg.rank
    tp = build_transformer_problem(cfg, rank=rank)
    key = reduction_cache_key(
        tp.mesh,
        {
            "rank": rank,
            "final_time": cfg.final_time,
            "n_obs": cfg.n_obs,
            "substeps": cfg.substeps,
            "boundary_pixels": cfg.boundary_pixels,
            "seed": cfg.seed,
        },
    )
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"reduced_{key}.npz")
    save_reduced(path, tp.reduced, key)
    meta = _write_json(
        os.path.join(args.out, f"reduced_{key}.json"),
        {
            "file": path,
            "key": key,
            "rank": tp.reduced.rank,
            "rank_deficient": tp.reduced.rank_deficient,
            "singular_values": tp.reduced.sigma.tolist(),
        },
    )
    print(meta)
    return 0


def _cmd_exp(args, which: str) -> int:
    name, cfg = _load(args)
    if which == "one" and name != "one":
        raise ValueError("config selects experiment two; use the exp2 subcommand")
    if which == "two" and name != "two":
        cfg = Exp2Config(seed=args.seed if args.seed is not None else cfg.seed)
    if args.rank is not None and which == "two":
        cfg = dataclasses.replace(cfg, rank=args.rank)
    if args.sensors is not None and which == "two":
        cfg = dataclasses.replace(cfg, sensor_counts=(args.sensors,))
    if args.sensors is not None and which == "one":
        cfg = dataclasses.replace(cfg, n_sensors=args.sensors)
    runner = experiments.run_experiment_one if which == "one" else experiments.run_experiment_two
    report = runner(cfg, outdir=args.out, render=not args.no_figures)
    print(os.path.join(args.out, f"report_exp{which}.json"))
    failed = sorted(report["errors"])
    if failed:
        print(f"stages with errors: {failed}", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "mesh": _cmd_mesh,
        "forward": _cmd_forward,
        "reconstruct": _cmd_reconstruct,
        "optimize": _cmd_optimize,
        "sparsify": _cmd_sparsify,
        "reduce": _cmd_reduce,
        "exp1": lambda a: _cmd_exp(a, "one"),
        "exp2": lambda a: _cmd_exp(a, "two"),
    }
    try:
        return handlers[args.command](args)
    except Exception as exc:
        record = {
            "error": type(exc).__name__,
            "message": str(exc),
            "command": args.command,
            "traceback": traceback.format_exc(),
        }
        print(json.dumps(record), file=sys.stderr)
        try:
            if getattr(args, "out", None):
                _write_json(os.path.join(args.out, "error.json"), record)
        except OSError:
            pass
        return 1


if __name__ == "__main__":
    sys.exit(main())
