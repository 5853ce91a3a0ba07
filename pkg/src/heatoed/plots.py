"""Figure rendering for experiment reports.

Kept separate from the numerical modules so the core has no plotting
dependency; the CLI report path calls these after the CSV/JSON output is
written.  All figures go to PNG files next to the delimited data.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _save(fig, outdir, name):
    path = os.path.join(outdir, name)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def sensor_layout_figure(initial, final, radius, extents, coil_rect=None, title=""):
    fig, ax = plt.subplots(figsize=(5, 5))
    (x0, x1), (y0, y1) = extents
    ax.add_patch(plt.Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, lw=1.2))
    if coil_rect is not None:
        cx0, cx1, cy0, cy1 = coil_rect
        ax.add_patch(
            plt.Rectangle((cx0, cy0), cx1 - cx0, cy1 - cy0, fill=True, alpha=0.15, color="tab:orange")
        )
    initial = np.atleast_2d(initial)
    final = np.atleast_2d(final)
    ax.plot(initial[:, 0], initial[:, 1], "d", color="tab:gray", label="initial")
    for p in final:
        ax.add_patch(plt.Circle(p, radius, alpha=0.2, color="tab:blue"))
    ax.plot(final[:, 0], final[:, 1], "o", color="tab:blue", label="optimized")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    return fig


def objective_trace_figure(phi_shifted, title=""):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(len(phi_shifted)), phi_shifted, "o-")
    ax.set_xlabel("iteration")
    ax.set_ylabel("shifted target")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return fig


def render_experiment_one(report: dict, outdir) -> list[str]:
    res = report["results"]
    written = []
    cfg = report["config"]
    if "stage_b" in res:
        rec = res["stage_b"]
        fig = sensor_layout_figure(
            rec["initial_positions"],
            rec["final_positions"],
            cfg["sensor_radius"],
            ((0.0, 1.0), (0.0, 1.0)),
            title="sliding sensors, unit square",
        )
        written.append(_save(fig, outdir, "exp1_sensor_layout.png"))
        fig = objective_trace_figure(rec["phi_shifted"], "sliding-sensor descent")
        written.append(_save(fig, outdir, "exp1_objective_trace.png"))
    if "stage_c" in res and res["stage_c"].get("selected_positions"):
        rec = res["stage_c"]
        fig, ax = plt.subplots(figsize=(5, 5))
        sel = np.atleast_2d(rec["selected_positions"])
        ax.add_patch(plt.Rectangle((0, 0), 1, 1, fill=False, lw=1.2))
        ax.plot(sel[:, 0], sel[:, 1], "s", color="tab:green", label="sparsified")
        if "refined_positions" in rec:
            ref = np.atleast_2d(rec["refined_positions"])
            ax.plot(ref[:, 0], ref[:, 1], "o", mfc="none", color="tab:blue", label="refined")
        ax.set_aspect("equal")
        ax.legend(fontsize=8)
        ax.set_title("sparsification vs sliding refinement")
        written.append(_save(fig, outdir, "exp1_sparsification.png"))
    if "stage_d" in res and res["stage_d"].get("configs"):
        rows = res["stage_d"]["configs"]
        fig, ax = plt.subplots(figsize=(5, 4))
        markers = {"random": ("s", "tab:gray"), "grid": ("D", "tab:red"), "optimized": ("*", "tab:blue")}
        for kind, (mk, color) in markers.items():
            pts = [(r["phi"], r["mean_err"]) for r in rows if r["kind"] == kind]
            if pts:
                arr = np.array(pts)
                size = 140 if kind == "optimized" else 30
                ax.scatter(arr[:, 0], arr[:, 1], marker=mk, c=color, s=size, label=kind)
        ax.set_xlabel("A-optimality target")
        ax.set_ylabel("mean relative error")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        ax.set_title("target vs reconstruction error")
        written.append(_save(fig, outdir, "exp1_phi_vs_error.png"))
    return written


def render_experiment_two(report: dict, outdir) -> list[str]:
    res = report["results"]
    cfg = report["config"]
    written = []
    extents = ((0.0, 0.025), (-0.030, 0.030))
    for run in res.get("sensor_runs", []):
        rec = run["trajectory"]
        fig = sensor_layout_figure(
            rec["initial_positions"],
            rec["final_positions"],
            cfg["sensor_radius"],
            extents,
            coil_rect=cfg["coil_rect"],
            title=f"{run['m_int']} internal sensors",
        )
        written.append(_save(fig, outdir, f"exp2_sensor_layout_{run['m_int']}.png"))
        fig = objective_trace_figure(
            rec["phi_shifted"], f"descent, {run['m_int']} sensors"
        )
        written.append(_save(fig, outdir, f"exp2_objective_trace_{run['m_int']}.png"))
    runs = res.get("sensor_runs", [])
    if runs:
        fig, ax = plt.subplots(figsize=(5, 4))
        ms = [r["m_int"] for r in runs]
        ax.plot(ms, [r["err_grid"] for r in runs], "d-", label="regular grid")
        ax.plot(ms, [r["err_optimized"] for r in runs], "o-", label="optimized")
        ax.set_xlabel("number of internal sensors")
        ax.set_ylabel("relative error")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        written.append(_save(fig, outdir, "exp2_error_vs_sensors.png"))
    if "rank_sweep" in res:
        sweep = res["rank_sweep"]["sweep"]
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.semilogy([s["rank"] for s in sweep], [max(s["discrepancy"], 1e-17) for s in sweep], "o-")
        ax.set_xlabel("reduction rank")
        ax.set_ylabel("reconstruction discrepancy")
        ax.grid(alpha=0.3, which="both")
        written.append(_save(fig, outdir, "exp2_rank_sweep.png"))
    return written
