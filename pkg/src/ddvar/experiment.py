"""Batch driver: build a twin problem from a config, run one formulation,
write the result CSVs and a manifest.

All CSVs print floats through repr, so identical runs produce byte-identical
files; timing.csv is the one machine-dependent exception.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np

from .assim import AssimilationProblem
from .config import emit_config
from .control import ControlLayout, ControlVector
from .covariance import CovarianceR, build_control_covariance
from .grid import Grid, build_tiles, build_time_windows
from .impact import (column_section, adjoint_sensitivity, observation_impact,
                     observation_sensitivity)
from .model import ModelConfig, SurrogateModel
from .observations import PlatformSpec, read_observations, synthesize
from .schwarz import DDConfig, dd_outer_loop


def build_problem(cfg):
    """Twin-experiment assimilation problem for an ExperimentConfig.

    Truth is background plus a prior draw; observations sample the truth
    with noise at their stored error level, or come from obs_file.
    """
    grid = Grid(nx=cfg.nx, ny=cfg.ny, dt=cfg.dt, n_steps=cfg.n_steps)
    model = SurrogateModel(grid, ModelConfig(kind=cfg.model,
                                             advect=(cfg.advect_u,
                                                     cfg.advect_v),
                                             viscosity=cfg.viscosity,
                                             boundary=cfg.boundary))
    windows = build_time_windows(cfg.n_steps, cfg.n_t)
    has_boundary = cfg.boundary == "prescribed"
    layout = ControlLayout(grid, windows, model.n_fields, has_boundary)
    b_cov = build_control_covariance(grid, windows, model.n_fields,
                                     has_boundary, cfg.sigma_x, cfg.length_x,
                                     cfg.sigma_f, cfg.length_f, cfg.sigma_b,
                                     cfg.length_b)
    rng = np.random.default_rng(cfg.seed)
    x_b = ControlVector(
        layout, b_cov.apply_sqrt(rng.standard_normal(layout.n_z))).x0.copy()
    z_truth = b_cov.apply_sqrt(rng.standard_normal(layout.n_z))
    vt = ControlVector(layout, z_truth)
    forcing = [vt.f(windows.window_of_step(s))
               for s in range(1, cfg.n_steps + 1)]
    bnd = ([vt.b(windows.window_of_step(s)) for s in range(1, cfg.n_steps + 1)]
           if has_boundary else None)
    truth_traj = model.run_nl(x_b + vt.x0, forcing=forcing, boundary=bnd)

    if cfg.obs_file:
        obs = read_observations(cfg.obs_file, grid)
    else:
        levels = tuple(range(1, cfg.n_steps + 1))
        obs = synthesize(truth_traj, grid,
                         [PlatformSpec("gridded", cfg.n_obs, cfg.sigma_o,
                                       levels=levels)],
                         seed=cfg.seed + 1)
    r_cov = CovarianceR(obs.variances)
    problem = AssimilationProblem(model, windows, layout, b_cov, r_cov, obs,
                                  x_b)
    problem.z_truth = z_truth
    return problem


def _fmt(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(str(c) if isinstance(c, (int, str)) else _fmt(c)
                              for c in row) + "\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class ExperimentResult:
    """Paths and headline numbers of one driver run."""

    def __init__(self, out_dir, files, final_cost, history, n_ranks):
        self.out_dir = Path(out_dir)
        self.files = files
        self.final_cost = final_cost
        self.history = history
        self.n_ranks = n_ranks


def _run_krylov(problem, cfg):
    res = problem.incremental_outer_loop(cfg.n_outer, cfg.n_inner,
                                         solver=cfg.formulation,
                                         tol=cfg.solver_tol)
    history = res.history
    trace = []
    row = 0
    for outer, rep in enumerate(res.reports, start=1):
        norms = rep.residual_norms
        for m in range(len(rep.iterates)):
            j_here = history[row][2]
            trace.append((cfg.formulation, m, float(norms[m]), j_here))
            row += 1
    return res.delta_z, history, trace, None, 1


def _run_dd(problem, cfg):
    tiles = build_tiles(problem.model.grid, cfg.ntile_i, cfg.ntile_j,
                        cfg.halo)
    dd_cfg = DDConfig(n_bar=cfg.n_bar, tau_dd=cfg.tau_dd,
                      n_inner=cfg.n_inner, inner_tol=cfg.inner_tol,
                      alpha=cfg.alpha, beta=cfg.beta, gamma=cfg.gamma,
                      omega=cfg.omega)
    res = dd_outer_loop(problem, tiles, dd_cfg)
    cb = problem.cost(res.delta_z)
    history = [(1, res.n_iterations, cb.J, cb.Jb, cb.Jo)]
    # per-sweep trace: halo mismatch plus the summed local costs
    local_j = {}
    for n, tile, window, inner, j_local, mismatch in res.trace_rows:
        local_j[n] = local_j.get(n, 0.0) + j_local
    trace = [(cfg.formulation, n, float(res.mismatch_history[n - 1]),
              local_j[n])
             for n in sorted(local_j)]
    return res.delta_z, history, trace, res.trace_rows, res.world.n_ranks


def run_experiment(cfg, out_dir=None):
    """Run the configured formulation and write the artifact files."""
    t0 = time.perf_counter()
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)

    if cfg.formulation == "dd4dvar":
        delta_z, history, trace, dd_rows, n_ranks = _run_dd(problem, cfg)
    else:
        delta_z, history, trace, dd_rows, n_ranks = _run_krylov(problem, cfg)

    files = {}

    def emit(name, header, rows):
        path = out / name
        _write_csv(path, header, rows)
        files[name] = path

    emit("cost_history.csv", "outer,inner,J,Jb,Jo",
         [(o, m, j, jb, jo) for o, m, j, jb, jo in history])
    emit("solver_trace.csv", "solver,iteration,residual,J", trace)
    if dd_rows is not None:
        emit("dd_trace.csv", "dd_iter,tile,window,inner_iters,J_local,"
             "halo_mismatch",
             [(n, t, w, i, jl, hm) for n, t, w, i, jl, hm in dd_rows])

    if cfg.impact:
        grid = problem.model.grid
        col = cfg.impact_col if cfg.impact_col != -1 else grid.nx // 2
        n_avg = cfg.impact_n_avg if cfg.impact_n_avg != -1 else cfg.n_steps
        functional = column_section(grid, col, n_avg,
                                    n_fields=problem.model.n_fields)
        rep = observation_impact(problem, functional)
        emit("impact.csv", "platform,count,NL,TL,IC,FC,BC", rep.rows())
        s = adjoint_sensitivity(problem.model, problem.windows,
                                problem.layout, problem.background_traj,
                                functional)
        chk = observation_sensitivity(problem.background_operator(),
                                      problem.b_cov, problem.r_cov,
                                      problem.background_innovations(), s)
        emit("sensitivity.csv", "actual,linearized,gap",
             [(chk.actual, chk.linearized,
               abs(chk.actual - chk.linearized))])

    elapsed = time.perf_counter() - t0
    emit("timing.csv", "rank,seconds",
         [(r, elapsed) for r in range(n_ranks)])

    config_text = emit_config(cfg)
    manifest = {
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": cfg.seed,
        "files": {name: {"size": files[name].stat().st_size,
                         "sha256": _sha256(files[name])}
                  for name in sorted(files)},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    files["manifest.json"] = out / "manifest.json"

    final_cost = history[-1][2]
    return ExperimentResult(out, files, final_cost, history, n_ranks)
