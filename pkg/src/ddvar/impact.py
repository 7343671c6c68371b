"""Observation-impact and sensitivity diagnostics.

Everything here works on a scalar functional of the analysed trajectory,

    I(x) = (1/N) sum_{i=1..N} h . x_i,

a time average of a linear weighting h of the state over the first N levels
after the initial time.  The adjoint of the tangent chain turns h into a
control-space sensitivity, the adjoint of the Kalman gain turns that into an
observation-space vector g, and the pairing of g with the innovations splits
the analysis-induced change of I into one contribution per observation.
"""

from dataclasses import dataclass, field

import numpy as np

from .assim import kalman_gain_adjoint_apply, kalman_gain_apply
from .control import ControlVector


class TransportFunctional:
    """Averaged linear functional of a trajectory.

    weights holds one scalar per state entry (n_fields, nx, ny); n_avg is
    the number of post-initial time levels averaged over.
    """

    def __init__(self, weights, n_avg):
        weights = np.asarray(weights, dtype=float)
        if weights.ndim != 3:
            raise ValueError("weights must have shape (n_fields, nx, ny), "
                             f"got {weights.shape}")
        if not np.all(np.isfinite(weights)):
            raise ValueError("functional weights must be finite")
        if not np.any(weights != 0.0):
            raise ValueError("functional weights need at least one nonzero "
                             "entry")
        n_avg = int(n_avg)
        if n_avg < 1:
            raise ValueError("n_avg must be >= 1")
        self.weights = weights
        self.n_avg = n_avg


def column_section(grid, col, n_avg, field=0, n_fields=1):
    """Unit weights along one grid column (fixed x index, all y)."""
    col = int(col)
    if not 0 <= col < grid.nx:
        raise ValueError(f"column index {col} outside grid with nx={grid.nx}")
    w = np.zeros((n_fields, grid.nx, grid.ny))
    w[field, col, :] = 1.0
    return TransportFunctional(w, n_avg)


def _states_of(traj):
    return np.asarray(getattr(traj, "states", traj), dtype=float)


def evaluate_functional(traj, functional):
    """I(x) averaged over levels 1..n_avg of the trajectory."""
    states = _states_of(traj)
    h, n_avg = functional.weights, functional.n_avg
    if states.ndim != 4 or states.shape[1:] != h.shape:
        raise ValueError(f"trajectory states of shape {states.shape} do not "
                         f"match functional weights {h.shape}")
    if states.shape[0] < n_avg + 1:
        raise ValueError(f"trajectory has {states.shape[0]} levels but the "
                         f"average needs {n_avg + 1}")
    total = 0.0
    for lev in range(1, n_avg + 1):
        total += float(np.vdot(h, states[lev]))
    return total / n_avg


def adjoint_sensitivity(model, windows, layout, traj, functional):
    """Control-space gradient of the functional along the tangent chain.

    One reverse sweep with the averaging weight injected at every level it
    touches; equals the sum of per-level adjoint sweeps.
    """
    states = _states_of(traj)
    n_avg = functional.n_avg
    n_steps = windows.n_steps
    if n_avg > n_steps:
        raise ValueError(f"functional n_avg {n_avg} exceeds the window's "
                         f"{n_steps} steps")
    h = functional.weights / n_avg
    out = ControlVector(layout)
    p = h.copy() if n_avg == n_steps else np.zeros_like(h)
    for step in range(n_steps, 0, -1):
        k = windows.window_of_step(step)
        p, df_star, db_star = model.step_ad(states[step - 1], p)
        out.f(k)[:] += df_star
        if layout.has_boundary:
            out.b(k)[:] += db_star
        if 1 <= step - 1 <= n_avg:
            p = p + h
    out.x0[:] += p
    return out.data


@dataclass
class PlatformImpact:
    """One platform's share of the analysis impact on the functional."""
    platform: str
    count: int
    nl: float
    tl: float
    ic: float
    fc: float
    bc: float


@dataclass
class ImpactReport:
    """Per-observation and per-segment split of the functional change.

    per_obs[l] = d_l * g_l; total_tl is their sum.  density is the
    control-space impact density (analysis increment times sensitivity),
    and g_x / g_f / g_b are its segment-masked copies, so they reassemble
    density exactly.  ic / fc / bc are the segment sums.
    """
    n_obs: int
    per_obs: np.ndarray
    g_obs: np.ndarray
    total_tl: float
    total_nl: float
    i_a: float
    i_b: float
    density: np.ndarray
    g_x: np.ndarray
    g_f: np.ndarray
    g_b: np.ndarray
    ic: float
    fc: float
    bc: float
    platform_rows: list = field(default_factory=list)

    def rows(self):
        """Table rows (platform, count, NL, TL, IC, FC, BC), 'all' last."""
        out = [(r.platform, r.count, r.nl, r.tl, r.ic, r.fc, r.bc)
               for r in self.platform_rows]
        out.append(("all", self.n_obs, self.total_nl, self.total_tl,
                    self.ic, self.fc, self.bc))
        return out


def _segment_split(layout, density):
    g_x = np.zeros_like(density)
    g_f = np.zeros_like(density)
    g_b = np.zeros_like(density)
    sl = layout.slice_of("x0")
    g_x[sl] = density[sl]
    for k in range(layout.n_t):
        sl = layout.slice_of(f"f{k}")
        g_f[sl] = density[sl]
    if layout.has_boundary:
        for k in range(layout.n_t):
            sl = layout.slice_of(f"b{k}")
            g_b[sl] = density[sl]
    return g_x, g_f, g_b


def observation_impact(problem, functional, tol=1e-12, maxit=None):
    """Split the analysis change of the functional across observations.

    The observation-space sensitivity is g = K^T s with s the adjoint of
    the averaged functional, so d_l g_l is observation l's contribution and
    the headline TL impact is their sum.  The nonlinear reference runs the
    model from the gain-applied increment.  Each platform row re-applies
    the gain to that platform's innovations alone.
    """
    d = problem.background_innovations()
    g_op = problem.background_operator()
    layout = problem.layout
    s = adjoint_sensitivity(problem.model, problem.windows, layout,
                            problem.background_traj, functional)
    g = kalman_gain_adjoint_apply(g_op, problem.b_cov, problem.r_cov, s,
                                  tol=tol, maxit=maxit)
    per_obs = d * g
    total_tl = float(np.sum(per_obs))

    z_a = kalman_gain_apply(g_op, problem.b_cov, problem.r_cov, d, tol=tol,
                            maxit=maxit)
    i_b = evaluate_functional(problem.background_traj, functional)
    i_a = evaluate_functional(problem.run_with_increment(z_a), functional)

    density = z_a * s
    g_x, g_f, g_b = _segment_split(layout, density)
    ic = float(np.sum(g_x))
    fc = float(np.sum(g_f))
    bc = float(np.sum(g_b))

    names = []
    for name in problem.obs.platforms:
        if name not in names:
            names.append(name)
    rows = []
    for name in names:
        mask = np.array([p == name for p in problem.obs.platforms])
        d_p = np.where(mask, d, 0.0)
        z_p = kalman_gain_apply(g_op, problem.b_cov, problem.r_cov, d_p,
                                tol=tol, maxit=maxit)
        nl_p = evaluate_functional(problem.run_with_increment(z_p),
                                   functional) - i_b
        dens_p = z_p * s
        px, pf, pb = _segment_split(layout, dens_p)
        rows.append(PlatformImpact(platform=name, count=int(np.sum(mask)),
                                   nl=nl_p,
                                   tl=float(np.sum(per_obs[mask])),
                                   ic=float(np.sum(px)),
                                   fc=float(np.sum(pf)),
                                   bc=float(np.sum(pb))))

    return ImpactReport(n_obs=problem.obs.n_obs, per_obs=per_obs, g_obs=g,
                        total_tl=total_tl, total_nl=i_a - i_b, i_a=i_a,
                        i_b=i_b, density=density, g_x=g_x, g_f=g_f, g_b=g_b,
                        ic=ic, fc=fc, bc=bc, platform_rows=rows)


@dataclass
class SensitivityCheck:
    """Recomputed versus linearized response to an observation shift."""
    actual: float
    linearized: float
    analysis_shift: np.ndarray
    gain_adjoint: np.ndarray


def observation_sensitivity(g_op, b_cov, r_cov, d, s, delta_y=None,
                            tol=1e-10, maxit=None):
    """Shift the observations by delta_y (default: the innovations) and
    compare the recomputed analysis response of the functional pairing
    s . dz against the linearized prediction g . delta_y."""
    d = np.asarray(d, dtype=float)
    s = np.asarray(s, dtype=float)
    delta_y = d.copy() if delta_y is None else np.asarray(delta_y, dtype=float)
    if delta_y.shape != d.shape:
        raise ValueError("delta_y must match the innovation vector")
    dz0 = kalman_gain_apply(g_op, b_cov, r_cov, d, tol=tol, maxit=maxit)
    dz1 = kalman_gain_apply(g_op, b_cov, r_cov, d + delta_y, tol=tol,
                            maxit=maxit)
    shift = dz1 - dz0
    g = kalman_gain_adjoint_apply(g_op, b_cov, r_cov, s, tol=tol, maxit=maxit)
    return SensitivityCheck(actual=float(np.vdot(s, shift)),
                            linearized=float(np.vdot(g, delta_y)),
                            analysis_shift=shift, gain_adjoint=g)


@dataclass
class ForecastImpact:
    """Functional change carried beyond the window by two forecasts."""
    delta_i: float
    i_a: float
    i_b: float
    misfit_a: float = None
    misfit_b: float = None
    reduction: float = None


def _extended_states(problem, z_flat, horizon):
    """Nonlinear run continued past the window with background forcing."""
    v = ControlVector(problem.layout, z_flat)
    n_steps = problem.windows.n_steps
    forcing = [v.f(problem.windows.window_of_step(s))
               for s in range(1, n_steps + 1)]
    forcing += [np.zeros_like(forcing[0])] * horizon
    boundary = None
    if problem.layout.has_boundary:
        boundary = [v.b(problem.windows.window_of_step(s))
                    for s in range(1, n_steps + 1)]
        boundary += [np.zeros_like(boundary[0])] * horizon
    traj = problem.model.run_nl(problem.x_b + v.x0, forcing=forcing,
                                boundary=boundary,
                                n_steps=n_steps + horizon)
    return traj.states


def forecast_impact(problem, z_a, horizon, functional, z_ref=None,
                    verifying_obs=None):
    """Run forecasts from the analysed and reference increments and report
    the functional difference over the forecast range.

    The functional averages over the first n_avg forecast levels, so the
    horizon must cover them.  With verifying observations the report also
    carries both quadratic misfits and their reduction.
    """
    horizon = int(horizon)
    if horizon < 1:
        raise ValueError("forecast horizon must be >= 1 step")
    if functional.n_avg > horizon:
        raise ValueError(f"functional n_avg {functional.n_avg} exceeds the "
                         f"forecast horizon {horizon}")
    if z_ref is None:
        z_ref = np.zeros(problem.layout.n_z)
    n_steps = problem.windows.n_steps
    states_a = _extended_states(problem, z_a, horizon)
    states_b = _extended_states(problem, z_ref, horizon)
    i_a = evaluate_functional(states_a[n_steps:], functional)
    i_b = evaluate_functional(states_b[n_steps:], functional)
    out = ForecastImpact(delta_i=i_a - i_b, i_a=i_a, i_b=i_b)
    if verifying_obs is not None:
        def misfit(states):
            resid = verifying_obs.sample(states) - verifying_obs.values
            return 0.5 * float(np.sum(resid * resid
                                      / verifying_obs.variances))
        out.misfit_a = misfit(states_a)
        out.misfit_b = misfit(states_b)
        out.reduction = out.misfit_b - out.misfit_a
    return out


@dataclass
class CostHistoryReport:
    """Cost-history table with the consistency level E[J_min] = n_obs / 2."""
    rows: tuple
    j_min: float
    final_j: float

    @property
    def final_ratio(self):
        return self.final_j / self.j_min


def cost_history_report(history, n_obs):
    """Normalize (outer, inner, J, Jb, Jo) rows and attach the expected
    minimum n_obs / 2 of a consistent twin analysis."""
    if int(n_obs) < 1:
        raise ValueError("n_obs must be >= 1")
    rows = tuple((int(o), int(m), float(j), float(jb), float(jo))
                 for o, m, j, jb, jo in history)
    if not rows:
        raise ValueError("history must not be empty")
    return CostHistoryReport(rows=rows, j_min=n_obs / 2.0,
                             final_j=rows[-1][2])
