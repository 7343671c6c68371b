"""Global incremental 4D-Var: cost, gradient, analyses, outer loop.

The quadratic subproblem at a fixed linearization is

    J(dz) = 1/2 dz^T B^-1 dz + 1/2 (G dz - d)^T R^-1 (G dz - d)

over the control vector dz (initial state, per-window forcing, per-window
boundary increments).  G composes the tangent-linear model sweep with the
observation sampler; its exact transpose is one adjoint sweep.  Two
closed-form routes to the minimizer are kept side by side,

    primal:  (B^-1 + G^T R^-1 G) dz = G^T R^-1 d   (B-preconditioned CG)
    dual:    dz = B G^T w,  (G B G^T + R) w = d    (R^-1-preconditioned)

and must agree; acceptance checks hold them to 1e-8 of each other.

The incremental outer loop relinearizes about the accumulated increment,
recomputes innovations, and minimizes again.  The primal route solves for
the correction dz with the background term shifted by the accumulated
increment; dual routes solve for the total increment against the shifted
innovation d + G z_accum.  Both evaluate the same total cost, so history
rows are comparable across solver choices.
"""

from dataclasses import dataclass

import numpy as np

from .control import ControlVector
from .krylov import LinearOperator, dual_cg_rhalf, minres_dual, pcg, rpcg
from .model import ModelDivergedError
from .observations import innovations

__all__ = [
    "AnalysisNotConverged",
    "AnalysisResult",
    "AssimilationProblem",
    "CostBreakdown",
    "TangentObsOperator",
    "cost",
    "dual_analysis",
    "dual_operator",
    "gradient",
    "kalman_gain_adjoint_apply",
    "kalman_gain_apply",
    "primal_analysis",
    "primal_operator",
]

SOLVERS = ("is4dvar", "rbl4dvar", "minres", "rpcg")


class AnalysisNotConverged(RuntimeError):
    pass


@dataclass(frozen=True)
class CostBreakdown:
    J: float
    Jb: float
    Jo: float

    def __post_init__(self):
        if self.Jb < 0 or self.Jo < 0:
            raise ValueError(f"negative cost terms Jb={self.Jb} Jo={self.Jo}")
        if abs(self.J - (self.Jb + self.Jo)) > 1e-12 * max(self.J, 1.0):
            raise ValueError("J must equal Jb + Jo")


class TangentObsOperator:
    """G: control increments -> observation space, about a fixed trajectory.

    forward runs the tangent-linear sweep (adding the window's constant
    forcing and boundary increments at each step) and samples it at the
    observations; adjoint scatters observation weights onto the levels and
    runs one backward sweep, accumulating the per-window segments.
    """

    def __init__(self, model, traj, windows, obs, layout):
        self.model = model
        self.traj = getattr(traj, "states", traj)
        self.windows = windows
        self.obs = obs
        self.layout = layout
        if len(self.traj) != windows.n_steps + 1:
            raise ValueError("trajectory does not cover the windows")

    @property
    def shape(self):
        return (self.obs.n_obs, self.layout.n_z)

    def tl_states(self, dz_flat):
        v = ControlVector(self.layout, dz_flat)
        dx = v.x0.copy()
        states = [dx]
        for step in range(1, self.windows.n_steps + 1):
            k = self.windows.window_of_step(step)
            db = v.b(k) if self.layout.has_boundary else None
            dx = self.model.step_tl(self.traj[step - 1], dx, df=v.f(k), db=db)
            states.append(dx)
        return states

    def forward(self, dz_flat):
        return self.obs.sample(self.tl_states(dz_flat))

    def adjoint(self, w):
        n_steps = self.windows.n_steps
        scat = self.obs.scatter(w, n_steps + 1, self.model.n_fields)
        out = ControlVector(self.layout)
        p = scat[n_steps].copy()
        for step in range(n_steps, 0, -1):
            k = self.windows.window_of_step(step)
            p_prev, df_star, db_star = self.model.step_ad(self.traj[step - 1], p)
            out.f(k)[:] += df_star
            if self.layout.has_boundary:
                out.b(k)[:] += db_star
            p = p_prev + scat[step - 1]
        out.x0[:] += p
        return out.data

    def as_linear_operator(self):
        return LinearOperator(self.shape, self.forward, self.adjoint)


def cost(dz, d, b_cov, r_cov, g_op):
    """Quadratic cost of a (total) increment against innovations d."""
    dz = np.asarray(dz, dtype=float)
    if dz.shape != (g_op.shape[1],):
        raise ValueError(f"control vector must have length {g_op.shape[1]}, "
                         f"got shape {dz.shape}")
    jb = 0.5 * np.vdot(dz, b_cov.apply_inv(dz))
    misfit = g_op.apply(dz) - d
    jo = 0.5 * np.vdot(misfit, r_cov.apply_inv(misfit))
    return CostBreakdown(J=jb + jo, Jb=jb, Jo=jo)


def gradient(dz, d, b_cov, r_cov, g_op):
    """grad J = B^-1 dz + G^T R^-1 (G dz - d): one TL and one AD sweep."""
    dz = np.asarray(dz, dtype=float)
    misfit = g_op.apply(dz) - d
    return b_cov.apply_inv(dz) + g_op.apply_t(r_cov.apply_inv(misfit))


def primal_operator(g_op, b_cov, r_cov):
    n = g_op.shape[1]

    def mv(v):
        return b_cov.apply_inv(v) + g_op.apply_t(r_cov.apply_inv(g_op.apply(v)))
    return LinearOperator((n, n), mv)


def dual_operator(g_op, b_cov, r_cov):
    m = g_op.shape[0]

    def mv(w):
        return g_op.apply(b_cov.apply(g_op.apply_t(w))) + r_cov.apply(w)
    return LinearOperator((m, m), mv)


def _check_converged(rep, require):
    if require and not rep.converged:
        raise AnalysisNotConverged(
            f"{rep.solver} stopped after {rep.iterations} iterations with "
            f"relative residual {rep.residual_norms[-1] / rep.residual_norms[0]:.3e}")
    return rep


def primal_analysis(g_op, b_cov, r_cov, d, tol=1e-10, maxit=None,
                    reorthogonalize=False, require_convergence=True,
                    rhs_extra=None):
    """Solve (B^-1 + G^T R^-1 G) dz = G^T R^-1 d [+ rhs_extra], B-preconditioned."""
    rhs = g_op.apply_t(r_cov.apply_inv(np.asarray(d, dtype=float)))
    if rhs_extra is not None:
        rhs = rhs + rhs_extra
    rep = pcg(primal_operator(g_op, b_cov, r_cov), rhs, precond=b_cov,
              tol=tol, maxit=maxit, reorthogonalize=reorthogonalize,
              name="is4dvar")
    return _check_converged(rep, require_convergence)


def dual_analysis(g_op, b_cov, r_cov, d, solver="rbl4dvar", tol=1e-10,
                  maxit=None, reorthogonalize=False, require_convergence=True):
    """Observation-space analysis dz = B G^T (G B G^T + R)^-1 d."""
    def bg_t(w):
        return b_cov.apply(g_op.apply_t(w))

    if solver == "rbl4dvar":
        rep = dual_cg_rhalf(dual_operator(g_op, b_cov, r_cov), d, r_cov,
                            tol=tol, maxit=maxit,
                            reorthogonalize=reorthogonalize, bg_t=bg_t)
    elif solver == "minres":
        rep = minres_dual(dual_operator(g_op, b_cov, r_cov), d, r_cov,
                          tol=tol, maxit=maxit, bg_t=bg_t)
    elif solver == "rpcg":
        rep = rpcg(g_op, b_cov, r_cov, d, tol=tol, maxit=maxit,
                   reorthogonalize=reorthogonalize)
    else:
        raise ValueError(f"unknown dual solver {solver!r}")
    return _check_converged(rep, require_convergence)


def kalman_gain_apply(g_op, b_cov, r_cov, d, tol=1e-10, maxit=None):
    """K d with K = B G^T (G B G^T + R)^-1."""
    rep = dual_analysis(g_op, b_cov, r_cov, d, solver="rbl4dvar", tol=tol,
                        maxit=maxit)
    return rep.x_control


def kalman_gain_adjoint_apply(g_op, b_cov, r_cov, v, tol=1e-10, maxit=None):
    """K^T v = (G B G^T + R)^-1 G B v, an observation-space vector."""
    rhs = g_op.apply(b_cov.apply(np.asarray(v, dtype=float)))
    precond = LinearOperator((rhs.size, rhs.size), r_cov.apply_inv)
    rep = pcg(dual_operator(g_op, b_cov, r_cov), rhs, precond=precond,
              tol=tol, maxit=maxit, name="kalman_adjoint")
    _check_converged(rep, True)
    return rep.x


@dataclass
class AnalysisResult:
    delta_z: np.ndarray
    trajectory: list
    history: list
    reports: list
    n_outer: int

    @property
    def final_cost(self):
        return self.history[-1][2]


class AssimilationProblem:
    """Model, covariances and observations bound into one 4D-Var problem."""

    def __init__(self, model, windows, layout, b_cov, r_cov, obs, x_b):
        if b_cov.n != layout.n_z:
            raise ValueError(f"control covariance order {b_cov.n} does not "
                             f"match layout n_z {layout.n_z}")
        if r_cov.n != obs.n_obs:
            raise ValueError("observation covariance order does not match set")
        self.model = model
        self.windows = windows
        self.layout = layout
        self.b_cov = b_cov
        self.r_cov = r_cov
        self.obs = obs
        self.x_b = np.asarray(x_b, dtype=float)
        self.background_traj = self.run_with_increment(np.zeros(layout.n_z))

    def run_with_increment(self, z_flat):
        """Nonlinear run from x_b with the increment's forcing/boundary."""
        v = ControlVector(self.layout, z_flat)
        n_steps = self.windows.n_steps
        forcing = [v.f(self.windows.window_of_step(s))
                   for s in range(1, n_steps + 1)]
        boundary = None
        if self.layout.has_boundary:
            boundary = [v.b(self.windows.window_of_step(s))
                        for s in range(1, n_steps + 1)]
        traj = self.model.run_nl(self.x_b + v.x0, forcing=forcing,
                                 boundary=boundary, n_steps=n_steps)
        return traj.states

    def operator_about(self, traj):
        return TangentObsOperator(self.model, traj, self.windows, self.obs,
                                  self.layout).as_linear_operator()

    def background_operator(self):
        return self.operator_about(self.background_traj)

    def background_innovations(self):
        return innovations(self.background_traj, self.obs)

    def cost(self, dz, d=None, g_op=None):
        g_op = g_op if g_op is not None else self.background_operator()
        d = d if d is not None else self.background_innovations()
        return cost(dz, d, self.b_cov, self.r_cov, g_op)

    def gradient(self, dz, d=None, g_op=None):
        g_op = g_op if g_op is not None else self.background_operator()
        d = d if d is not None else self.background_innovations()
        return gradient(dz, d, self.b_cov, self.r_cov, g_op)

    def primal_analysis(self, d=None, **kw):
        g_op = self.background_operator()
        d = d if d is not None else self.background_innovations()
        return primal_analysis(g_op, self.b_cov, self.r_cov, d, **kw)

    def dual_analysis(self, d=None, solver="rbl4dvar", **kw):
        g_op = self.background_operator()
        d = d if d is not None else self.background_innovations()
        return dual_analysis(g_op, self.b_cov, self.r_cov, d, solver=solver, **kw)

    def incremental_outer_loop(self, n_outer, n_inner, solver="is4dvar",
                               tol=1e-10, reorthogonalize=False):
        """Relinearize, re-innovate, minimize; repeat n_outer times."""
        if n_outer < 1 or n_inner < 1:
            raise ValueError("n_outer and n_inner must be >= 1")
        if solver not in SOLVERS:
            raise ValueError(f"unknown solver {solver!r}, pick from {SOLVERS}")
        z_bar = np.zeros(self.layout.n_z)
        history = []
        reports = []
        for outer in range(1, n_outer + 1):
            try:
                traj = self.run_with_increment(z_bar)
            except ModelDivergedError as exc:
                raise RuntimeError(
                    f"model diverged while relinearizing outer iteration "
                    f"{outer}") from exc
            gop = self.operator_about(traj)
            d = innovations(traj, self.obs)
            d_tilde = d + gop.apply(z_bar)
            if solver == "is4dvar":
                shift = None if not z_bar.any() else -self.b_cov.apply_inv(z_bar)
                rep = primal_analysis(gop, self.b_cov, self.r_cov, d,
                                      tol=tol, maxit=n_inner,
                                      reorthogonalize=reorthogonalize,
                                      require_convergence=False,
                                      rhs_extra=shift)
                totals = [z_bar + it for it in rep.iterates]
                z_new = z_bar + rep.x
            else:
                rep = dual_analysis(gop, self.b_cov, self.r_cov, d_tilde,
                                    solver=solver, tol=tol, maxit=n_inner,
                                    reorthogonalize=reorthogonalize,
                                    require_convergence=False)
                bg_t = lambda w: self.b_cov.apply(gop.apply_t(w))
                totals = [bg_t(it) for it in rep.iterates]
                z_new = rep.x_control
            for m, z_m in enumerate(totals):
                cb = cost(z_m, d_tilde, self.b_cov, self.r_cov, gop)
                history.append((outer, m, cb.J, cb.Jb, cb.Jo))
            reports.append(rep)
            z_bar = z_new
        final_traj = self.run_with_increment(z_bar)
        return AnalysisResult(delta_z=z_bar, trajectory=final_traj,
                              history=history, reports=reports,
                              n_outer=n_outer)
