"""Space-time domain-decomposed incremental assimilation.

The control vector is partitioned into blocks (tile i, window k): window-0
blocks own their tile's initial-state nodes, and every block owns its
tile's forcing nodes and physical-boundary ring nodes for its window.
Each outer iterate, every block

  1. runs a local tangent-linear sweep of the current assembled increment
     over its interior-plus-halo box, reading halo values and the
     window-start state from frozen neighbor traces,
  2. runs the matching local adjoint sweep (halo values from adjoint
     traces, innovation residuals scattered over the box) and restricts
     the result to its owned components, which together with the
     distributed B^-1 term gives the owned slice of the global gradient,
  3. solves a local SPD quadratic in its owned components (restricted
     covariances, truncated local propagator, per-level overlap penalty)
     by preconditioned CG, and
  4. adds its correction to the assembled increment; traces are then
     exchanged through the simulated communicator and the largest relative
     trace change decides convergence.

Whenever the traces agree with the local sweeps (in particular at any
stationary point of the iteration), each local sweep reproduces the
restriction of the corresponding global sweep exactly, so the fixed point
of the iteration is the global analysis.  The local quadratic and the
seam corrections only shape the convergence rate.

Halo handling during a sweep: after the raw stencil step, owned physical-
ring cells take their prescribed values, halo strips are overwritten from
the neighbor trace plus the theta seam correction (the step operator
applied to the difference between the locally evolved strip values and
the trace), and box corners are zeroed.  The theta terms and their
transposes are driven by differences that vanish at consistency, so they
never move the fixed point.  The correction propagator used inside the
local solve is stricter: strip cells on the box edge or the physical ring
are zeroed every step (zero inflow), the remaining strip cells evolve
freely, and the per-level overlap operator penalizes the values they
develop.  Its adjoint is an exact transpose, which keeps the local
quadratic symmetric.
"""

from dataclasses import dataclass

import numpy as np

from .comm import World, create_inter, halo_exchange, split
from .control import ControlVector
from .grid import SIDES, Grid, boundary_ring_indices, restrict
from .krylov import LinearOperator, pcg
from .model import ModelConfig, ModelDivergedError, SurrogateModel
from .observations import innovations

__all__ = [
    "DDConfig",
    "DDResult",
    "DDSolver",
    "LocalProblem",
    "NeighborTrace",
    "build_local_problems",
    "dd_outer_loop",
    "local_ad_step",
    "local_cost",
    "local_model_solve",
    "local_tl_step",
    "overlap_operator",
    "theta_correction",
]

_TAG_TIME_TL = 1
_TAG_TIME_AD = 2
_TAG_OBS = 30
_TAG_HALO = 100


@dataclass(frozen=True)
class DDConfig:
    n_bar: int = 50
    tau_dd: float = 1e-10
    inner_solver: str = "pcg"
    n_inner: int = 30
    inner_tol: float = 1e-4
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    omega: float = 1.0

    def __post_init__(self):
        if self.n_bar < 1:
            raise ValueError("n_bar must be >= 1")
        if self.tau_dd <= 0:
            raise ValueError("tau_dd must be > 0")
        if self.inner_solver != "pcg":
            raise ValueError(f"unsupported local inner solver "
                             f"{self.inner_solver!r} (only pcg)")
        if self.n_inner < 1:
            raise ValueError("n_inner must be >= 1")
        if not 0.0 < self.omega < 2.0:
            raise ValueError("omega must lie in (0, 2)")


@dataclass
class NeighborTrace:
    """Frozen neighbor data one block reads during its sweeps.

    tl_halo / ad_halo map side -> (n_levels, n_fields, si, sj) halo strip
    values per local window level.  start_box is the window-start state on
    the full box (windows k > 0), ad_terminal the window-end adjoint state
    on the full box (windows k < n_t - 1).  obs_res holds R^-1-weighted
    misfit residuals for every observation of the window, in window order.
    """
    tl_halo: dict
    ad_halo: dict
    start_box: np.ndarray = None
    ad_terminal: np.ndarray = None
    obs_res: np.ndarray = None


def theta_correction(direction, op_action, own, neighbor, gamma):
    """gamma * (op(own) - op(neighbor)), the seam correction of one step.

    direction ("I" for west/east seams, "J" for south/north) only tags
    which family of strips the data belongs to; own and neighbor are
    same-shaped halo values and op_action the linear local step action.
    The result vanishes whenever the two variants agree.
    """
    if direction not in ("I", "J"):
        raise ValueError(f"direction must be 'I' or 'J', got {direction!r}")
    own = np.asarray(own, dtype=float)
    neighbor = np.asarray(neighbor, dtype=float)
    if own.shape != neighbor.shape:
        raise ValueError("own and neighbor halo shapes differ")
    if gamma == 0.0 or own.size == 0:
        return np.zeros_like(own)
    return gamma * (op_action(own) - op_action(neighbor))


def overlap_operator(own, neighbor, strip_cov, beta):
    """Overlap penalty on one halo strip and its gradient.

    Value beta * ||own - neighbor||^2 in the inverse-covariance metric of
    the strip (no 1/2 in front), gradient 2 beta B^-1 (own - neighbor)
    with respect to the own values; the neighbor values are constants of
    the current outer iterate.
    """
    own = np.asarray(own, dtype=float)
    neighbor = np.asarray(neighbor, dtype=float)
    if own.shape != neighbor.shape:
        raise ValueError("own and neighbor strip shapes differ")
    diff = (own - neighbor).ravel()
    if diff.size == 0 or beta == 0.0:
        return 0.0, np.zeros_like(own)
    binv_diff = strip_cov.apply_inv(diff)
    value = beta * float(np.vdot(diff, binv_diff))
    grad = (2.0 * beta * binv_diff).reshape(own.shape)
    return value, grad


class LocalProblem:
    """Everything one (tile, window) block needs for its sweeps and solve."""

    def __init__(self, tile, window, model, grid, windows, layout_ctl,
                 obs, weights):
        self.tile = tile
        self.window = window
        self.grid = grid
        self.windows = windows
        self.layout_ctl = layout_ctl
        self.alpha, self.beta, self.gamma = weights
        self.n_fields = model.n_fields
        self.prescribed = model.config.boundary == "prescribed"
        self.lin_states = None  # set once the linearization is known

        bnx, bny = tile.box_shape
        box_grid = Grid(nx=bnx, ny=bny, dx=grid.dx, dy=grid.dy, dt=grid.dt,
                        n_steps=1)
        self.box_model = SurrogateModel(
            box_grid, ModelConfig(kind=model.config.kind,
                                  advect=model.config.advect,
                                  viscosity=model.config.viscosity,
                                  boundary="periodic"))
        self.n_levels = windows.sizes[window]
        self.levels = list(range(windows.starts[window],
                                 windows.end(window) + 1))

        # strip geometry: local slices, the box-edge line of each strip,
        # and the cells where a locally evolved value is meaningful
        # (inside the strip, off the box edge, off the physical ring)
        self.strips = {}
        self.outer_rel = {}
        self.own_valid = {}
        for side in SIDES:
            if tile.neighbors.get(side) is None:
                continue
            sl = tile.halo_slices_local(side)
            self.strips[side] = sl
            ilen = sl[0].stop - sl[0].start
            jlen = sl[1].stop - sl[1].start
            gi = np.arange(sl[0].start, sl[0].stop) + tile.bi0
            gj = np.arange(sl[1].start, sl[1].stop) + tile.bj0
            valid = np.ones((ilen, jlen), dtype=bool)
            if self.prescribed:
                on_ring = ((gi[:, None] == 0) | (gi[:, None] == grid.nx - 1)
                           | (gj[None, :] == 0) | (gj[None, :] == grid.ny - 1))
                valid &= ~on_ring
            if side == "west":
                outer = (slice(0, 1), slice(None))
            elif side == "east":
                outer = (slice(ilen - 1, ilen), slice(None))
            elif side == "south":
                outer = (slice(None), slice(0, 1))
            else:
                outer = (slice(None), slice(jlen - 1, jlen))
            valid[outer] = False
            self.outer_rel[side] = outer
            self.own_valid[side] = valid

        # corner cells: box minus owned minus strips (kept at zero)
        live = np.zeros(tile.box_shape, dtype=bool)
        oi, oj = tile.owned_slices_local()
        live[oi, oj] = True
        for sl in self.strips.values():
            live[sl] = True
        self.live_mask = live
        self.corner_cells = np.nonzero(~live)

        # strip cells whose stencil reads a corner compute with zeroed
        # input, so their locally evolved values are not meaningful either
        if self.corner_cells[0].size:
            near = ~live
            shifted = np.zeros_like(near)
            shifted[1:, :] |= near[:-1, :]
            shifted[:-1, :] |= near[1:, :]
            shifted[:, 1:] |= near[:, :-1]
            shifted[:, :-1] |= near[:, 1:]
            for side, sl in self.strips.items():
                self.own_valid[side] &= ~shifted[sl]

        # box-edge lines on sides without a neighbor sit on the physical
        # boundary; the periodic box stencil wraps them onto the opposite
        # edge, so their adjoint values need a zero-inflow recomputation
        # (the full model wraps them onto chopped ring lines instead)
        self.phys_lines = []
        if self.prescribed:
            if tile.neighbors.get("west") is None:
                self.phys_lines.append((slice(0, 1), slice(None)))
            if tile.neighbors.get("east") is None:
                self.phys_lines.append((slice(bnx - 1, bnx), slice(None)))
            if tile.neighbors.get("south") is None:
                self.phys_lines.append((slice(None), slice(0, 1)))
            if tile.neighbors.get("north") is None:
                self.phys_lines.append((slice(None), slice(bny - 1, bny)))

        # cells whose gradient components the block solve may trust: owned
        # cells plus meaningful strip cells
        keep = np.zeros(tile.box_shape, dtype=bool)
        keep[oi, oj] = True
        for side, sl in self.strips.items():
            sub = keep[sl]
            sub[self.own_valid[side]] = True
        self.rho_keep = keep

        # physical-ring cells of the box: owned ones carry the block's
        # boundary increments, the rest are neighbor territory
        if self.prescribed:
            ii, jj = boundary_ring_indices(grid.nx, grid.ny)
            own = ((ii >= tile.i0) & (ii < tile.i1)
                   & (jj >= tile.j0) & (jj < tile.j1))
            self.ring_pos = np.nonzero(own)[0]
            self.ring_ii = ii[own] - tile.bi0
            self.ring_jj = jj[own] - tile.bj0
            inbox = ((ii >= tile.bi0) & (ii < tile.bi1)
                     & (jj >= tile.bj0) & (jj < tile.bj1) & ~own)
            self.ring_halo_ii = ii[inbox] - tile.bi0
            self.ring_halo_jj = jj[inbox] - tile.bj0
        else:
            self.ring_pos = np.zeros(0, dtype=int)
            self.ring_ii = self.ring_jj = np.zeros(0, dtype=int)
            self.ring_halo_ii = self.ring_halo_jj = np.zeros(0, dtype=int)

        # node bookkeeping: flat global indices of owned and box nodes
        self.owned_local = tile.owned_slices_local()
        oh, ow = tile.owned_shape
        self.n_owned_nodes = oh * ow
        self.n_box_nodes = bnx * bny
        gi = np.arange(tile.i0, tile.i1)
        gj = np.arange(tile.j0, tile.j1)
        self.owned_node_idx = (gi[:, None] * grid.ny + gj[None, :]).ravel()
        gi = np.arange(tile.bi0, tile.bi1)
        gj = np.arange(tile.bj0, tile.bj1)
        self.box_node_idx = (gi[:, None] * grid.ny + gj[None, :]).ravel()
        self.strip_node_idx = {}
        for side, (si, sj) in self.strips.items():
            gsi = np.arange(si.start + tile.bi0, si.stop + tile.bi0)
            gsj = np.arange(sj.start + tile.bj0, sj.stop + tile.bj0)
            self.strip_node_idx[side] = (gsi[:, None] * grid.ny
                                         + gsj[None, :]).ravel()

        # observations of the window, and the subset this tile owns
        self.obs = obs
        self.window_obs_idx = np.asarray(
            [k for k in range(obs.n_obs)
             if windows.window_of_level(int(obs.levels[k])) == window],
            dtype=int)
        mine = [int(k) for k in self.window_obs_idx
                if tile.contains_point(obs.x[k], obs.y[k], grid)]
        self.own_obs_idx = np.asarray(mine, dtype=int)
        pos = {int(k): i for i, k in enumerate(self.window_obs_idx)}
        self.own_obs_pos = np.asarray([pos[k] for k in mine], dtype=int)
        # observations whose stencil lies inside the box: their R^-1 weight
        # curves the local quadratic even when a neighbor owns them, so the
        # local solve must carry them too
        touch = [int(k) for k in self.window_obs_idx
                 if int(obs.i0[k]) >= tile.bi0 and int(obs.i0[k]) + 1 < tile.bi1
                 and int(obs.j0[k]) >= tile.bj0
                 and int(obs.j0[k]) + 1 < tile.bj1]
        self.q_obs_idx = np.asarray(touch, dtype=int)
        self.q_obs_pos = np.asarray([pos[k] for k in touch], dtype=int)

        # control segments of the local solve: x0 (window 0) and f live on
        # the whole box so that the restricted-covariance prior matches the
        # principal block of the precision to the halo-truncation error;
        # only the owned part of a correction is ever assembled
        self.has_x0 = window == 0
        sizes = []
        if self.has_x0:
            sizes.append(self.n_fields * self.n_box_nodes)
        sizes.append(self.n_fields * self.n_box_nodes)
        if layout_ctl.has_boundary:
            sizes.append(self.n_fields * self.ring_pos.size)
        self.seg_sizes = sizes
        self.n_local = int(sum(sizes))

        # covariances, attached by build_local_problems: restricted ones
        # for preconditioning and the overlap metric, full segment ones
        # for the owned block of the precision
        self.cov_x = None
        self.cov_f = None
        self.cov_b = None
        self.strip_cov = {}
        self.full_cov = {}

    def owned_prec_apply(self, seg, v):
        """Owned principal block of the segment precision applied to v.

        The local quadratic is the restriction of the global one, so its
        curvature is the owned block of B^-1, not the inverse of the
        restricted covariance (the latter is smaller and lets the block
        corrections overshoot).
        """
        cov = self.full_cov[seg]
        if seg == "b":
            full = np.zeros((self.n_fields, cov.n))
            full[:, self.ring_pos] = v.reshape(self.n_fields, -1)
            out = cov.apply_inv(full.ravel()).reshape(self.n_fields, -1)
            return out[:, self.ring_pos].ravel()
        full = np.zeros((self.n_fields, cov.n))
        full[:, self.owned_node_idx] = v.reshape(self.n_fields, -1)
        out = cov.apply_inv(full.ravel()).reshape(self.n_fields, -1)
        return out[:, self.owned_node_idx].ravel()

    # -- local control packing ------------------------------------------

    def split_local(self, s):
        """Views of a flat local vector as (x0), f, (b) segments."""
        out = {}
        ofs = 0
        bnx, bny = self.tile.box_shape
        if self.has_x0:
            n = self.seg_sizes[0]
            out["x0"] = s[ofs:ofs + n].reshape(self.n_fields, bnx, bny)
            ofs += n
        n = self.n_fields * self.n_box_nodes
        out["f"] = s[ofs:ofs + n].reshape(self.n_fields, bnx, bny)
        ofs += n
        if self.layout_ctl.has_boundary:
            out["b"] = s[ofs:].reshape(self.n_fields, self.ring_pos.size)
        return out

    def owned_to_box(self, owned):
        box = np.zeros((self.n_fields,) + self.tile.box_shape)
        oi, oj = self.owned_local
        box[:, oi, oj] = owned
        return box

    def project_live(self, field):
        """Zero box cells the correction propagator keeps at zero.

        Everything outside the owned cells and the meaningful strip cells
        carries either wrapped stencil output or a neighbor's territory,
        so gradient components there are dropped before the local solve.
        """
        field[:, ~self.rho_keep] = 0.0
        return field

    def zero_box(self):
        return np.zeros((self.n_fields,) + self.tile.box_shape)

    # -- per-cell policies ----------------------------------------------

    def _apply_ring(self, state, b_own):
        if self.ring_pos.size:
            state[:, self.ring_ii, self.ring_jj] = \
                0.0 if b_own is None else b_own

    def _zero_ring_halo(self, state):
        if self.ring_halo_ii.size:
            state[:, self.ring_halo_ii, self.ring_halo_jj] = 0.0

    def _zero_corners(self, state):
        if self.corner_cells[0].size:
            state[:, self.corner_cells[0], self.corner_cells[1]] = 0.0


def local_model_solve(p, initial_state, trace, forcing=None, boundary=None):
    """Nonlinear local trajectory over the block's window.

    initial_state is the window-start state on the box.  After every step,
    owned physical-ring cells take the boundary values, halo strips are
    overwritten from trace.tl_halo, and corners are zeroed.  Fed with
    traces restricted from a global run, the result matches the
    restriction of that run on every live (non-corner) cell.
    """
    state = np.array(initial_state, dtype=float)
    if state.shape != (p.n_fields,) + p.tile.box_shape:
        raise ValueError("initial state does not match the box")
    states = [state]
    for step in range(1, p.n_levels):
        try:
            nxt = p.box_model.step_nl(
                states[-1],
                f=None if forcing is None else forcing[step - 1])
        except ModelDivergedError as exc:
            raise RuntimeError(
                f"local model diverged on tile {p.tile.id}, window "
                f"{p.window}, step {step}") from exc
        if p.prescribed:
            p._apply_ring(nxt, None if boundary is None
                          else boundary[step - 1])
        for side, sl in p.strips.items():
            nxt[:, sl[0], sl[1]] = trace.tl_halo[side][step]
        p._zero_corners(nxt)
        states.append(nxt)
    return states


def _own_strip(p, side, raw, trace_vals):
    """Locally evolved strip values, trace-filled where not meaningful."""
    sl = p.strips[side]
    own = raw[:, sl[0], sl[1]].copy()
    bad = ~p.own_valid[side]
    if bad.any():
        own[:, bad] = trace_vals[:, bad]
    return own


def _strip_diff_field(p, own, trace_halo, level):
    """Box field carrying own-minus-trace on the meaningful strip cells."""
    if not p.strips or p.gamma == 0.0:
        return None
    d = p.zero_box()
    for side, sl in p.strips.items():
        d[:, sl[0], sl[1]] = own[side] - trace_halo[side][level]
    return d


def local_tl_step(p, dx_start, df, db, lin_states, trace=None):
    """Tangent-linear sweep over the window on the box.

    Residual form (trace given): halo strips are overwritten from
    trace.tl_halo after every step and the theta seam correction is added;
    returns (states, own_strips) where own_strips[l][side] holds the
    locally evolved strip values (the "own" halo data of the overlap and
    theta operators).  Correction form (trace None): halo data is zero,
    box-edge and physical-ring strip cells are zeroed every step, the
    remaining strip cells evolve freely; returns (states, None).
    """
    correction = trace is None
    states = [np.array(dx_start, dtype=float)]
    if correction:
        p.project_live(states[0])
    own_strips = None
    d_prev = None
    if not correction:
        own0 = {side: _own_strip(p, side, states[0], trace.tl_halo[side][0])
                for side in p.strips}
        own_strips = [own0]
        d_prev = _strip_diff_field(p, own0, trace.tl_halo, 0)
    for step in range(1, p.n_levels):
        raw = p.box_model.step_tl(lin_states[step - 1], states[-1], df=df)
        if p.prescribed:
            p._apply_ring(raw, db)
        if correction:
            for side in p.strips:
                o = p.outer_rel[side]
                sl = p.strips[side]
                raw[:, sl[0], sl[1]][:, o[0], o[1]] = 0.0
            p._zero_ring_halo(raw)
        else:
            own = {side: _own_strip(p, side, raw, trace.tl_halo[side][step])
                   for side in p.strips}
            own_strips.append(own)
            theta = None
            if p.gamma != 0.0 and d_prev is not None:
                theta = p.box_model.step_tl(lin_states[step - 1], d_prev)
            for side, sl in p.strips.items():
                raw[:, sl[0], sl[1]] = trace.tl_halo[side][step]
                if theta is not None:
                    raw[:, sl[0], sl[1]] += p.gamma * np.where(
                        p.own_valid[side], theta[:, sl[0], sl[1]], 0.0)
            d_prev = _strip_diff_field(p, own, trace.tl_halo, step)
        p._zero_corners(raw)
        states.append(raw)
    return states, own_strips


def local_ad_step(p, forcings, lin_states, trace=None, terminal=None):
    """Adjoint sweep over the window: transpose of local_tl_step.

    forcings[l] is the adjoint seed added at window level l (observation
    scatter in the solver), terminal an extra seed at the last level.
    Residual form (trace given): strip values are overwritten from
    trace.ad_halo and the transposed theta channel is driven by the
    difference to them.  Returns (p_start, df_star, db_star, stored) with
    stored[l] the per-level adjoint states used for the trace exchange.
    With zero traces this is the exact transpose of the matching
    local_tl_step form, theta channels included.
    """
    correction = trace is None
    pad = p.zero_box() if terminal is None else np.array(terminal, dtype=float)
    if forcings[p.n_levels - 1] is not None:
        pad = pad + forcings[p.n_levels - 1]
    df_star = p.zero_box()
    db_star = (np.zeros((p.n_fields, p.ring_pos.size))
               if p.prescribed and p.layout_ctl.has_boundary else None)
    q = None
    stored = [None] * p.n_levels
    for step in range(p.n_levels - 1, 0, -1):
        stored[step] = pad.copy()
        if correction:
            for side in p.strips:
                o = p.outer_rel[side]
                sl = p.strips[side]
                pad[:, sl[0], sl[1]][:, o[0], o[1]] = 0.0
            p._zero_ring_halo(pad)
            q_next = None
        else:
            s_pre = {side: pad[:, sl[0], sl[1]].copy()
                     for side, sl in p.strips.items()}
            for side, sl in p.strips.items():
                pad[:, sl[0], sl[1]] = trace.ad_halo[side][step]
            q_next = None
            if p.gamma != 0.0 and p.strips:
                diff = p.zero_box()
                for side, sl in p.strips.items():
                    diff[:, sl[0], sl[1]] = np.where(
                        p.own_valid[side],
                        s_pre[side] - trace.ad_halo[side][step], 0.0)
                feed, _, _ = p.box_model.step_ad(lin_states[step - 1], diff)
                q_next = p.zero_box()
                for side, sl in p.strips.items():
                    vals = feed[:, sl[0], sl[1]]
                    q_next[:, sl[0], sl[1]] = np.where(p.own_valid[side],
                                                       vals, 0.0)
            p._zero_ring_halo(pad)
        p._zero_corners(pad)
        if db_star is not None:
            db_star += pad[:, p.ring_ii, p.ring_jj]
        if p.prescribed:
            p._apply_ring(pad, None)
        raw_bar = pad if q is None else pad + p.gamma * q
        prev, dfs, _ = p.box_model.step_ad(lin_states[step - 1], raw_bar)
        if not correction and p.phys_lines and p.strips:
            # physical-edge outputs must not see the trace values sitting
            # on the opposite box edge through the periodic wrap
            nb = raw_bar.copy()
            nb[:, 0, :] = 0.0
            nb[:, -1, :] = 0.0
            nb[:, :, 0] = 0.0
            nb[:, :, -1] = 0.0
            prev2, _, _ = p.box_model.step_ad(lin_states[step - 1], nb)
            for li, lj in p.phys_lines:
                prev[:, li, lj] = prev2[:, li, lj]
        df_star += dfs
        pad = prev
        if forcings[step - 1] is not None:
            pad = pad + forcings[step - 1]
        q = q_next
    if q is not None:
        pad = pad + p.gamma * q
    if correction:
        p.project_live(pad)
    stored[0] = pad.copy()
    return pad, df_star, db_star, stored


def local_cost(p, local_ctl, trace, d):
    """The block's local functional at its restriction of the increment.

    local_ctl: dict with box-restricted "x0" (window 0), "f", and
    owned-ring "b" increments; d: global innovation vector.  Returns
    (J, Jb, Jo, O) with J = alpha*Jb + Jo + O, where Jb and Jo keep the
    1/2 convention and O is the overlap penalty (no 1/2) summed over
    levels and strips.  With beta = 0 and a single block this is exactly
    the global cost.
    """
    jb = _owned_jb(p, local_ctl)

    if p.has_x0:
        dx0 = local_ctl["x0"]
    elif trace.start_box is not None:
        dx0 = trace.start_box
    else:
        dx0 = p.zero_box()
    states, own_strips = local_tl_step(p, dx0, local_ctl["f"],
                                       local_ctl.get("b"), p.lin_states,
                                       trace=trace)
    jo = 0.0
    for k in p.own_obs_idx:
        k = int(k)
        misfit = _sample_box(p, states, k) - d[k]
        jo += 0.5 * misfit**2 / p.obs.variances[k]

    o_val = 0.0
    if p.beta != 0.0:
        for l in range(p.n_levels):
            for side in p.strips:
                val, _ = overlap_operator(own_strips[l][side],
                                          trace.tl_halo[side][l],
                                          p.strip_cov[side], p.beta)
                o_val += val
    j = p.alpha * jb + jo + o_val
    return j, jb, jo, o_val


def _owned_jb(p, local_ctl):
    """alpha-free background term of the local functional (1/2 kept)."""
    oi, oj = p.owned_local
    jb = 0.0
    if p.has_x0:
        v = local_ctl["x0"][:, oi, oj].ravel()
        jb += 0.5 * float(np.vdot(v, p.owned_prec_apply("x0", v)))
    v = local_ctl["f"][:, oi, oj].ravel()
    jb += 0.5 * float(np.vdot(v, p.owned_prec_apply("f", v)))
    if p.full_cov.get("b") is not None and "b" in local_ctl \
            and p.ring_pos.size:
        w = local_ctl["b"].ravel()
        jb += 0.5 * float(np.vdot(w, p.owned_prec_apply("b", w)))
    return jb


def _sample_box(p, states, k):
    """Bilinear sample of observation k from the box-level states."""
    lvl = int(p.obs.levels[k]) - p.levels[0]
    i0 = int(p.obs.i0[k]) - p.tile.bi0
    j0 = int(p.obs.j0[k]) - p.tile.bj0
    w = p.obs.weights[:, k]
    s = states[lvl][0]
    return (w[0] * s[i0, j0] + w[1] * s[i0 + 1, j0]
            + w[2] * s[i0, j0 + 1] + w[3] * s[i0 + 1, j0 + 1])


def _scatter_obs(p, res_window):
    """Per-level adjoint seeds from R^-1-weighted residuals.

    Scatters every window observation onto the stencil nodes that fall
    inside the box; the owned-component restriction of the final sweep
    keeps the assembled gradient an exact partition.
    """
    forcings = [None] * p.n_levels
    for pos in range(p.window_obs_idx.size):
        k = int(p.window_obs_idx[pos])
        r = res_window[pos]
        if r == 0.0:
            continue
        lvl = int(p.obs.levels[k]) - p.levels[0]
        gi0, gj0 = int(p.obs.i0[k]), int(p.obs.j0[k])
        w = p.obs.weights[:, k]
        for c, (gi, gj) in enumerate(((gi0, gj0), (gi0 + 1, gj0),
                                      (gi0, gj0 + 1), (gi0 + 1, gj0 + 1))):
            if not (p.tile.bi0 <= gi < p.tile.bi1
                    and p.tile.bj0 <= gj < p.tile.bj1):
                continue
            if forcings[lvl] is None:
                forcings[lvl] = p.zero_box()
            forcings[lvl][0, gi - p.tile.bi0, gj - p.tile.bj0] += w[c] * r
    return forcings


def build_local_problems(model, grid, windows, layout_ctl, layout_tiles,
                         obs, b_cov, config):
    """All (tile, window) blocks, with restricted covariances attached."""
    weights = (config.alpha, config.beta, config.gamma)
    bx = b_cov.segment_cov("x0")
    bf = b_cov.segment_cov("f0")
    bb = b_cov.segment_cov("b0") if layout_ctl.has_boundary else None
    blocks = {}
    per_tile = {}
    for k in range(windows.n_t):
        for tile in layout_tiles.tiles:
            p = LocalProblem(tile, k, model, grid, windows, layout_ctl,
                             obs, weights)
            if tile.id not in per_tile:
                cb = (bb.restrict(p.ring_pos)
                      if bb is not None and p.ring_pos.size else None)
                per_tile[tile.id] = (
                    bx.restrict(p.box_node_idx),
                    bf.restrict(p.box_node_idx),
                    cb,
                    {side: bx.restrict(idx)
                     for side, idx in p.strip_node_idx.items()},
                )
            p.cov_x, p.cov_f, p.cov_b, p.strip_cov = per_tile[tile.id]
            p.full_cov = {"x0": bx, "f": bf, "b": bb}
            blocks[(tile.id, k)] = p
    owned_total = sum(p.own_obs_idx.size for p in blocks.values())
    if owned_total != obs.n_obs:
        raise RuntimeError(f"observation ownership does not partition the "
                           f"set: {owned_total} != {obs.n_obs}")
    return blocks


@dataclass
class DDResult:
    delta_z: np.ndarray
    trajectory: object
    converged: bool
    n_iterations: int
    mismatch_history: list
    trace_rows: list
    world: World
    final_cost: float = None


class DDSolver:
    """Driver for the space-time decomposed quadratic minimization."""

    def __init__(self, problem, layout_tiles, config):
        self.problem = problem
        self.layout = layout_tiles
        self.config = config
        model = problem.model
        if model.config.boundary == "periodic" and layout_tiles.n_tiles > 1:
            raise ValueError("periodic boundaries would need seam exchange "
                             "across the domain edge; decompose "
                             "prescribed-boundary models only, or use a "
                             "single tile")
        self.windows = problem.windows
        grid = problem.layout.grid
        self.world = World(layout_tiles.n_tiles, self.windows.n_t)
        self.inter = [create_inter(self.world, k)
                      for k in range(self.windows.n_t)]
        self.intra = [split(self.world, i)
                      for i in range(layout_tiles.n_tiles)]
        self.blocks = build_local_problems(
            model, grid, self.windows, problem.layout, layout_tiles,
            problem.obs, problem.b_cov, config)
        self.d = innovations(problem.background_traj, problem.obs)
        self._link_background()
        self.scale = max(float(np.max(np.abs(problem.x_b))), 1e-8)

    def _link_background(self):
        """Local background runs, checked against the global trajectory."""
        bg = self.problem.background_traj
        for (tid, k), p in self.blocks.items():
            tile = self.layout.tile(tid)
            lin = [restrict(bg[l], tile).data for l in p.levels]
            tr = self._zero_trace(p)
            for side, sl in p.strips.items():
                tr.tl_halo[side] = np.stack(
                    [lin[l][:, sl[0], sl[1]] for l in range(p.n_levels)])
            solved = local_model_solve(p, lin[0], tr)
            for l in range(p.n_levels):
                gap = np.abs(solved[l] - lin[l])[:, p.live_mask]
                if gap.size and gap.max() > 1e-12:
                    raise RuntimeError(
                        f"local background run drifted from the global "
                        f"trajectory on tile {tid}, window {k}")
            p.lin_states = solved

    def _zero_trace(self, p):
        tl = {}
        ad = {}
        for side, sl in p.strips.items():
            si = sl[0].stop - sl[0].start
            sj = sl[1].stop - sl[1].start
            tl[side] = np.zeros((p.n_levels, p.n_fields, si, sj))
            ad[side] = np.zeros((p.n_levels, p.n_fields, si, sj))
        start = p.zero_box() if p.window > 0 else None
        term = (p.zero_box()
                if p.window < self.windows.n_t - 1 else None)
        res = (-self.problem.r_cov.apply_inv(self.d)[p.window_obs_idx]
               if p.window_obs_idx.size else np.zeros(0))
        return NeighborTrace(tl_halo=tl, ad_halo=ad, start_box=start,
                             ad_terminal=term, obs_res=res)

    def _restrict_control(self, z, p):
        v = ControlVector(self.problem.layout, z)
        bi, bj = p.tile.box_slices
        ctl = {"f": v.f(p.window)[:, bi, bj].copy()}
        if p.has_x0:
            ctl["x0"] = v.x0[:, bi, bj].copy()
        if self.problem.layout.has_boundary:
            ctl["b"] = v.b(p.window)[:, p.ring_pos].copy()
        return ctl

    def _local_operator(self, p):
        """SPD quadratic operator of the block's correction solve.

        The prior term uses the inverse of the covariance restricted to the
        box, which matches the principal block of the global precision up
        to correlation across the outer box edge; the observation and
        overlap terms run through the zero-inflow correction propagator.
        """

        def apply(s):
            out = np.zeros_like(s)
            parts = p.split_local(s)
            outp = p.split_local(out)
            if p.has_x0:
                outp["x0"][:] += (p.alpha * p.cov_x.apply_inv(
                    parts["x0"].ravel())).reshape(parts["x0"].shape)
            outp["f"][:] += (p.alpha * p.cov_f.apply_inv(
                parts["f"].ravel())).reshape(parts["f"].shape)
            if "b" in parts and p.cov_b is not None:
                outp["b"][:] += (p.alpha * p.cov_b.apply_inv(
                    parts["b"].ravel())).reshape(parts["b"].shape)
            dx0 = parts["x0"] if p.has_x0 else p.zero_box()
            states, _ = local_tl_step(p, dx0, parts["f"],
                                      parts.get("b"), p.lin_states)
            res = np.zeros(p.window_obs_idx.size)
            for k, pos in zip(p.q_obs_idx, p.q_obs_pos):
                k = int(k)
                res[pos] = _sample_box(p, states, k) / p.obs.variances[k]
            forcings = _scatter_obs(p, res)
            if p.beta != 0.0 and p.strips:
                for l in range(p.n_levels):
                    add = forcings[l]
                    for side, sl in p.strips.items():
                        vals = states[l][:, sl[0], sl[1]]
                        if not np.any(vals):
                            continue
                        g = 2.0 * p.beta * p.strip_cov[side].apply_inv(
                            vals.ravel())
                        if add is None:
                            add = p.zero_box()
                        add[:, sl[0], sl[1]] += g.reshape(vals.shape)
                    forcings[l] = add
            p_start, df_star, db_star, _ = local_ad_step(
                p, forcings, p.lin_states)
            if p.has_x0:
                outp["x0"][:] += p_start
            outp["f"][:] += df_star
            if "b" in parts and db_star is not None:
                outp["b"][:] += db_star
            return out

        return LinearOperator((p.n_local, p.n_local), apply)

    def _local_precond(self, p):
        def apply(s):
            out = np.zeros_like(s)
            parts = p.split_local(s)
            outp = p.split_local(out)
            if p.has_x0:
                outp["x0"][:] = p.cov_x.apply(parts["x0"].ravel()).reshape(
                    parts["x0"].shape)
            outp["f"][:] = p.cov_f.apply(parts["f"].ravel()).reshape(
                parts["f"].shape)
            if "b" in parts:
                if p.cov_b is not None:
                    outp["b"][:] = p.cov_b.apply(
                        parts["b"].ravel()).reshape(parts["b"].shape)
                else:
                    outp["b"][:] = parts["b"]
            return out

        return LinearOperator((p.n_local, p.n_local), apply)

    def _block_sweeps(self, key, z, traces):
        """One block's TL and adjoint sweeps at the assembled increment z.

        Observation residuals merge the block's freshly sampled values for
        its own observations with the trace values for everyone else's.
        """
        p = self.blocks[key]
        trace = traces[key]
        ctl = self._restrict_control(z, p)
        dx0 = ctl["x0"] if p.has_x0 else trace.start_box
        states, own_strips = local_tl_step(
            p, dx0, ctl["f"], ctl.get("b"), p.lin_states, trace=trace)
        res = trace.obs_res.copy()
        jo = 0.0
        for k, pos in zip(p.own_obs_idx, p.own_obs_pos):
            k = int(k)
            misfit = _sample_box(p, states, k) - self.d[k]
            res[pos] = misfit / p.obs.variances[k]
            jo += 0.5 * misfit**2 / p.obs.variances[k]
        forcings = _scatter_obs(p, res)
        p_start, df_star, db_star, ad_states = local_ad_step(
            p, forcings, p.lin_states, trace=trace,
            terminal=trace.ad_terminal)
        return {"ctl": ctl, "states": states, "own_strips": own_strips,
                "res": res, "jo": jo, "p_start": p_start,
                "df_star": df_star, "db_star": db_star,
                "ad_states": ad_states}

    def solve(self):
        problem = self.problem
        z = np.zeros(problem.layout.n_z)
        traces = {key: self._zero_trace(p) for key, p in self.blocks.items()}
        ops = {key: self._local_operator(p)
               for key, p in self.blocks.items()}
        pres = {key: self._local_precond(p)
                for key, p in self.blocks.items()}
        order = sorted(self.blocks)
        rows = []
        history = []
        converged = False
        n_done = 0
        for n in range(1, self.config.n_bar + 1):
            n_done = n
            b_inv_z = problem.b_cov.apply_inv(z)
            binv_v = ControlVector(problem.layout, b_inv_z)
            corrections = {}
            block_rows = {}
            for key in order:
                p = self.blocks[key]
                trace = traces[key]
                sw = self._block_sweeps(key, z, traces)
                rho = np.zeros(p.n_local)
                parts = p.split_local(rho)
                bsl = p.tile.box_slices
                if p.has_x0:
                    parts["x0"][:] = (sw["p_start"]
                                      + binv_v.x0[:, bsl[0], bsl[1]])
                    p.project_live(parts["x0"])
                parts["f"][:] = (sw["df_star"]
                                 + binv_v.f(p.window)[:, bsl[0], bsl[1]])
                p.project_live(parts["f"])
                if "b" in parts:
                    parts["b"][:] = binv_v.b(p.window)[:, p.ring_pos]
                    if sw["db_star"] is not None:
                        parts["b"][:] += sw["db_star"]
                rho = -rho
                rep = pcg(ops[key], rho, precond=pres[key],
                          tol=self.config.inner_tol,
                          maxit=self.config.n_inner, name="dd_local")
                corrections[key] = rep.x
                jb = _owned_jb(p, sw["ctl"])
                o_val = 0.0
                if p.beta != 0.0:
                    for l in range(p.n_levels):
                        for side in p.strips:
                            val, _ = overlap_operator(
                                sw["own_strips"][l][side],
                                trace.tl_halo[side][l],
                                p.strip_cov[side], p.beta)
                            o_val += val
                block_rows[key] = [n, key[0], key[1], rep.iterations,
                                   p.alpha * jb + sw["jo"] + o_val]
            v = ControlVector(problem.layout, z)
            w = self.config.omega
            for key in order:
                p = self.blocks[key]
                parts = p.split_local(corrections[key])
                osl = p.tile.owned_slices
                oi, oj = p.owned_local
                if p.has_x0:
                    v.x0[:, osl[0], osl[1]] += w * parts["x0"][:, oi, oj]
                v.f(p.window)[:, osl[0], osl[1]] += w * parts["f"][:, oi, oj]
                if "b" in parts and p.ring_pos.size:
                    v.b(p.window)[:, p.ring_pos] += w * parts["b"]
            # traces are refreshed from sweeps at the updated increment, so
            # the next iterate's gradients see halo data that already
            # reflects this update
            sweeps = {}
            for key in order:
                sw = self._block_sweeps(key, z, traces)
                sweeps[key] = (sw["states"], sw["ad_states"], sw["res"])
            mismatch = self._exchange(sweeps, traces, n)
            for key in order:
                rows.append(tuple(block_rows[key] + [mismatch[key]]))
            worst = max(mismatch.values())
            history.append(worst)
            if worst <= self.config.tau_dd:
                converged = True
                break
        traj = problem.run_with_increment(z)
        cb = problem.cost(z, d=self.d)
        return DDResult(delta_z=z, trajectory=traj, converged=converged,
                        n_iterations=n_done, mismatch_history=history,
                        trace_rows=rows, world=self.world, final_cost=cb.J)

    def _exchange(self, sweeps, traces, n):
        """Ship traces through the communicators; per-block mismatch."""
        n_t = self.windows.n_t
        n_tiles = self.layout.n_tiles
        mismatch = {key: 0.0 for key in self.blocks}

        def bump(key, old, new):
            if old is None or new is None or old.size == 0:
                return
            delta = float(np.max(np.abs(new - old))) / self.scale
            if delta > mismatch[key]:
                mismatch[key] = delta

        base = 1000000 * n
        # time chaining through the intra communicators
        for tid in range(n_tiles):
            comm = self.intra[tid]
            for k in range(n_t - 1):
                comm.isend(self.world.rank_of(tid, k),
                           self.world.rank_of(tid, k + 1),
                           base + _TAG_TIME_TL, sweeps[(tid, k)][0][-1])
            for k in range(1, n_t):
                comm.isend(self.world.rank_of(tid, k),
                           self.world.rank_of(tid, k - 1),
                           base + _TAG_TIME_AD, sweeps[(tid, k)][1][0])
            for k in range(1, n_t):
                got = comm.recv(self.world.rank_of(tid, k),
                                self.world.rank_of(tid, k - 1),
                                base + _TAG_TIME_TL)
                bump((tid, k), traces[(tid, k)].start_box, got)
                traces[(tid, k)].start_box = got
            for k in range(n_t - 1):
                got = comm.recv(self.world.rank_of(tid, k),
                                self.world.rank_of(tid, k + 1),
                                base + _TAG_TIME_AD)
                bump((tid, k), traces[(tid, k)].ad_terminal, got)
                traces[(tid, k)].ad_terminal = got
        # spatial halos: one exchange per window level and sweep direction
        for k in range(n_t):
            comm = self.inter[k]
            if n_tiles > 1:
                n_levels = self.blocks[(0, k)].n_levels
                for l in range(n_levels):
                    for chan, pick in (("tl", 0), ("ad", 1)):
                        fields = {tid: sweeps[(tid, k)][pick][l].copy()
                                  for tid in range(n_tiles)}
                        halo_exchange(comm, self.layout, fields, window=k,
                                      tag_base=base + _TAG_HALO
                                      + 10 * (2 * l + (chan == "ad")))
                        for tid in range(n_tiles):
                            p = self.blocks[(tid, k)]
                            tr = traces[(tid, k)]
                            store = tr.tl_halo if chan == "tl" else tr.ad_halo
                            for side, sl in p.strips.items():
                                new = fields[tid][:, sl[0], sl[1]]
                                bump((tid, k), store[side][l], new)
                                store[side][l] = new.copy()
                # observation residual broadcast within the window
                for src in range(n_tiles):
                    for dst in range(n_tiles):
                        if dst == src:
                            continue
                        comm.isend(self.world.rank_of(src, k),
                                   self.world.rank_of(dst, k),
                                   base + _TAG_OBS + src,
                                   sweeps[(src, k)][2])
                for dst in range(n_tiles):
                    merged = sweeps[(dst, k)][2].copy()
                    for src in range(n_tiles):
                        if src == dst:
                            continue
                        got = comm.recv(self.world.rank_of(dst, k),
                                        self.world.rank_of(src, k),
                                        base + _TAG_OBS + src)
                        psrc = self.blocks[(src, k)]
                        merged[psrc.own_obs_pos] = got[psrc.own_obs_pos]
                    traces[(dst, k)].obs_res = merged
            else:
                traces[(0, k)].obs_res = sweeps[(0, k)][2].copy()
        return mismatch


def dd_outer_loop(problem, layout_tiles, config):
    """Run the decomposed solve and return the assembled result."""
    return DDSolver(problem, layout_tiles, config).solve()
