"""Observation sets and the sampling operator G.

An observation is a point sample of the first model field at a time level
and an (x, y) location inside the domain.  Sampling is bilinear in space
and exact in time (observation times must coincide with model levels), so
the operator G is linear with an exact 4-point-scatter transpose.

Platforms tag observations for grouped impact reports.  Three layouts are
generated for twin experiments: "gridded" scatters points over the domain
at one time level each, "track" sweeps a straight path with one point per
consecutive level, and "profile" repeats a fixed location over several
levels.  The tags carry no physics; they only partition the set.

File format: one record per line, whitespace separated,

    time_index x y platform value variance

written with repr() so that read(write(set)) is bit-exact.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ObservationSet",
    "PlatformSpec",
    "apply_g",
    "apply_g_adjoint",
    "innovations",
    "read_observations",
    "synthesize",
    "write_observations",
]

PLATFORM_KINDS = ("gridded", "track", "profile")


@dataclass(frozen=True)
class PlatformSpec:
    """Request for one synthetic platform in a twin experiment.

    sigma is the observation error standard deviation stored with each
    observation; noise_sigma is the amplitude actually used for the
    perturbation draw and defaults to sigma.  Passing noise_sigma=0.0
    produces perfect observations that still carry a usable (positive)
    error variance.
    """
    kind: str
    count: int
    sigma: float
    levels: tuple = (1,)
    noise_sigma: float = None

    def __post_init__(self):
        if self.kind not in PLATFORM_KINDS:
            raise ValueError(f"unknown platform kind {self.kind!r}")
        if self.count < 0:
            raise ValueError("platform count must be >= 0")
        if self.sigma <= 0:
            raise ValueError("observation error sigma must be > 0")
        if self.noise_sigma is None:
            object.__setattr__(self, "noise_sigma", self.sigma)
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")


class ObservationSet:
    """Immutable set of point observations with cached bilinear weights."""

    def __init__(self, grid, levels, x, y, platforms, values, variances):
        levels = np.asarray(levels, dtype=int)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        values = np.asarray(values, dtype=float)
        variances = np.asarray(variances, dtype=float)
        platforms = list(platforms)
        n = levels.size
        if not (x.size == y.size == values.size == variances.size == len(platforms) == n):
            raise ValueError("observation component lengths disagree")
        if n == 0:
            raise ValueError("empty observation set")
        if np.any(levels < 0) or np.any(levels > grid.n_steps):
            raise ValueError(f"observation time index outside [0, {grid.n_steps}]")
        ex, ey = grid.extent
        if np.any(x < 0) or np.any(x > ex) or np.any(y < 0) or np.any(y > ey):
            raise ValueError("observation location outside the domain")
        if np.any(variances <= 0):
            raise ValueError("observation error variances must be > 0")
        self.grid = grid
        self.levels = levels
        self.x = x
        self.y = y
        self.platforms = platforms
        self.values = values
        self.variances = variances
        # bilinear stencil: lower-left node, offsets in cell units
        self.i0 = np.clip((x / grid.dx).astype(int), 0, grid.nx - 2)
        self.j0 = np.clip((y / grid.dy).astype(int), 0, grid.ny - 2)
        tx = x / grid.dx - self.i0
        ty = y / grid.dy - self.j0
        self.weights = np.stack([(1 - tx) * (1 - ty), tx * (1 - ty),
                                 (1 - tx) * ty, tx * ty])
        self.by_time = {}
        for l in np.unique(self.levels):
            self.by_time[int(l)] = np.nonzero(self.levels == l)[0]

    @property
    def n_obs(self):
        return self.levels.size

    def stencil_nodes(self, k):
        """Node (i, j) pairs of the 4-point stencil for observation k."""
        i0, j0 = self.i0[k], self.j0[k]
        return ((i0, j0), (i0 + 1, j0), (i0, j0 + 1), (i0 + 1, j0 + 1))

    def sample(self, traj):
        """Bilinear samples of field 0 of a trajectory, in set order."""
        states = getattr(traj, "states", traj)
        out = np.empty(self.n_obs)
        w = self.weights
        for l, idx in self.by_time.items():
            s = states[l][0]
            i0, j0 = self.i0[idx], self.j0[idx]
            out[idx] = (w[0, idx] * s[i0, j0] + w[1, idx] * s[i0 + 1, j0]
                        + w[2, idx] * s[i0, j0 + 1] + w[3, idx] * s[i0 + 1, j0 + 1])
        return out

    def scatter(self, w, n_levels, n_fields):
        """Transpose of sample: spread w back onto a zero trajectory array."""
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_obs,):
            raise ValueError(f"expected {self.n_obs} weights, got shape {w.shape}")
        out = np.zeros((n_levels, n_fields, self.grid.nx, self.grid.ny))
        ww = self.weights
        for l, idx in self.by_time.items():
            tgt = out[l, 0]
            i0, j0 = self.i0[idx], self.j0[idx]
            np.add.at(tgt, (i0, j0), ww[0, idx] * w[idx])
            np.add.at(tgt, (i0 + 1, j0), ww[1, idx] * w[idx])
            np.add.at(tgt, (i0, j0 + 1), ww[2, idx] * w[idx])
            np.add.at(tgt, (i0 + 1, j0 + 1), ww[3, idx] * w[idx])
        return out

    def subset(self, idx):
        """New set holding observations idx, in the given order."""
        idx = np.asarray(idx, dtype=int)
        return ObservationSet(self.grid, self.levels[idx], self.x[idx],
                              self.y[idx], [self.platforms[k] for k in idx],
                              self.values[idx], self.variances[idx])


def apply_g(traj, obs):
    return obs.sample(traj)


def apply_g_adjoint(w, obs, n_levels, n_fields):
    return obs.scatter(w, n_levels, n_fields)


def innovations(background_traj, obs):
    """d = y - H(x_background), in observation order."""
    return obs.values - obs.sample(background_traj)


def synthesize(truth_traj, grid, platforms, seed):
    """Twin-experiment observations: sample the truth, add seeded noise."""
    total = sum(p.count for p in platforms)
    if total < 1:
        raise ValueError("at least one observation required")
    rng = np.random.default_rng(seed)
    ex, ey = grid.extent
    levels, xs, ys, tags, sigmas, noise = [], [], [], [], [], []
    for p in platforms:
        if p.count == 0:
            continue
        if p.kind == "gridded":
            per = -(-p.count // len(p.levels))
            remaining = p.count
            for l in p.levels:
                m = min(per, remaining)
                remaining -= m
                xs.extend(rng.uniform(0, ex, m))
                ys.extend(rng.uniform(0, ey, m))
                levels.extend([l] * m)
        elif p.kind == "track":
            xa, ya = rng.uniform(0, ex), rng.uniform(0, ey)
            xb, yb = rng.uniform(0, ex), rng.uniform(0, ey)
            t = np.linspace(0.0, 1.0, p.count)
            xs.extend(xa + t * (xb - xa))
            ys.extend(ya + t * (yb - ya))
            l0 = p.levels[0]
            levels.extend(min(l0 + k, truth_traj.n_steps) for k in range(p.count))
        else:  # profile
            xp, yp = rng.uniform(0, ex), rng.uniform(0, ey)
            xs.extend([xp] * p.count)
            ys.extend([yp] * p.count)
            lv = list(p.levels)
            levels.extend(lv[k % len(lv)] for k in range(p.count))
        tags.extend([p.kind] * p.count)
        sigmas.extend([p.sigma] * p.count)
        noise.extend([p.noise_sigma] * p.count)
    obs = ObservationSet(grid, levels, xs, ys, tags,
                         np.zeros(total), np.asarray(sigmas) ** 2)
    clean = obs.sample(truth_traj)
    eta = np.asarray(noise) * rng.standard_normal(total)
    obs.values[:] = clean + eta
    return obs


def write_observations(path, obs):
    with open(path, "w") as fh:
        for k in range(obs.n_obs):
            fh.write(f"{obs.levels[k]} {float(obs.x[k])!r} {float(obs.y[k])!r} "
                     f"{obs.platforms[k]} {float(obs.values[k])!r} "
                     f"{float(obs.variances[k])!r}\n")


def read_observations(path, grid):
    levels, xs, ys, tags, values, variances = [], [], [], [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            l, x, y, tag, val, var = line.split()
            levels.append(int(l))
            xs.append(float(x))
            ys.append(float(y))
            tags.append(tag)
            values.append(float(val))
            variances.append(float(var))
    return ObservationSet(grid, levels, xs, ys, tags, values, variances)
