"""Background and observation error covariances.

The background covariance over one scalar field is a dense Gaussian kernel
on the grid nodes,

    B_ij = sigma^2 exp(-|r_i - r_j|^2 / (2 L^2)) + eps * delta_ij,

factorized once by Cholesky.  Everything downstream (inverse applies, square
roots for preconditioning, principal-submatrix restrictions for the
domain-decomposed solver) is served from that factor.  Multi-field states
use the same spatial block per field with no cross-field correlation, so a
state covariance is block diagonal with identical blocks and only one
factorization is ever stored.

The nugget eps defaults to 1e-3 * sigma^2.  A Gaussian kernel on a regular
grid is notoriously ill conditioned once L spans a few spacings; with the
default the condition number stays near 1e3/eps_rel, which keeps the
inverse round trip (apply_inv after apply) at 1e-10 relative, the accuracy
the rest of the code assumes from B.

Control-vector covariances are block diagonal over the control segments
(initial state, one forcing block per assimilation window, one boundary
block per window), with the window blocks sharing a factorization.
"""

import numpy as np
import scipy.linalg
import scipy.spatial

from .grid import boundary_ring_indices

__all__ = [
    "GaussianCovariance",
    "CovarianceB",
    "CovarianceR",
    "ControlCovariance",
    "build_b",
    "build_control_covariance",
    "ring_coords",
]

DEFAULT_NUGGET_FACTOR = 1e-3


class GaussianCovariance:
    """Dense SPD covariance over an explicit point set, Cholesky-backed."""

    def __init__(self, points, sigma, length, nugget=None):
        points = np.asarray(points, dtype=float)
        if points.ndim != 2:
            raise ValueError("points must be (n, ndim)")
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        if length <= 0:
            raise ValueError(f"length must be positive, got {length}")
        if nugget is None:
            nugget = DEFAULT_NUGGET_FACTOR * sigma**2
        if nugget < 1e-10:
            raise ValueError(f"nugget must be >= 1e-10, got {nugget}")
        d2 = scipy.spatial.distance.cdist(points, points, "sqeuclidean")
        matrix = sigma**2 * np.exp(-d2 / (2.0 * length**2))
        matrix[np.diag_indices_from(matrix)] += nugget
        self.points = points
        self.sigma = float(sigma)
        self.length = float(length)
        self.nugget = float(nugget)
        self._init_from_matrix(matrix)

    def _init_from_matrix(self, matrix):
        self.matrix = matrix
        try:
            self.factor = np.linalg.cholesky(matrix)
        except np.linalg.LinAlgError as exc:
            raise ValueError(
                "covariance matrix is not positive definite "
                f"(sigma={self.sigma}, length={self.length}, "
                f"nugget={self.nugget}): {exc}") from exc

    @property
    def n(self):
        return self.matrix.shape[0]

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n,):
            raise ValueError(f"expected vector of length {self.n}, got shape {v.shape}")
        return v

    def apply(self, v):
        return self.matrix @ self._check(v)

    def apply_inv(self, v):
        return scipy.linalg.cho_solve((self.factor, True), self._check(v))

    def apply_sqrt(self, w):
        """Map a unit-variance draw w to a B-distributed vector, L @ w."""
        return self.factor @ self._check(w)

    def apply_sqrt_t(self, v):
        return self.factor.T @ self._check(v)

    def restrict(self, idx):
        """Principal submatrix over index set idx, refactorized."""
        idx = np.asarray(idx, dtype=int)
        if idx.ndim != 1:
            raise ValueError("index set must be 1-D")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise ValueError("index out of range for restriction")
        sub = object.__new__(GaussianCovariance)
        sub.points = self.points[idx]
        sub.sigma = self.sigma
        sub.length = self.length
        sub.nugget = self.nugget
        sub._init_from_matrix(self.matrix[np.ix_(idx, idx)].copy())
        return sub


class CovarianceB:
    """State covariance: one Gaussian block repeated over n_fields."""

    def __init__(self, block, n_fields):
        if n_fields < 1:
            raise ValueError("n_fields must be >= 1")
        self.block = block
        self.n_fields = int(n_fields)

    @property
    def n(self):
        return self.n_fields * self.block.n

    @property
    def matrix(self):
        return scipy.linalg.block_diag(*([self.block.matrix] * self.n_fields))

    def _fields(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n,):
            raise ValueError(f"expected vector of length {self.n}, got shape {v.shape}")
        return v.reshape(self.n_fields, self.block.n)

    def apply(self, v):
        return (self._fields(v) @ self.block.matrix).ravel()

    def apply_inv(self, v):
        w = self._fields(v)
        return scipy.linalg.cho_solve((self.block.factor, True), w.T).T.ravel()

    def apply_sqrt(self, w):
        return (self._fields(w) @ self.block.factor.T).ravel()

    def apply_sqrt_t(self, v):
        return (self._fields(v) @ self.block.factor).ravel()

    def restrict(self, idx):
        """Restrict to a node index set, applied identically per field."""
        return CovarianceB(self.block.restrict(idx), self.n_fields)


def build_b(grid, n_fields, sigma, length, nugget=None):
    """Background covariance over the grid nodes, block diagonal by field."""
    block = GaussianCovariance(grid.node_coords(), sigma, length, nugget)
    return CovarianceB(block, n_fields)


def ring_coords(grid):
    """(n_ring, 2) coordinates of the boundary ring, canonical order."""
    ii, jj = boundary_ring_indices(grid.nx, grid.ny)
    return np.stack([ii * grid.dx, jj * grid.dy], axis=1)


def build_control_covariance(grid, windows, n_fields, has_boundary,
                             sigma_x, length_x, sigma_f, length_f,
                             sigma_b=None, length_b=None, nugget=None):
    """Block covariance over the control segments.

    All forcing windows share one factorized block, likewise the boundary
    windows, so the cost of construction does not grow with n_t.
    """
    bx = build_b(grid, n_fields, sigma_x, length_x, nugget)
    bf = build_b(grid, n_fields, sigma_f, length_f, nugget)
    segments = [("x0", bx)]
    segments += [(f"f{k}", bf) for k in range(windows.n_t)]
    if has_boundary:
        if sigma_b is None or length_b is None:
            raise ValueError("boundary segments need sigma_b and length_b")
        bb = CovarianceB(GaussianCovariance(ring_coords(grid), sigma_b,
                                            length_b, nugget), n_fields)
        segments += [(f"b{k}", bb) for k in range(windows.n_t)]
    return ControlCovariance(segments)


class CovarianceR:
    """Diagonal observation-error covariance."""

    def __init__(self, variances):
        variances = np.asarray(variances, dtype=float)
        if variances.ndim != 1:
            raise ValueError("variances must be 1-D")
        if np.any(variances <= 0):
            raise ValueError("all observation error variances must be > 0")
        self.variances = variances

    @property
    def n(self):
        return self.variances.size

    @property
    def matrix(self):
        return np.diag(self.variances)

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n,):
            raise ValueError(f"expected vector of length {self.n}, got shape {v.shape}")
        return v

    def apply(self, v):
        return self._check(v) * self.variances

    def apply_inv(self, v):
        return self._check(v) / self.variances

    def apply_sqrt(self, w):
        return self._check(w) * np.sqrt(self.variances)

    def restrict(self, idx):
        return CovarianceR(self.variances[np.asarray(idx, dtype=int)])


class ControlCovariance:
    """Block-diagonal covariance over named control segments.

    segments is an ordered list of (name, cov) pairs; covariance objects may
    be shared between segments (forcing windows all point at one block), the
    apply routines just walk the list.
    """

    def __init__(self, segments):
        if not segments:
            raise ValueError("at least one segment required")
        self.segments = list(segments)
        names = [name for name, _ in self.segments]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate segment names in {names}")
        self.sizes = [cov.n for _, cov in self.segments]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def n(self):
        return int(self.offsets[-1])

    @property
    def names(self):
        return [name for name, _ in self.segments]

    def segment_cov(self, name):
        for seg_name, cov in self.segments:
            if seg_name == name:
                return cov
        raise KeyError(name)

    def segment_slice(self, name):
        for i, (seg_name, _) in enumerate(self.segments):
            if seg_name == name:
                return slice(int(self.offsets[i]), int(self.offsets[i + 1]))
        raise KeyError(name)

    @property
    def matrix(self):
        return scipy.linalg.block_diag(*[cov.matrix for _, cov in self.segments])

    def _map(self, v, op):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n,):
            raise ValueError(f"expected vector of length {self.n}, got shape {v.shape}")
        out = np.empty_like(v)
        for i, (_, cov) in enumerate(self.segments):
            sl = slice(int(self.offsets[i]), int(self.offsets[i + 1]))
            out[sl] = getattr(cov, op)(v[sl])
        return out

    def apply(self, v):
        return self._map(v, "apply")

    def apply_inv(self, v):
        return self._map(v, "apply_inv")

    def apply_sqrt(self, w):
        return self._map(w, "apply_sqrt")

    def apply_sqrt_t(self, v):
        return self._map(v, "apply_sqrt_t")
