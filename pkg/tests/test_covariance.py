import numpy as np
import pytest

from ddvar.covariance import (
    ControlCovariance,
    CovarianceB,
    CovarianceR,
    GaussianCovariance,
    build_b,
)
from ddvar.grid import Grid


@pytest.fixture
def grid66():
    return Grid(nx=6, ny=6, dt=0.1, n_steps=1)


def test_two_points_at_distance_l():
    pts = np.array([[0.0, 0.0], [3.0, 0.0]])
    cov = GaussianCovariance(pts, sigma=2.0, length=3.0, nugget=1e-6)
    assert cov.matrix[0, 1] == pytest.approx(4.0 * np.exp(-0.5), rel=1e-14)
    assert cov.matrix[0, 0] == pytest.approx(4.0 + 1e-6, rel=1e-14)


def test_vanishing_length_gives_diagonal(grid66):
    b = build_b(grid66, 1, sigma=1.5, length=1e-8, nugget=1e-8)
    np.testing.assert_allclose(b.block.matrix, (1.5**2 + 1e-8) * np.eye(36),
                               rtol=0, atol=1e-15)
    v = np.arange(36.0)
    np.testing.assert_allclose(b.apply_inv(v), v / (1.5**2 + 1e-8), rtol=1e-12)


def test_symmetry_and_factor_reassembly(grid66):
    b = build_b(grid66, 1, sigma=1.0, length=2.0).block
    assert np.max(np.abs(b.matrix - b.matrix.T)) <= 1e-14
    np.testing.assert_allclose(b.factor @ b.factor.T, b.matrix,
                               rtol=0, atol=1e-12)
    assert np.all(np.diag(b.factor) > 0)


def test_apply_round_trip_and_sqrt(grid66):
    rng = np.random.default_rng(10)
    b = build_b(grid66, 2, sigma=1.0, length=2.0)
    v = rng.standard_normal(b.n)
    back = b.apply_inv(b.apply(v))
    assert np.linalg.norm(back - v) / np.linalg.norm(v) <= 1e-10
    w = rng.standard_normal(b.n)
    np.testing.assert_allclose(b.apply_sqrt(b.apply_sqrt_t(w)), b.apply(w),
                               rtol=1e-11, atol=1e-12)
    assert np.vdot(v, b.apply(v)) > 0
    assert np.all(b.apply(np.zeros(b.n)) == 0.0)


def test_apply_matches_dense_matvec(grid66):
    rng = np.random.default_rng(11)
    b = build_b(grid66, 2, sigma=0.7, length=1.5)
    v = rng.standard_normal(b.n)
    np.testing.assert_allclose(b.apply(v), b.matrix @ v, rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(b.apply_inv(v), np.linalg.solve(b.matrix, v),
                               rtol=1e-9, atol=1e-10)


def test_restrict_principal_submatrix(grid66):
    rng = np.random.default_rng(12)
    b = build_b(grid66, 1, sigma=1.2, length=2.5).block
    idx = rng.choice(36, size=10, replace=False)
    sub = b.restrict(idx)
    np.testing.assert_array_equal(sub.matrix, b.matrix[np.ix_(idx, idx)])
    assert np.all(np.diag(sub.factor) > 0)
    full = b.restrict(np.arange(36))
    np.testing.assert_array_equal(full.matrix, b.matrix)
    single = b.restrict(np.array([7]))
    assert single.matrix.shape == (1, 1)
    assert single.matrix[0, 0] == b.matrix[7, 7]


def test_restrict_field_blocked(grid66):
    b = build_b(grid66, 2, sigma=1.0, length=2.0)
    idx = np.array([0, 5, 17])
    sub = b.restrict(idx)
    assert sub.n == 6
    np.testing.assert_array_equal(sub.block.matrix,
                                  b.block.matrix[np.ix_(idx, idx)])


def test_dimension_and_parameter_rejection(grid66):
    b = build_b(grid66, 1, sigma=1.0, length=2.0)
    with pytest.raises(ValueError):
        b.apply(np.zeros(35))
    with pytest.raises(ValueError):
        GaussianCovariance(np.zeros((4, 2)), sigma=-1.0, length=1.0)
    with pytest.raises(ValueError):
        GaussianCovariance(np.zeros((4, 2)), sigma=1.0, length=0.0)
    with pytest.raises(ValueError):
        GaussianCovariance(np.zeros((4, 2)), sigma=1.0, length=1.0, nugget=1e-12)


def test_covariance_r():
    r = CovarianceR([0.5, 2.0, 1.0])
    v = np.array([1.0, 1.0, 3.0])
    np.testing.assert_array_equal(r.apply(v), [0.5, 2.0, 3.0])
    np.testing.assert_array_equal(r.apply_inv(r.apply(v)), v)
    np.testing.assert_allclose(r.apply_sqrt(r.apply_sqrt(v)), r.apply(v), rtol=1e-15)
    with pytest.raises(ValueError):
        CovarianceR([1.0, 0.0])
    sub = r.restrict([2, 0])
    np.testing.assert_array_equal(sub.variances, [1.0, 0.5])


def test_control_covariance_blocks(grid66):
    rng = np.random.default_rng(13)
    bx = build_b(grid66, 1, sigma=1.0, length=2.0)
    bf = build_b(grid66, 1, sigma=0.2, length=1.0)
    cc = ControlCovariance([("x0", bx), ("f0", bf), ("f1", bf)])
    assert cc.n == 3 * 36
    assert cc.names == ["x0", "f0", "f1"]
    assert cc.segment_cov("f1") is bf
    v = rng.standard_normal(cc.n)
    dense = cc.matrix
    np.testing.assert_allclose(cc.apply(v), dense @ v, rtol=1e-13, atol=1e-13)
    assert np.linalg.norm(cc.apply_inv(cc.apply(v)) - v) <= 1e-10 * np.linalg.norm(v)
    np.testing.assert_allclose(cc.apply_sqrt(cc.apply_sqrt_t(v)), cc.apply(v),
                               rtol=1e-11, atol=1e-12)
    sl = cc.segment_slice("f0")
    assert (sl.start, sl.stop) == (36, 72)
    with pytest.raises(KeyError):
        cc.segment_cov("b0")
