import numpy as np
import pytest

from ddvar.assim import (
    AnalysisNotConverged,
    CostBreakdown,
    cost,
    dual_analysis,
    gradient,
    kalman_gain_adjoint_apply,
    kalman_gain_apply,
    primal_analysis,
)
from ddvar.covariance import CovarianceR
from ddvar.krylov import LinearOperator
from util import make_problem


class ScalarSpd:
    def __init__(self, val):
        self.val = val
        self.n = 1

    def apply(self, v):
        return self.val * v

    def apply_inv(self, v):
        return v / self.val


def scalar_g():
    return LinearOperator((1, 1), lambda v: v.copy(), lambda w: w.copy())


def test_cost_breakdown_validation():
    with pytest.raises(ValueError):
        CostBreakdown(J=1.0, Jb=0.7, Jo=0.2)
    with pytest.raises(ValueError):
        CostBreakdown(J=-1.0, Jb=-1.0, Jo=0.0)


def test_cost_at_zero_increment():
    p = make_problem(seed=1)
    d = p.background_innovations()
    cb = p.cost(np.zeros(p.layout.n_z))
    assert cb.Jb == 0.0
    assert cb.Jo == pytest.approx(0.5 * np.sum(d**2 / p.obs.variances), rel=1e-13)
    cb0 = p.cost(np.zeros(p.layout.n_z), d=np.zeros(p.obs.n_obs))
    assert cb0.J == 0.0


def test_cost_and_gradient_vs_dense_oracle():
    p = make_problem(nx=4, ny=4, n_steps=2, n_t=1, n_obs=5, seed=2)
    gop = p.background_operator()
    n_z = p.layout.n_z
    gm = np.zeros((p.obs.n_obs, n_z))
    for c in range(n_z):
        e = np.zeros(n_z)
        e[c] = 1.0
        gm[:, c] = gop.apply(e)
    rng = np.random.default_rng(3)
    dz = rng.standard_normal(n_z)
    d = p.background_innovations()
    binv = np.linalg.inv(p.b_cov.matrix)
    rinv = np.diag(1.0 / p.obs.variances)
    jb_ref = 0.5 * dz @ binv @ dz
    mis = gm @ dz - d
    jo_ref = 0.5 * mis @ rinv @ mis
    cb = p.cost(dz)
    assert cb.Jb == pytest.approx(jb_ref, rel=1e-10)
    assert cb.Jo == pytest.approx(jo_ref, rel=1e-12)
    grad_ref = binv @ dz + gm.T @ rinv @ mis
    np.testing.assert_allclose(p.gradient(dz), grad_ref, rtol=1e-9, atol=1e-11)


@pytest.mark.parametrize("kind,boundary", [("linear", "prescribed"),
                                           ("burgers", "periodic"),
                                           ("burgers", "prescribed")])
def test_g_operator_adjoint_identity(kind, boundary):
    p = make_problem(kind=kind, boundary=boundary, seed=4)
    gop = p.background_operator()
    rng = np.random.default_rng(5)
    for _ in range(5):
        v = rng.standard_normal(p.layout.n_z)
        w = rng.standard_normal(p.obs.n_obs)
        lhs = np.vdot(gop.apply(v), w)
        rhs = np.vdot(v, gop.apply_t(w))
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs), 1.0)


@pytest.mark.parametrize("kind", ["linear", "burgers"])
def test_gradient_matches_central_differences(kind):
    p = make_problem(kind=kind, seed=6)
    rng = np.random.default_rng(7)
    d = p.background_innovations()
    gop = p.background_operator()
    dz = 0.1 * rng.standard_normal(p.layout.n_z)
    g = gradient(dz, d, p.b_cov, p.r_cov, gop)
    eps = 1e-5
    for _ in range(10):
        v = rng.standard_normal(p.layout.n_z)
        v /= np.linalg.norm(v)
        jp = cost(dz + eps * v, d, p.b_cov, p.r_cov, gop).J
        jm = cost(dz - eps * v, d, p.b_cov, p.r_cov, gop).J
        fd = (jp - jm) / (2 * eps)
        an = np.vdot(g, v)
        assert abs(fd - an) <= 1e-6 * max(abs(an), 1e-8)


def test_gradient_zero_case():
    p = make_problem(seed=8)
    g = p.gradient(np.zeros(p.layout.n_z), d=np.zeros(p.obs.n_obs))
    assert np.all(g == 0.0)


def test_primal_analysis_scalar_cases():
    r1 = CovarianceR([1.0])
    rep = primal_analysis(scalar_g(), ScalarSpd(1.0), r1, np.array([2.0]))
    np.testing.assert_allclose(rep.x, [1.0], rtol=1e-12)
    rep = primal_analysis(scalar_g(), ScalarSpd(2.0), r1, np.array([3.0]))
    np.testing.assert_allclose(rep.x, [2.0], rtol=1e-12)
    rep = primal_analysis(scalar_g(), ScalarSpd(2.0), r1, np.array([0.0]))
    assert np.all(rep.x == 0.0)


def test_dual_analysis_scalar_cases():
    r1 = CovarianceR([1.0])
    for solver in ("rbl4dvar", "minres", "rpcg"):
        rep = dual_analysis(scalar_g(), ScalarSpd(2.0), r1, np.array([3.0]),
                            solver=solver)
        np.testing.assert_allclose(rep.x_control, [2.0], rtol=1e-11,
                                   err_msg=solver)
    with pytest.raises(ValueError, match="unknown dual solver"):
        dual_analysis(scalar_g(), ScalarSpd(2.0), r1, np.array([3.0]),
                      solver="sor")


def test_stationarity_at_analysis():
    p = make_problem(seed=9)
    d = p.background_innovations()
    rep = p.primal_analysis(tol=1e-12)
    g_at_a = p.gradient(rep.x)
    g_at_0 = p.gradient(np.zeros(p.layout.n_z))
    assert np.linalg.norm(g_at_a) <= 1e-9 * np.linalg.norm(g_at_0)


def test_primal_equals_dual_on_model_problem():
    p = make_problem(kind="burgers", boundary="prescribed", seed=10)
    ref = p.primal_analysis(tol=1e-12).x
    for solver in ("rbl4dvar", "minres", "rpcg"):
        x = p.dual_analysis(solver=solver, tol=1e-12).x_control
        err = np.linalg.norm(x - ref) / np.linalg.norm(ref)
        assert err <= 1e-8, f"{solver}: {err}"


def test_kalman_gain_scalar_and_transpose():
    r1 = CovarianceR([1.0])
    kd = kalman_gain_apply(scalar_g(), ScalarSpd(2.0), r1, np.array([1.0]))
    np.testing.assert_allclose(kd, [2.0 / 3.0], rtol=1e-12)
    assert np.all(kalman_gain_apply(scalar_g(), ScalarSpd(2.0), r1,
                                    np.array([0.0])) == 0.0)

    p = make_problem(seed=11)
    gop = p.background_operator()
    rng = np.random.default_rng(12)
    d = rng.standard_normal(p.obs.n_obs)
    v = rng.standard_normal(p.layout.n_z)
    kd = kalman_gain_apply(gop, p.b_cov, p.r_cov, d, tol=1e-12)
    ktv = kalman_gain_adjoint_apply(gop, p.b_cov, p.r_cov, v, tol=1e-12)
    lhs = np.vdot(kd, v)
    rhs = np.vdot(d, ktv)
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))


def test_outer_loop_second_increment_vanishes():
    p = make_problem(kind="linear", seed=13)
    res = p.incremental_outer_loop(n_outer=2, n_inner=400, tol=1e-13)
    assert res.n_outer == 2
    first = np.linalg.norm(res.reports[0].x)
    second = np.linalg.norm(res.reports[1].x)
    assert second <= 1e-10 * first


def test_outer_loop_history_and_monotonicity():
    p = make_problem(kind="burgers", seed=14)
    res = p.incremental_outer_loop(n_outer=2, n_inner=25)
    outers = sorted({row[0] for row in res.history})
    assert outers == [1, 2]
    for outer in outers:
        js = [row[2] for row in res.history if row[0] == outer]
        inners = [row[1] for row in res.history if row[0] == outer]
        assert inners == list(range(len(js)))
        assert np.all(np.diff(js) <= 1e-10 * max(js[0], 1.0))
    for _, _, j, jb, jo in res.history:
        assert j == jb + jo
        assert jb >= 0 and jo >= 0
    # final cost no larger than the background cost
    assert res.final_cost <= res.history[0][2]


@pytest.mark.parametrize("solver", ["rbl4dvar", "minres", "rpcg"])
def test_outer_loop_dual_matches_primal(solver):
    p = make_problem(kind="linear", seed=15)
    ref = p.incremental_outer_loop(n_outer=1, n_inner=400, tol=1e-12)
    res = p.incremental_outer_loop(n_outer=1, n_inner=400, tol=1e-12,
                                   solver=solver)
    err = np.linalg.norm(res.delta_z - ref.delta_z) / np.linalg.norm(ref.delta_z)
    assert err <= 1e-8, f"{solver}: {err}"


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_outer_loop_divergence_names_iteration():
    p = make_problem(kind="burgers", boundary="periodic", seed=16,
                     viscosity=0.2, advect=(0.2, 0.2), dt=0.4)
    p.obs.values[:] = 1e7
    with pytest.raises(RuntimeError, match="outer iteration 2"):
        p.incremental_outer_loop(n_outer=2, n_inner=50)


def test_outer_loop_rejects_bad_config():
    p = make_problem(seed=17)
    with pytest.raises(ValueError):
        p.incremental_outer_loop(n_outer=0, n_inner=5)
    with pytest.raises(ValueError):
        p.incremental_outer_loop(n_outer=1, n_inner=5, solver="gauss")


def test_analysis_not_converged_raises():
    p = make_problem(seed=18)
    with pytest.raises(AnalysisNotConverged):
        p.primal_analysis(tol=1e-14, maxit=1)
