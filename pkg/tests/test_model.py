import numpy as np
import pytest

from ddvar.grid import Grid, build_time_windows
from ddvar.model import ModelConfig, ModelDivergedError, StateVector, SurrogateModel


def make_model(kind="linear", boundary="prescribed", nx=12, ny=10, dt=0.2,
               nu=0.15, advect=(0.7, -0.4), n_steps=6):
    grid = Grid(nx=nx, ny=ny, dx=1.0, dy=1.0, dt=dt, n_steps=n_steps)
    cfg = ModelConfig(kind=kind, advect=advect, viscosity=nu, boundary=boundary)
    return SurrogateModel(grid, cfg)


def random_state(model, rng, scale=1.0):
    return scale * rng.standard_normal(model.state_shape)


def dot_gap(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-30)


def test_stability_guard_rejects_bad_dt():
    grid = Grid(nx=8, ny=8, dx=1.0, dy=1.0, dt=2.0, n_steps=1)
    with pytest.raises(ValueError, match="diffusive"):
        SurrogateModel(grid, ModelConfig(viscosity=0.2, advect=(0.0, 0.0)))
    grid = Grid(nx=8, ny=8, dt=1.0, n_steps=1)
    with pytest.raises(ValueError, match="CFL"):
        SurrogateModel(grid, ModelConfig(viscosity=0.05, advect=(0.8, 0.0)))


def test_state_vector_flatten_round_trip():
    rng = np.random.default_rng(0)
    data = rng.standard_normal((2, 5, 4))
    s = StateVector(names=("u", "v"), data=data)
    assert s.n_p == 40
    t = StateVector.unflatten(("u", "v"), (5, 4), s.flatten())
    np.testing.assert_array_equal(s.data, t.data)


def test_diverged_state_raises():
    model = make_model()
    x = model.zero_state()
    x[0, 2, 2] = np.nan
    with pytest.raises(ModelDivergedError):
        model.step_nl(x)


@pytest.mark.parametrize("boundary", ["periodic", "prescribed"])
def test_linear_model_tl_is_exact(boundary):
    model = make_model(kind="linear", boundary=boundary)
    rng = np.random.default_rng(1)
    x = random_state(model, rng)
    d = random_state(model, rng, scale=0.3)
    f = random_state(model, rng, scale=0.1)
    b = 0.5 * rng.standard_normal((model.n_fields, model.n_ring))
    kw = {} if boundary == "periodic" else {"b": b}
    y1 = model.step_nl(x + d, f=f, **kw)
    y0 = model.step_nl(x, f=f, **kw)
    dy = model.step_tl(x, d)
    err = np.linalg.norm(y1 - y0 - dy) / np.linalg.norm(dy)
    assert err <= 1e-13


def test_linear_model_boundary_increment_exact():
    model = make_model(kind="linear", boundary="prescribed")
    rng = np.random.default_rng(2)
    x = random_state(model, rng)
    b = rng.standard_normal((model.n_fields, model.n_ring))
    db = 0.2 * rng.standard_normal((model.n_fields, model.n_ring))
    y1 = model.step_nl(x, b=b + db)
    y0 = model.step_nl(x, b=b)
    dy = model.step_tl(x, model.zero_state(), db=db)
    assert np.linalg.norm(y1 - y0 - dy) <= 1e-14 * max(1.0, np.linalg.norm(dy))


def test_burgers_taylor_remainder_is_quadratic():
    model = make_model(kind="burgers", advect=(0.6, 0.6), boundary="periodic")
    rng = np.random.default_rng(3)
    x = random_state(model, rng, scale=0.5)
    d = random_state(model, rng)
    ratios = []
    for eps in [1e-2, 1e-3, 1e-4, 1e-6]:
        y1 = model.step_nl(x + eps * d)
        y0 = model.step_nl(x)
        rem = np.linalg.norm(y1 - y0 - eps * model.step_tl(x, d))
        ratios.append(rem / eps**2)
    # quadratic nonlinearity: remainder / eps^2 is a constant
    ratios = np.array(ratios)
    assert np.all(np.abs(ratios - ratios[0]) <= 1e-4 * ratios[0] + 1e-9)


@pytest.mark.parametrize("kind", ["linear", "burgers"])
@pytest.mark.parametrize("boundary", ["periodic", "prescribed"])
def test_single_step_adjoint_identity(kind, boundary):
    model = make_model(kind=kind, boundary=boundary)
    rng = np.random.default_rng(4)
    for _ in range(10):
        xlin = random_state(model, rng)
        d = random_state(model, rng)
        df = random_state(model, rng)
        db = rng.standard_normal((model.n_fields, model.n_ring))
        p = random_state(model, rng)
        kw = {} if boundary == "periodic" else {"db": db}
        fwd = model.step_tl(xlin, d, df=df, **kw)
        p_prev, df_star, db_star = model.step_ad(xlin, p)
        lhs = np.vdot(fwd, p)
        rhs = np.vdot(d, p_prev) + np.vdot(df, df_star)
        if boundary == "prescribed":
            rhs += np.vdot(db, db_star)
        assert dot_gap(lhs, rhs) <= 1e-12


@pytest.mark.parametrize("kind", ["linear", "burgers"])
def test_window_operator_adjoint_identity(kind):
    model = make_model(kind=kind, boundary="prescribed", n_steps=6)
    windows = build_time_windows(6, 2)
    rng = np.random.default_rng(5)
    x0 = random_state(model, rng, scale=0.4)
    traj = model.run_nl(x0)
    for k in range(windows.n_t):
        apply_tl, apply_ad = model.window_operator(traj, windows, k)
        d = random_state(model, rng)
        p = random_state(model, rng)
        lhs = np.vdot(apply_tl(d), p)
        rhs = np.vdot(d, apply_ad(p))
        assert dot_gap(lhs, rhs) <= 1e-12


def test_run_nl_zero_steps_returns_initial_state_only():
    model = make_model()
    x0 = np.ones(model.state_shape)
    traj = model.run_nl(x0, n_steps=0)
    assert traj.n_steps == 0
    np.testing.assert_array_equal(traj.level(0), x0)


def test_pure_diffusion_tl_matrix_is_symmetric_and_ad_is_transpose():
    # 5x5 periodic pure-diffusion: dense assembly oracle.
    grid = Grid(nx=5, ny=5, dt=0.2, n_steps=1)
    model = SurrogateModel(grid, ModelConfig(
        kind="linear", advect=(0.0, 0.0), viscosity=0.2, boundary="periodic"))
    n = grid.n_points
    tl = np.zeros((n, n))
    ad = np.zeros((n, n))
    for c in range(n):
        e = np.zeros((1, 5, 5))
        e.ravel()[c] = 1.0
        tl[:, c] = model.step_tl(model.zero_state(), e).ravel()
        p_prev, _, _ = model.step_ad(model.zero_state(), e)
        ad[:, c] = p_prev.ravel()
    np.testing.assert_allclose(tl, tl.T, atol=1e-14)
    np.testing.assert_allclose(ad, tl.T, atol=1e-14)


def _reference_burgers_step(x, dt, dx, dy, nu):
    """Independent plain-loop Burgers step, periodic, no forcing."""
    nf, nx, ny = x.shape
    out = np.empty_like(x)
    u, v = x[0], x[1]
    for fidx in range(2):
        w = x[fidx]
        for i in range(nx):
            for j in range(ny):
                ip, im = (i + 1) % nx, (i - 1) % nx
                jp, jm = (j + 1) % ny, (j - 1) % ny
                wx = (w[ip, j] - w[im, j]) / (2 * dx)
                wy = (w[i, jp] - w[i, jm]) / (2 * dy)
                lap = ((w[ip, j] - 2 * w[i, j] + w[im, j]) / dx**2
                       + (w[i, jp] - 2 * w[i, j] + w[i, jm]) / dy**2)
                adv = u[i, j] * wx + v[i, j] * wy
                out[fidx, i, j] = w[i, j] + dt * (-adv + nu * lap)
    return out


def test_burgers_step_matches_reference_loops():
    grid = Grid(nx=6, ny=6, dt=0.15, n_steps=1)
    model = SurrogateModel(grid, ModelConfig(
        kind="burgers", advect=(0.5, 0.5), viscosity=0.2, boundary="periodic"))
    rng = np.random.default_rng(6)
    x = 0.5 * rng.standard_normal(model.state_shape)
    got = model.step_nl(x)
    want = _reference_burgers_step(x, grid.dt, grid.dx, grid.dy, 0.2)
    np.testing.assert_allclose(got, want, rtol=1e-14, atol=1e-15)
