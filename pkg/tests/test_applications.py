import numpy as np
import pytest
from hypothesis import given, strategies as st

from hnfd.applications import advection as A
from hnfd.applications import collision as C
from hnfd.applications import render as R
from hnfd.errors import ConfigError, FormatError
from hnfd.field import FieldConfig, build_field
from hnfd.geometry import Sphere, Torus
from hnfd.operators import OperatorSpec

from conftest import SMALL, noisy_field

AD = OperatorSpec("ad")
SPHERE = Sphere(0.5)


# ---------------------------------------------------------------- rendering

def test_sphere_trace_examples():
    hit = R.sphere_trace(SPHERE, [0, 0, -3], [0, 0, 1])
    np.testing.assert_allclose(hit, [0, 0, -0.5], atol=1e-4)
    assert abs(SPHERE.sdf(hit)) < 1e-4
    assert R.sphere_trace(SPHERE, [0, 0, -3], [0, 1, 0]) is None
    assert R.sphere_trace(SPHERE, [0, 0, -3], [0, 0, -1]) is None
    assert R.sphere_trace(SPHERE, [0, 2, -3], [0, 0, 1]) is None  # never enters the box
    hit = R.sphere_trace(Torus(0.6, 0.2), [-3, 0, 0], [1, 0, 0])
    np.testing.assert_allclose(hit, [-0.8, 0, 0], atol=1e-4)


def test_unit_sphere_trace_example():
    hit = R.sphere_trace(Sphere(1.0), [0, 0, -3], [0, 0, 1])
    np.testing.assert_allclose(hit, [0, 0, -1], atol=1e-4)


def test_center_pixel_bytes():
    img = R.render_normals(SPHERE, R.Camera(resolution=(9, 9)), AD)
    np.testing.assert_array_equal(R.to_bytes(img)[4, 4], [128, 128, 0])


def test_camera_rays():
    o, d = R.Camera(resolution=(3, 3)).rays()
    np.testing.assert_allclose(d[4], [0, 0, 1])
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    assert d[0, 1] > 0 and d[0, 0] > 0  # top-left: up, and left of +z view is +x
    with pytest.raises(ConfigError):
        R.Camera(up=(0, 0, 1))
    with pytest.raises(ConfigError):
        R.Camera(fov_deg=0)


def test_render_normals_center_and_background():
    img = R.render_normals(SPHERE, R.Camera(resolution=(9, 9)), AD)
    np.testing.assert_allclose(img[4, 4], [0.5, 0.5, 0.0], atol=1e-6)
    np.testing.assert_array_equal(img[0, 0], [R.BACKGROUND] * 3)


def test_lambertian_and_specular():
    cam = R.Camera(resolution=(9, 9))
    img = R.shade(SPHERE, cam, AD, "lambertian")
    assert img[4, 4, 0] == pytest.approx(1.0, abs=1e-9)
    assert np.all(img[R.trace_camera(SPHERE, cam).hit.reshape(9, 9)] <= 1.0)
    np.testing.assert_array_equal(img[0, 0], [R.BACKGROUND] * 3)
    img = R.shade(SPHERE, cam, AD, "lambertian", light_dir=(0, 0, 1))
    assert img[4, 4, 0] == 0.0
    env = R.shade(SPHERE, cam, AD, "specular_env")
    # the centre ray reflects straight back along -z
    np.testing.assert_allclose(env[4, 4], R.environment(np.array([[0, 0, -1.0]]))[0], atol=1e-9)
    with pytest.raises(ConfigError):
        R.shade(SPHERE, cam, AD, "toon")


def test_normal_angle_map_exact_is_zero():
    m = R.normal_angle_map(SPHERE, SPHERE, R.Camera(resolution=(16, 16)), AD)
    assert np.nanmax(m) < 1e-6
    assert np.isnan(m[0, 0])


def test_laplacian_energy():
    assert R.laplacian_energy(np.ones((8, 8, 3))) == 0.0
    ramp = np.add.outer(np.arange(8.0), np.arange(8.0))
    assert R.laplacian_energy(ramp) == 0.0
    spike = np.zeros((5, 5))
    spike[2, 2] = 1
    assert R.laplacian_energy(spike) == pytest.approx((4 + 4 * 1) / 9)
    assert R.laplacian_energy(spike, np.zeros((5, 5), bool)) == 0.0


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(0, 1, (5, 7, 3))
    p = R.write_ppm(img, tmp_path / "a.ppm")
    assert p.read_bytes().startswith(b"P6\n7 5\n255\n")
    back = R.read_ppm(p)
    np.testing.assert_array_equal(back, R.to_bytes(img))
    assert np.max(np.abs(back / 255.0 - img)) <= 0.5 / 255 + 1e-12
    (tmp_path / "b.ppm").write_bytes(b"P3\n1 1\n255\n000")
    with pytest.raises(FormatError):
        R.read_ppm(tmp_path / "b.ppm")
    (tmp_path / "c.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(FormatError):
        R.read_ppm(tmp_path / "c.ppm")


# ---------------------------------------------------------------- collisions

@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.integers(0, 1000))
def test_reflection_preserves_speed_and_is_involution(v, seed):
    n = np.random.default_rng(seed).normal(size=3)
    n /= np.linalg.norm(n)
    v = np.array(v)
    r = C.reflect(v, n)
    assert np.linalg.norm(r) == pytest.approx(np.linalg.norm(v), abs=1e-9)
    np.testing.assert_allclose(C.reflect(r, n), v, atol=1e-9)
    assert r @ n == pytest.approx(-(v @ n), abs=1e-9)


def test_collision_with_exact_normals():
    trials = C.collision_trials(SPHERE, SPHERE, 200, AD, seed=0)
    assert max(t.error_deg for t in trials) < 1e-9
    speeds = [np.linalg.norm(t.velocity) for t in trials]
    assert 0.5 <= min(speeds) and max(speeds) <= 2.0
    assert C.run_collision_trials(SPHERE, SPHERE, 50, AD) < 1e-9


def test_collision_error_doubles_normal_error():
    class Tilted:
        input_dim = 3
        clamps_input = False

        def gradient_batch(self, xs):
            n = xs / np.linalg.norm(xs, axis=1, keepdims=True)
            t = np.cross(n, [0.0, 0.0, 1.0])
            t /= np.linalg.norm(t, axis=1, keepdims=True)
            a = np.radians(3.0)
            return np.cos(a) * n + np.sin(a) * t

    err = C.run_collision_trials(Tilted(), SPHERE, 100, OperatorSpec("gad", sigma=1e-9, k=1))
    assert err == pytest.approx(6.0, abs=1e-6)


# ---------------------------------------------------------------- advection

def test_pulse():
    p = A.GaussianPulse()
    assert p.eval_batch(np.array([[-0.6, -0.6]]))[0] == 1.0
    np.testing.assert_array_equal(p.gradient_batch(np.array([[-0.6, -0.6]])), [[0, 0]])
    assert p.max_hessian_norm == pytest.approx(100.0)
    q = p.at_time((0.25, 0.25), 2.0)
    assert q.center == pytest.approx((-0.1, -0.1))


def test_taylor_bound_example():
    # (|a| dt)^2 / s^2 / 2 with |a| = 0.25 sqrt 2, dt = 0.05, s = 0.1
    assert A.taylor_bound(A.GaussianPulse(), A.VELOCITY, A.DT) == pytest.approx(0.015625)


def test_exact_gradient_steps_within_taylor_bound():
    p = A.GaussianPulse()
    errs, mses = A.oracle_step_errors(p, steps=100, eval_res=64)
    assert np.all(errs <= A.taylor_bound(p, A.VELOCITY, A.DT))
    assert np.all(mses > 0)


def test_step_targets_zero_velocity_and_stationary_peak():
    p = A.GaussianPulse()
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    np.testing.assert_array_equal(A.step_targets(p, pts, (0, 0), 0.05, AD), p.eval_batch(pts))
    c = np.array([[-0.6, -0.6]])
    assert A.step_targets(p, c, A.VELOCITY, A.DT, AD)[0] == 1.0


def test_zero_velocity_stays_at_refit_floor():
    p = A.GaussianPulse()
    f0 = A.fit_initial(p, SMALL["dense2"], steps=300)
    cfg = A.RefitConfig(max_steps=20, pool=1024, boundary=128)
    tl = A.run_advection(p, AD, steps=5, a=(0.0, 0.0), refit_cfg=cfg, initial=f0, eval_res=32)
    assert not tl.crashed
    assert max(tl.mse) < 1.5 * tl.mse[0]


def test_advect_step_and_run():
    f = build_field(SMALL["dense2"], 0)
    cfg = A.RefitConfig(max_steps=5, pool=256, boundary=32)
    st = A.AdvectionState(f)
    nxt = A.advect_step(st, AD, cfg)
    assert nxt.step == 1 and nxt.t == pytest.approx(0.05)
    again = A.advect_step(st, AD, cfg)
    assert np.array_equal(nxt.field.theta, again.field.theta)
    tl = A.run_advection(A.GaussianPulse(), AD, steps=2, refit_cfg=cfg, initial=f, eval_res=16)
    assert tl.steps == [0, 1, 2] and not tl.crashed
    with pytest.raises(ConfigError):
        A.AdvectionState(noisy_field(SMALL["dense3"]))
    with pytest.raises(ConfigError):
        A.run_advection(A.GaussianPulse(), AD, steps=0, initial=f)


def test_run_advection_crash_row():
    f = build_field(SMALL["dense2"], 0)
    theta = np.array(f.theta)
    theta[-1] = 5e3  # output bias far above the crash limit
    tl = A.run_advection(A.GaussianPulse(), AD, steps=3, initial=f.with_params(theta),
                         refit_cfg=A.RefitConfig(max_steps=1, pool=64, boundary=8), eval_res=8)
    assert tl.crashed and np.isnan(tl.mse[-1]) and tl.steps[-1] == 1


def test_grid_baseline():
    p = A.GaussianPulse()
    tl = A.grid_advect_baseline(p, res=128, steps=100)
    assert len(tl.steps) == 101 and tl.mse[0] == 0.0
    assert np.all(np.diff(tl.peak) <= 1e-15)  # upwind is monotone: peaks never grow
    assert tl.mse[-1] > tl.mse[1]
    const = A.grid_advect_baseline(p, res=32, steps=10, boundary_value=0.7,
                                   initial=np.full(32 * 32, 0.7))
    np.testing.assert_allclose(const.peak, 0.7, rtol=0, atol=1e-15)
    with pytest.raises(ConfigError):
        A.grid_advect_baseline(p, res=128, steps=1, dt=0.1)  # CFL 1.6
    A.grid_advect_baseline(p, res=128, steps=1, dt=0.0625)  # CFL exactly 1


def test_cfl_number_example():
    # dx = 2/128, so 0.25 * 0.05 / dx = 0.8 and the default run is stable
    assert 0.25 * A.DT / (2 / 128) == pytest.approx(0.8)


def test_timeline_csv(tmp_path):
    tl = A.AdvectionTimeline()
    tl.add(0, 0.0, 0.0)
    tl.add(1, 0.05, 1e-4)
    tl.add(2, 0.1, float("nan"))
    tl.crashed = True
    p = tl.write_csv(tmp_path / "t.csv")
    assert p.read_text().splitlines() == ["step,t,mse", "0,0.0,0.0", "1,0.05,0.0001", "2,0.1,nan"]
    back = A.read_timeline_csv(p)
    assert back.crashed and back.steps == [0, 1, 2]
