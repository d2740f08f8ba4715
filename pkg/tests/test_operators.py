import numpy as np
import pytest
from hypothesis import given, strategies as st

from hnfd import operators as op
from hnfd.errors import ConfigError, DegenerateNeighborhoodError, SearchError
from hnfd.geometry import Ball, Sphere

from conftest import SMALL, Affine, Func, Quadratic, noisy_field


def spec(sigma=0.1, k=16, seed=0):
    return op.NeighborhoodSpec(sigma, k, seed)


# ---------------------------------------------------------------- neighbourhoods

def test_spec_validation():
    with pytest.raises(ConfigError):
        op.NeighborhoodSpec(0.0, 16)
    with pytest.raises(ConfigError):
        op.NeighborhoodSpec(float("nan"), 16)
    with pytest.raises(ConfigError):
        op.polyfit_gradient(Affine([1, 2]), [0, 0], spec(k=2))
    with pytest.raises(ConfigError):
        op.polyfit_hessian(Affine([1, 2, 3]), [0, 0, 0], spec(k=9))
    op.polyfit_hessian(Quadratic(np.eye(3), [0, 0, 0]), [0, 0, 0], spec(k=10))


def test_sample_neighborhood_deterministic():
    q = np.array([0.2, -0.1, 0.4])
    a = op.sample_neighborhood(q, spec(0.05, 256, 3))
    b = op.sample_neighborhood(q, spec(0.05, 256, 3))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, op.sample_neighborhood(q, spec(0.05, 256, 4)))
    assert not np.array_equal(a, op.sample_neighborhood(q + 1e-12, spec(0.05, 256, 3)))


def test_sample_mean_clt_bound():
    q = np.array([0.3, -0.2])
    s = spec(0.1, 100_000, 1)
    pts = op.sample_neighborhood(q, s)
    assert np.all(np.abs(pts.mean(axis=0) - q) < 5 * s.sigma / np.sqrt(s.k))
    assert np.allclose(pts.std(axis=0), s.sigma, rtol=0.02)


# ---------------------------------------------------------------- polynomial fits

def test_polyfit_affine_example():
    f = Affine([3.0, -2.0], 1.0)
    for q in ([0.0, 0.0], [0.7, -0.3], [-0.95, 0.99]):
        est = op.polyfit_gradient(f, q, spec(0.1, 16))
        assert est.method == "PolyLinear"
        np.testing.assert_allclose(est.gradient, [3, -2], atol=1e-9)


def test_polyfit_unit_sphere_normal():
    est = op.polyfit_gradient(Ball(1.0, dim=3), [1.0, 0.0, 0.0], spec(1e-2, 256))
    cos = est.gradient @ [1, 0, 0] / np.linalg.norm(est.gradient)
    assert np.degrees(np.arccos(min(cos, 1.0))) < 0.5


def test_polyfit_hessian_example():
    f = Func(lambda x: x[:, 0] ** 2 + 2 * x[:, 1] ** 2, 2)
    est = op.polyfit_hessian(f, [0.0, 0.0], spec(0.1, 32))
    np.testing.assert_allclose(est.hessian_matrix(), np.diag([2.0, 4.0]), atol=1e-8)
    assert est.laplacian == pytest.approx(6.0, abs=1e-8)
    np.testing.assert_allclose(est.gradient, [0, 0], atol=1e-8)


def test_polyfit_sphere_laplacian_and_curvature():
    sph = Sphere(0.5)
    est = op.polyfit_hessian(sph, [0.5, 0.0, 0.0], spec(1e-2, 256))
    # |x| - r has Laplacian (m-1)/|x| = 4 on the surface; the frozen bound
    # covers the O(sigma^2) smoothing bias and sampling noise at k = 256
    assert est.laplacian == pytest.approx(4.0, rel=0.02)
    assert est.laplacian / 2 == pytest.approx(2.0, rel=0.02)


@given(st.integers(2, 3), st.sampled_from([1e-3, 1e-2, 1e-1]), st.integers(0, 10**6))
def test_linear_fit_exact_on_affine(m, sigma, seed):
    rng = np.random.default_rng(seed)
    f = Affine(rng.uniform(-5, 5, m), rng.uniform(-1, 1))
    q = rng.uniform(-1, 1, m)
    for k in (m + 1, 256):
        g = op.polyfit_gradient(f, q, spec(sigma, k, seed)).gradient
        np.testing.assert_allclose(g, f.g, atol=1e-9)


@given(st.integers(2, 3), st.sampled_from([1e-3, 1e-2, 1e-1]), st.integers(0, 10**6))
def test_quadratic_fit_exact_on_quadratic(m, sigma, seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(-3, 3, (m, m))
    f = Quadratic(A + A.T, rng.uniform(-3, 3, m), rng.uniform(-1, 1))
    q = rng.uniform(-1, 1, m)
    for k in (op.quadratic_terms(m), 256):
        sp = spec(sigma, k, seed)
        est = op.polyfit_hessian(f, q, sp)
        tol = 1e-8 + _rounding_floor(f, q, sp)
        np.testing.assert_allclose(est.hessian_matrix(), f.H, atol=tol)
        np.testing.assert_allclose(est.gradient, f.H @ q + f.p, atol=tol)


def _rounding_floor(f, q, sp):
    # first-order effect of float64 rounding in the sampled values on the
    # second-order coefficients: eps * |y| * cond(scaled design) / s^2.
    # A random k = 6 design at sigma = 1e-3 can reach cond ~ 1e4, which
    # puts even an exact solve of the rounded data above 1e-8.
    u = op.sample_neighborhood(q, sp) - q
    s = np.sqrt(np.mean(u * u))
    D = op._quadratic_design((u / s)[None])[0]
    y = f.eval_batch(q + u)
    return np.finfo(float).eps * np.abs(y).max() * np.linalg.cond(D) / s**2


@given(st.integers(0, 10**6))
def test_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    q = rng.uniform(-0.5, 0.5, 3)
    pts = q + 0.05 * rng.standard_normal((64, 3))
    vals = np.sin(3 * pts[:, 0]) + pts[:, 1] * pts[:, 2]
    a = op.fit_linear(pts, vals, q)
    b = op.fit_linear(pts - q, vals, np.zeros(3))
    np.testing.assert_allclose(a.g, b.g, atol=1e-9)
    c = op.fit_quadratic(pts, vals, q)
    d = op.fit_quadratic(pts - q, vals, np.zeros(3))
    np.testing.assert_allclose(c.H, d.H, atol=1e-7)


@given(st.integers(0, 10**6))
def test_hessian_symmetric_and_trace_identity(seed):
    f = noisy_field(SMALL["dense3"], seed % 7)
    q = np.random.default_rng(seed).uniform(-0.8, 0.8, 3)
    est = op.polyfit_hessian(f, q, spec(0.05, 64, seed))
    H = est.hessian_matrix()
    assert np.array_equal(H, H.T)
    assert est.laplacian == est.hessian[op.diag_positions(3)].sum()


def test_smoothing_monotonicity_probe():
    eps, nu = 1e-3, 64
    f = Func(lambda x: 0.5 * x[:, 0] - 0.25 * x[:, 1] + eps * np.sin(2 * np.pi * nu * x[:, 0]), 2)
    qs = np.random.default_rng(0).uniform(-0.5, 0.5, (64, 2))

    def err(sigma):
        g = op.polyfit_gradient_batch(f, qs, spec(sigma, 256))
        return np.mean(np.linalg.norm(g - [0.5, -0.25], axis=1))

    assert err(2 / nu) < err(1 / (10 * nu))


def test_operators_deterministic_and_batch_consistent():
    f = noisy_field(SMALL["dense2"], 1)
    qs = np.random.default_rng(3).uniform(-0.9, 0.9, (6, 2))
    s = spec(0.03, 32, 9)
    batch = op.polyfit_gradient_batch(f, qs, s)
    assert np.array_equal(batch, op.polyfit_gradient_batch(f, qs, s))
    for q, g in zip(qs, batch):
        np.testing.assert_allclose(op.polyfit_gradient(f, q, s).gradient, g, atol=1e-12)
    a = op.sfd_gradient(f, qs[0], 0.05, 8, seed=2).gradient
    assert np.array_equal(a, op.sfd_gradient(f, qs[0], 0.05, 8, seed=2).gradient)
    b = op.gad_gradient(f, qs[0], s).gradient
    assert np.array_equal(b, op.gad_gradient(f, qs[0], s).gradient)


def test_neighbourhood_clamped_for_hybrid_fields():
    f = noisy_field(SMALL["dense2"], 1)
    q = np.array([0.999, 0.0])
    pts = np.clip(op.sample_neighborhood(q, spec(0.05, 32)), -1, 1)
    expected = op.fit_linear(pts, f.eval_batch(pts), q).g
    np.testing.assert_allclose(op.polyfit_gradient(f, q, spec(0.05, 32)).gradient, expected,
                               atol=1e-12)


# ---------------------------------------------------------------- baselines

def test_fd_examples():
    f = Affine([1.0, -4.0, 2.5], 0.3)
    for h in op.FD_STEPS:
        np.testing.assert_allclose(op.fd_gradient(f, [0.1, 0.2, 0.3], h).gradient, f.g,
                                   atol=1e-10)
    cube = Func(lambda x: x[:, 0] ** 3, 1)
    assert op.fd_gradient(cube, [1.0], 0.1).gradient[0] == pytest.approx(3.01, abs=1e-12)


def test_fd_laplacian_examples():
    f = Func(lambda x: x[:, 0] ** 2 + x[:, 1] ** 2, 2)
    for h in (0.5, 0.1, 0.01):
        assert op.fd_laplacian(f, [0.3, -0.2], h).laplacian == pytest.approx(4.0, rel=1e-9)
    assert op.fd_laplacian(Affine([2.0, 1.0]), [0.1, 0.1], 0.1).laplacian == pytest.approx(
        0.0, abs=1e-12)


def test_fd_step_set():
    assert op.FD_STEPS == (2 / 32, 2 / 64, 2 / 128, 2 / 256, 2 / 512)


def test_sfd_unbiased_on_affine():
    f = Affine([1.0, -2.0, 0.5])
    est = op.sfd_gradient(f, [0.1, 0.1, 0.1], 0.05, 100_000, seed=1)
    assert est.method == "SFD_N"
    assert np.linalg.norm(est.gradient - f.g) < 0.01 * np.linalg.norm(f.g)
    assert op.sfd_gradient(f, [0, 0, 0], 0.05, 1).method == "SFD"


def test_gad_examples():
    f = Affine([0.3, -1.2], 0.4)
    s = spec(0.05, 64)
    g = op.gad_gradient(f, [0.2, 0.1], s).gradient
    np.testing.assert_allclose(g, f.g, atol=1e-12)
    np.testing.assert_allclose(g, op.polyfit_gradient(f, [0.2, 0.1], s).gradient, atol=1e-9)


def test_operator_spec_dispatch():
    f = Affine([1.0, 2.0])
    qs = np.array([[0.1, 0.2], [0.3, -0.4]])
    for m in ("ad", "fd", "poly", "poly2", "sfd", "gad"):
        o = op.OperatorSpec(m, sigma=0.05, k=16, n_samples=4096)
        g = o.gradient_batch(f, qs)
        assert g.shape == (2, 2)
        tol = 0.1 if m == "sfd" else 1e-8
        np.testing.assert_allclose(g, np.tile(f.g, (2, 1)), atol=tol)
    with pytest.raises(ConfigError):
        op.OperatorSpec("magic")


# ---------------------------------------------------------------- search + solver

def test_telescopic_search_quadratic_objective():
    best, hist = op.telescopic_search(lambda s: (s - 0.03) ** 2)
    coarse = [s for s, _ in hist[:7]]
    assert coarse == list(op.COARSE_SIGMAS)
    fine = [s for s, _ in hist[7:]]
    # best coarse value 1e-2, best neighbour 1e-3: the fine sweep covers [1e-3, 1e-2]
    assert len(fine) == 20 and min(fine) == pytest.approx(1e-3) and max(fine) == pytest.approx(1e-2)
    assert best == pytest.approx(0.01)


def test_telescopic_search_tie_break_smallest():
    best, hist = op.telescopic_search(lambda s: 1.0)
    assert best == min(s for s, _ in hist[7:])


def test_telescopic_search_all_nonfinite():
    with pytest.raises(SearchError):
        op.telescopic_search(lambda s: float("nan"))


def test_telescopic_search_deterministic_on_field():
    f = Sphere(0.5)
    from hnfd.geometry import sample_surface

    S = sample_surface(f, 64, seed=0)
    a = op.select_sigma(f, S, k=32)
    b = op.select_sigma(f, S, k=32)
    assert a[0] == b[0]


def test_solve_least_squares_examples():
    y = np.array([1.0, -2.0, 3.5])
    np.testing.assert_array_equal(op.solve_least_squares(np.eye(3), y), y)
    rng = np.random.default_rng(0)
    A = rng.standard_normal((40, 3))
    x = np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(op.solve_least_squares(A, A @ x), x, atol=1e-10)
    A = rng.standard_normal((256, 4))
    y = rng.standard_normal(256)
    sol = op.solve_least_squares(A, y)
    assert np.linalg.norm(A.T @ (A @ sol - y)) <= 1e-6 * np.linalg.norm(y)


def test_solve_least_squares_degenerate():
    A = np.ones((10, 2))
    with pytest.raises(DegenerateNeighborhoodError):
        op.solve_least_squares(A, np.arange(10.0))
    with pytest.raises(ConfigError):
        op.solve_least_squares(np.ones((2, 3)), np.ones(2))


def test_angular_error_zero_estimate_is_180():
    err = op.angular_error_deg(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(err, [180.0, 90.0])
