import numpy as np
import pytest
from hypothesis import given, strategies as st

from hnfd import diff, network
from hnfd.errors import InputError, NumericError
from hnfd.field import FieldConfig, build_field

from conftest import SMALL, noisy_field


def off_face_points(field, n, rng, margin=1e-4):
    """Random points at least ``margin`` from every cell face of every level."""
    out = []
    res = [s.res for s in field.layout.segments]
    while len(out) < n:
        x = rng.uniform(-0.95, 0.95, field.input_dim)
        ok = True
        for r in res:
            u = (x + 1) * 0.5 * (r - 1)
            if np.any(np.abs(u - np.round(u)) * 2 / (r - 1) < margin):
                ok = False
        if ok:
            out.append(x)
    return np.array(out)


def rel_err(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def test_affine_rig_gradient_exact():
    cfg = FieldConfig(arch="DenseGrid", input_dim=2, levels=1, min_res=2, max_res=2,
                      feature_dim=1, mlp_hidden_layers=0)
    f = build_field(cfg, 0)
    theta = np.zeros(f.param_count)
    c, g = 0.25, np.array([1.5, -0.75])
    corners = np.array([[-1, -1], [-1, 1], [1, -1], [1, 1]], dtype=float)
    theta[:4] = c + corners @ g
    w = f.layout.layers[0]
    theta[w.w_offset] = 2.0
    theta[w.b_offset] = 0.5
    f = f.with_params(theta)
    xs = np.random.default_rng(0).uniform(-1, 1, (20, 2))
    np.testing.assert_allclose(diff.ad_input_gradient_batch(f, xs), np.tile(2 * g, (20, 1)), atol=1e-14)
    np.testing.assert_allclose(f.eval_batch(xs), 2 * (c + xs @ g) + 0.5, atol=1e-12)


def test_ad_matches_central_fd(arch_field):
    f = arch_field
    rng = np.random.default_rng(5)
    xs = off_face_points(f, 100, rng)
    g = diff.ad_input_gradient_batch(f, xs)
    h = 1e-6
    for i in range(f.input_dim):
        e = np.zeros(f.input_dim)
        e[i] = h
        fd = (f.eval_batch(xs + e) - f.eval_batch(xs - e)) / (2 * h)
        assert np.max(rel_err(g[:, i], fd, 1e-6)) < 1e-3


def _param_fd(fn, theta, idx, eps=1e-6):
    out = []
    for j in idx:
        tp, tm = theta.copy(), theta.copy()
        tp[j] += eps
        tm[j] -= eps
        out.append((fn(tp) - fn(tm)) / (2 * eps))
    return np.array(out)


def _subset(field, rng, n=100):
    """Parameters that actually influence the batch: MLP entries plus a
    random sample of grid entries."""
    lay = field.layout
    mlp = np.arange(lay.grid_size, lay.size)
    grid = rng.choice(lay.grid_size, size=min(n // 2, lay.grid_size), replace=False)
    return np.concatenate([grid, rng.choice(mlp, size=n - len(grid), replace=False)])


def test_param_gradient_matches_fd(arch_field):
    f = arch_field
    rng = np.random.default_rng(6)
    xs = off_face_points(f, 400, rng)
    targets = rng.standard_normal(len(xs))
    loss = diff.LossEvaluator.mse(xs, targets)
    theta = np.array(f.theta)
    val, grad = diff.param_gradient(f, loss, theta)

    def fn(t):
        return loss(network.evaluate(f.layout, t, xs)[:, 0])[0]

    idx = _subset(f, rng)
    fd = _param_fd(fn, theta, idx)
    assert val == pytest.approx(fn(theta))
    assert np.max(np.abs(grad[idx] - fd) / np.maximum(np.abs(fd), 1e-6)) < 1e-3


def test_double_diff_param_gradient_matches_fd(arch_field):
    f = arch_field
    rng = np.random.default_rng(7)
    qs = off_face_points(f, 20, rng)
    target = rng.standard_normal(qs.shape)
    theta = np.array(f.theta)
    val, grad = diff.param_gradient_of_input_gradient(f, qs, target, theta)

    def fn(t):
        _, g = network.evaluate_with_grad(f.layout, t, qs)
        return float(np.sum((g - target) ** 2))

    idx = _subset(f, rng)
    fd = _param_fd(fn, theta, idx)
    assert val == pytest.approx(fn(theta))
    assert np.max(np.abs(grad[idx] - fd) / np.maximum(np.abs(fd), 1e-6)) < 1e-3


def test_square_loss_output_weight():
    f = noisy_field(SMALL["dense2"], 8)
    x0 = np.array([[0.13, -0.41]])
    F0 = f.eval_batch(x0)[0]
    loss = diff.LossEvaluator(x0, lambda v: (float(v[0] ** 2), 2 * v))
    _, grad = diff.param_gradient(f, loss)
    last = f.layout.layers[-1]
    # dF/db of the output bias is 1, so dloss/db = 2 F
    assert grad[last.b_offset] == pytest.approx(2 * F0, rel=1e-12)


def test_constant_loss_zero_gradient(arch_field):
    xs = np.zeros((4, arch_field.input_dim))
    val, grad = diff.param_gradient(arch_field, diff.LossEvaluator.constant(xs, 3.0))
    assert val == 3.0 and not np.any(grad)


def test_mse_descends_under_small_step():
    f = noisy_field(SMALL["dense2"], 9)
    rng = np.random.default_rng(9)
    xs = rng.uniform(-1, 1, (128, 2))
    loss = diff.LossEvaluator.mse(xs, np.linalg.norm(xs, axis=1) - 0.5)
    l0, g = diff.param_gradient(f, loss)
    theta = np.array(f.theta) - 1e-3 * g
    l1, _ = diff.param_gradient(f, loss, theta)
    assert l1 < l0


def test_zero_residual_zero_gradient(arch_field):
    f = arch_field
    qs = off_face_points(f, 5, np.random.default_rng(1))
    target = diff.ad_input_gradient_batch(f, qs)
    val, grad = diff.param_gradient_of_input_gradient(f, qs, target)
    assert val == 0 and not np.any(grad)


def test_single_point_matches_batch():
    f = noisy_field(SMALL["dense3"], 2)
    q = np.array([0.1, 0.2, -0.3])
    t = np.array([1.0, 0.0, 0.0])
    a = diff.param_gradient_of_input_gradient(f, q, t)
    b = diff.param_gradient_of_input_gradient(f, q[None], t[None])
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_nonfinite_target_rejected():
    f = build_field(SMALL["dense2"], 0)
    with pytest.raises(InputError):
        diff.param_gradient_of_input_gradient(f, [0.0, 0.0], [np.nan, 0.0])


def test_nonfinite_loss_raises():
    f = build_field(SMALL["dense2"], 0)
    loss = diff.LossEvaluator(np.zeros((2, 2)), lambda v: (float("inf"), np.zeros_like(v)))
    with pytest.raises(NumericError):
        diff.param_gradient(f, loss)


@given(st.floats(-3, 3), st.integers(0, 1000))
def test_param_gradient_linear_in_loss(alpha, seed):
    f = noisy_field(SMALL["dense2"], 4)
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-1, 1, (16, 2))
    l1 = diff.LossEvaluator.mse(xs, rng.standard_normal(16))
    l2 = diff.LossEvaluator.mse(xs, rng.standard_normal(16))
    _, g1 = diff.param_gradient(f, l1)
    _, g2 = diff.param_gradient(f, l2)
    _, g = diff.param_gradient(f, l1.scaled(alpha) + l2)
    np.testing.assert_allclose(g, alpha * g1 + g2, atol=1e-6)


def test_clamped_axis_has_zero_gradient():
    f = noisy_field(SMALL["dense2"], 3)
    g = diff.ad_input_gradient(f, [1.5, 0.3])
    assert g[0] == 0 and g[1] != 0
