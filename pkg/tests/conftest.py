import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hnfd.field import FieldConfig, build_field

settings.register_profile(
    "hnfd", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("hnfd")

SMALL = {
    "dense2": FieldConfig(arch="DenseGrid", input_dim=2, levels=3, min_res=4, max_res=16,
                          mlp_hidden_layers=2, mlp_hidden_width=16),
    "dense3": FieldConfig(arch="DenseGrid", input_dim=3, levels=2, min_res=4, max_res=8,
                          mlp_hidden_layers=1, mlp_hidden_width=16),
    "hash3": FieldConfig(arch="HashGrid", input_dim=3, levels=3, min_res=4, max_res=32,
                         hash_table_size=256, mlp_hidden_layers=1, mlp_hidden_width=16),
    "triplane": FieldConfig(arch="TriPlane", input_dim=3, plane_res=8, plane_feature_dim=4,
                            mlp_hidden_layers=1, mlp_hidden_width=16),
}


def noisy_field(config, seed=0, scale=0.5):
    """A field with O(1) grid features, so every parameter matters."""
    f = build_field(config, seed)
    theta = np.array(f.theta)
    g = f.layout.grid_size
    theta[:g] = np.random.default_rng(seed + 100).uniform(-scale, scale, size=g)
    return f.with_params(theta)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(params=sorted(SMALL))
def arch_field(request):
    return noisy_field(SMALL[request.param], seed=3)


class Affine:
    """``c + g.x`` as a field."""

    clamps_input = False

    def __init__(self, g, c=0.0):
        self.g = np.asarray(g, dtype=np.float64)
        self.c = float(c)
        self.input_dim = len(self.g)

    def eval_batch(self, xs):
        return self.c + np.asarray(xs) @ self.g

    def gradient_batch(self, xs):
        return np.broadcast_to(self.g, np.shape(xs)).copy()


class Quadratic:
    """``c + p.x + x^T H x / 2`` as a field."""

    clamps_input = False

    def __init__(self, H, p, c=0.0):
        self.H = np.asarray(H, dtype=np.float64)
        self.p = np.asarray(p, dtype=np.float64)
        self.c = float(c)
        self.input_dim = len(self.p)

    def eval_batch(self, xs):
        xs = np.asarray(xs)
        return self.c + xs @ self.p + 0.5 * np.einsum("ni,ij,nj->n", xs, self.H, xs)

    def gradient_batch(self, xs):
        return np.asarray(xs) @ self.H + self.p


class Func:
    clamps_input = False

    def __init__(self, fn, dim):
        self.fn = fn
        self.input_dim = dim

    def eval_batch(self, xs):
        return self.fn(np.asarray(xs, dtype=np.float64))
