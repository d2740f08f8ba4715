"""2D linear advection ``u_t + a . grad u = 0`` with a neural field state.

Each forward Euler step builds targets ``u(x) - dt a . grad_hat u(x)`` on
uniform samples (zero on the boundary) and refits the field to them,
warm-started from the current weights. A first-order upwind grid solver
serves as the dissipative reference.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field as dc_field

import numpy as np

from .. import network
from ..errors import ConfigError, InputError, StepError
from ..field import FieldConfig, HybridField, build_field
from ..operators import OperatorSpec
from ..training import Adam, TrainConfig, pretrain_sdf

log = logging.getLogger(__name__)

VELOCITY = (0.25, 0.25)
DT = 0.05
CRASH_LIMIT = 1e3


@dataclass(frozen=True)
class GaussianPulse:
    """``amplitude * exp(-|x - center|^2 / (2 s^2))`` in 2D."""

    center: tuple = (-0.6, -0.6)
    s: float = 0.1
    amplitude: float = 1.0
    input_dim = 2
    clamps_input = False
    exact = True

    def eval_batch(self, xs):
        d = np.asarray(xs, dtype=np.float64) - np.asarray(self.center)
        return self.amplitude * np.exp(-np.sum(d * d, axis=1) / (2 * self.s**2))

    __call__ = eval_batch

    def gradient_batch(self, xs):
        d = np.asarray(xs, dtype=np.float64) - np.asarray(self.center)
        return -(self.eval_batch(xs) / self.s**2)[:, None] * d

    @property
    def max_hessian_norm(self):
        """``max_x ||hess u(x)||_2``, attained at the centre."""
        return abs(self.amplitude) / self.s**2

    def translated(self, shift):
        c = np.asarray(self.center, dtype=np.float64) + np.asarray(shift, dtype=np.float64)
        return GaussianPulse(tuple(float(v) for v in c), self.s, self.amplitude)

    def at_time(self, a, t):
        """Exact free-space solution at time ``t``."""
        return self.translated(np.asarray(a, dtype=np.float64) * t)


def taylor_bound(pulse, a, dt):
    """One-step remainder bound ``(|a| dt)^2 max||hess u|| / 2``."""
    return (np.linalg.norm(a) * dt) ** 2 * pulse.max_hessian_norm / 2.0


@dataclass(frozen=True)
class RefitConfig:
    max_steps: int = 200
    lr: float = 2e-3
    tol: float = 1e-6
    pool: int = 8192
    boundary: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1 or not self.lr > 0 or self.pool < 1 or self.boundary < 0:
            raise ConfigError("invalid refit configuration")


@dataclass(frozen=True)
class AdvectionState:
    field: HybridField
    t: float = 0.0
    a: tuple = VELOCITY
    dt: float = DT
    step: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.field.input_dim != 2:
            raise ConfigError("advection needs a 2D field")


def boundary_points(n, rng):
    """``n`` points uniform on the boundary of ``[-1, 1]^2``."""
    side = rng.integers(0, 4, size=n)
    s = rng.uniform(-1.0, 1.0, size=n)
    pts = np.empty((n, 2))
    fixed = np.where(side % 2 == 0, -1.0, 1.0)
    horiz = side < 2
    pts[:, 0] = np.where(horiz, s, fixed)
    pts[:, 1] = np.where(horiz, fixed, s)
    return pts


def step_targets(field, pts, a, dt, op, rng=None):
    """``u(x) - dt a . grad_hat u(x)`` with ``grad_hat`` from ``op``."""
    u = np.asarray(field.eval_batch(pts), dtype=np.float64)
    g = np.asarray(op.gradient_batch(field, pts, rng=rng), dtype=np.float64)
    return u - dt * g @ np.asarray(a, dtype=np.float64)


def refit(field, pts, targets, cfg):
    """Full-batch Adam on the MSE to ``targets``, warm-started from ``field``.

    Stops early once the loss falls below ``cfg.tol``. Raises
    :class:`StepError` when the loss stops being finite.
    """
    layout = field.layout
    theta = np.array(field.theta)
    opt = Adam(theta.size)
    n = len(targets)
    loss = np.inf
    for _ in range(cfg.max_steps):
        tape = network.forward(layout, theta, pts)
        r = tape.values[:, 0] - targets
        loss = float(np.mean(r * r))
        if not np.isfinite(loss):
            raise StepError(f"refit loss became non-finite ({loss})")
        if loss < cfg.tol:
            break
        opt.step(theta, network.backward(tape, 2.0 * r / n), cfg.lr)
    if not np.all(np.isfinite(theta)):
        raise StepError("refit produced non-finite parameters")
    return field.with_params(theta), loss


def advect_step(state, op, refit_cfg=RefitConfig()):
    rng = np.random.default_rng([refit_cfg.seed, state.step])
    interior = rng.uniform(-1.0, 1.0, size=(refit_cfg.pool, 2))
    edge = boundary_points(refit_cfg.boundary, rng)
    try:
        tgt = step_targets(state.field, interior, state.a, state.dt, op, rng)
    except (FloatingPointError, ValueError) as exc:
        raise StepError(f"target evaluation failed: {exc}") from exc
    if not np.all(np.isfinite(tgt)):
        raise StepError("non-finite advection targets")
    pts = np.concatenate([interior, edge])
    targets = np.concatenate([tgt, np.zeros(len(edge))])
    new_field, _ = refit(state.field, pts, targets, refit_cfg)
    return AdvectionState(new_field, state.t + state.dt, state.a, state.dt, state.step + 1)


def eval_grid(res=128):
    axis = -1.0 + (np.arange(res) + 0.5) * (2.0 / res)
    return np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)


@dataclass
class AdvectionTimeline:
    """Rows ``(step, t, mse)``; a crash is the last row, with ``mse = nan``."""

    steps: list = dc_field(default_factory=list)
    times: list = dc_field(default_factory=list)
    mse: list = dc_field(default_factory=list)
    peak: list = dc_field(default_factory=list)
    crashed: bool = False

    def add(self, step, t, mse, peak=float("nan")):
        self.steps.append(step)
        self.times.append(t)
        self.mse.append(mse)
        self.peak.append(peak)

    @property
    def final_mse(self):
        return self.mse[-1]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "t", "mse"])
            for s, t, e in zip(self.steps, self.times, self.mse):
                w.writerow([s, repr(round(t, 10)), "nan" if not np.isfinite(e) else repr(e)])
        return path


def read_timeline_csv(path):
    tl = AdvectionTimeline()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != ["step", "t", "mse"]:
            raise InputError(f"{path}: not a timeline CSV")
        for row in reader:
            tl.add(int(row[0]), float(row[1]), float(row[2]))
    tl.crashed = bool(tl.mse) and not np.isfinite(tl.mse[-1])
    return tl


ADVECTION_FIELD = FieldConfig(arch="DenseGrid", input_dim=2, levels=4, min_res=16, max_res=128,
                              feature_dim=2, mlp_hidden_layers=2, mlp_hidden_width=64)


def fit_initial(pulse, config=ADVECTION_FIELD, steps=1000, seed=0):
    """Field fitted to the initial condition (uniform sampling)."""
    cfg = TrainConfig.pretraining(steps=steps, lr=5e-3, batch_size=4096, surface_fraction=0.0,
                                  seed=seed)
    return pretrain_sdf(build_field(config, seed), pulse, cfg).field


def run_advection(pulse, op, steps=100, a=VELOCITY, dt=DT, refit_cfg=RefitConfig(),
                  initial=None, eval_res=128, callback=None):
    """Advance ``steps`` Euler steps and record the MSE to the translated
    pulse on a ``eval_res^2`` cell-centred grid after each one.

    A refit failure or ``max |u| > 1e3`` on the grid ends the run with a
    crash row.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if isinstance(op, str):
        op = OperatorSpec(op)
    grid = eval_grid(eval_res)
    state = AdvectionState(initial if initial is not None else fit_initial(pulse), 0.0,
                           tuple(a), dt)
    tl = AdvectionTimeline()

    def record(st):
        u = np.asarray(st.field.eval_batch(grid))
        exact = pulse.at_time(a, st.t).eval_batch(grid)
        tl.add(st.step, st.t, float(np.mean((u - exact) ** 2)), float(np.max(np.abs(u))))
        return float(np.max(np.abs(u)))

    record(state)
    for _ in range(steps):
        try:
            state = advect_step(state, op, refit_cfg)
        except StepError as exc:
            log.warning("advection crashed at step %d: %s", state.step + 1, exc)
            tl.add(state.step + 1, state.t + dt, float("nan"))
            tl.crashed = True
            break
        if record(state) > CRASH_LIMIT:
            tl.mse[-1] = float("nan")
            tl.crashed = True
            break
        if callback is not None:
            callback(state, tl)
    return tl


def oracle_step_errors(pulse, steps=100, a=VELOCITY, dt=DT, eval_res=128):
    """One Euler step with exact gradients from the exact state at every
    time level; returns ``(max_errors, mses)`` against the exact solution
    one step later. Each max error is bounded by :func:`taylor_bound`."""
    grid = eval_grid(eval_res)
    exact_op = OperatorSpec("ad")
    max_err, mses = [], []
    for n in range(steps):
        u_n = pulse.at_time(a, n * dt)
        tgt = step_targets(u_n, grid, a, dt, exact_op)
        d = tgt - pulse.at_time(a, (n + 1) * dt).eval_batch(grid)
        max_err.append(float(np.max(np.abs(d))))
        mses.append(float(np.mean(d * d)))
    return np.array(max_err), np.array(mses)


def grid_advect_baseline(pulse, res=128, steps=100, a=VELOCITY, dt=DT, boundary_value=0.0,
                         initial=None):
    """First-order upwind on a cell-centred ``res^2`` grid with Dirichlet
    ghost cells, dimensionally split (x sweep then y sweep).

    Returns an :class:`AdvectionTimeline` whose ``peak`` column holds
    ``max |u|``.
    """
    if res < 16:
        raise ConfigError("grid resolution must be >= 16")
    dx = 2.0 / res
    a = np.asarray(a, dtype=np.float64)
    cfl = float(np.max(np.abs(a)) * dt / dx)
    if cfl > 1.0:
        raise ConfigError(f"CFL number {cfl:.3f} exceeds 1")
    grid = eval_grid(res)
    u = (pulse.eval_batch(grid) if initial is None else np.asarray(initial, dtype=np.float64))
    u = u.reshape(res, res).copy()
    tl = AdvectionTimeline()

    def record(n):
        exact = pulse.at_time(a, n * dt).eval_batch(grid).reshape(res, res)
        tl.add(n, n * dt, float(np.mean((u - exact) ** 2)), float(np.max(np.abs(u))))

    record(0)
    for n in range(1, steps + 1):
        for axis in (0, 1):
            nu = a[axis] * dt / dx
            if nu == 0:
                continue
            pad = np.pad(u, [(1, 1) if ax == axis else (0, 0) for ax in (0, 1)],
                         constant_values=boundary_value)
            sl = lambda lo, hi: tuple(slice(lo, hi) if ax == axis else slice(None)  # noqa: E731
                                      for ax in (0, 1))
            if nu > 0:
                u = u - nu * (u - pad[sl(0, res)])
            else:
                u = u - nu * (pad[sl(2, res + 2)] - u)
        record(n)
    return tl
