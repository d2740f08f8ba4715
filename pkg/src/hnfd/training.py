"""Fitting fields: SDF pretraining, gradient-supervised fine-tuning,
warm-start training from scratch, eikonal baselines and sigma ensembles.

All loops keep a float64 master copy of the parameters and round to the
float32 checkpoint precision only when returning a field.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import network
from .errors import ConfigError, NumericError, TrainingError
from .field import HybridField, build_field
from .geometry import sample_surface
from .operators import OperatorSpec, angular_error_deg, exact_gradient_batch

log = logging.getLogger(__name__)

LOSSES = ("MSE", "FT", "Eikonal", "FDEikonal")
DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings shared by every training entry point.

    ``lr_decay_factor`` is applied every ``lr_decay_interval`` steps; an
    interval of 0 means ``steps // 5`` and a factor of 1 keeps the rate
    constant.
    """

    steps: int = 3000
    warm_start: int = 0
    lr: float = 1e-3
    lr_decay_factor: float = 1.0
    lr_decay_interval: int = 0
    batch_size: int = 4096
    loss: str = "MSE"
    grad_op: OperatorSpec = dc_field(default_factory=lambda: OperatorSpec("poly", sigma=0.01, k=64))
    eikonal_weight: float = 1e-3
    fd_h: float = 2.0 / 64
    surface_fraction: float = 0.5
    surface_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not 0 <= self.warm_start <= self.steps:
            raise ConfigError(f"warm_start must lie in [0, steps], got {self.warm_start}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if not 0 < self.lr_decay_factor <= 1 or self.lr_decay_interval < 0:
            raise ConfigError("lr_decay_factor must be in (0, 1] and interval >= 0")
        if not 0 <= self.surface_fraction <= 1:
            raise ConfigError("surface_fraction must be in [0, 1]")

    @classmethod
    def pretraining(cls, **kw):
        """Step decay by 0.2 five times over the run."""
        kw.setdefault("lr_decay_factor", 0.2)
        return cls(**kw)

    @classmethod
    def finetuning(cls, **kw):
        kw.setdefault("loss", "FT")
        kw.setdefault("lr", 2e-3)
        return cls(**kw)

    def replace(self, **kw):
        return replace(self, **kw)

    def lr_at(self, step, total=None):
        total = self.steps if total is None else total
        interval = self.lr_decay_interval or max(1, total // 5)
        return self.lr * self.lr_decay_factor ** (step // interval)


@dataclass
class FinetuneResult:
    """A trained field with its per-step ``(l_con, l_grad)`` history.

    For plain MSE runs ``l_con`` holds the data term; eikonal runs put the
    regulariser in ``l_grad``.
    """

    field: HybridField
    loss_history: np.ndarray
    sigma_used: float = float("nan")

    @property
    def total(self):
        return self.loss_history.sum(axis=1)

    @property
    def final_loss(self):
        return float(self.total[-1]) if len(self.loss_history) else float("nan")


TrainResult = FinetuneResult


class Adam:
    def __init__(self, size, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad, lr):
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * grad
        self.v *= self.b2
        self.v += (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        theta -= lr * mhat / (np.sqrt(vhat) + self.eps)
        return theta


class PointSampler:
    """Uniform points in ``[-1, 1]^m`` mixed with jittered surface points."""

    def __init__(self, dim, rng, surface=None, fraction=0.5, noise=0.05):
        self.dim = dim
        self.rng = rng
        self.surface = None if surface is None or len(surface) == 0 else surface
        self.fraction = fraction if self.surface is not None else 0.0
        self.noise = noise

    def draw(self, n):
        n_near = int(round(self.fraction * n))
        uni = self.rng.uniform(-1.0, 1.0, size=(n - n_near, self.dim))
        if n_near == 0:
            return uni
        base = self.surface[self.rng.integers(0, len(self.surface), size=n_near)]
        near = np.clip(base + self.noise * self.rng.standard_normal(base.shape), -1.0, 1.0)
        return np.concatenate([uni, near])


def _check_progress(step, loss):
    if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise TrainingError(f"training diverged at step {step}: loss = {loss}")


def _mse_terms(layout, theta, pts, targets):
    tape = network.forward(layout, theta, pts)
    r = tape.values[:, 0] - targets
    loss = float(np.mean(r * r))
    return loss, network.backward(tape, 2.0 * r / len(r))


def _eikonal_terms(layout, theta, pts, targets, weight):
    tape = network.forward(layout, theta, pts, tangents=True)
    B = len(pts)
    r = tape.values[:, 0] - targets
    g = tape.input_grads
    norm = np.linalg.norm(g, axis=1)
    e = norm - 1.0
    safe = np.where(norm > 0, norm, 1.0)
    adj_g = (weight * 2.0 * e / safe / B)[:, None] * g
    grad = network.backward(tape, 2.0 * r / B, adj_g)
    return float(np.mean(r * r)), weight * float(np.mean(e * e)), grad


def _fd_eikonal_terms(layout, theta, pts, targets, weight, h):
    B, m = pts.shape
    E = np.eye(m) * h
    stacked = np.concatenate([pts, (pts[:, None, :] + E).reshape(-1, m),
                              (pts[:, None, :] - E).reshape(-1, m)])
    tape = network.forward(layout, theta, stacked)
    v = tape.values[:, 0]
    r = v[:B] - targets
    vp = v[B:B + B * m].reshape(B, m)
    vm = v[B + B * m:].reshape(B, m)
    g = (vp - vm) / (2.0 * h)
    norm = np.linalg.norm(g, axis=1)
    e = norm - 1.0
    safe = np.where(norm > 0, norm, 1.0)
    dg = (weight * 2.0 * e / safe / B)[:, None] * g
    adj = np.concatenate([2.0 * r / B, (dg / (2.0 * h)).ravel(), (-dg / (2.0 * h)).ravel()])
    grad = network.backward(tape, adj)
    return float(np.mean(r * r)), weight * float(np.mean(e * e)), grad


def _ft_terms(layout, theta, pts, target_vals, target_grads):
    tape = network.forward(layout, theta, pts, tangents=True)
    B = len(pts)
    r = tape.values[:, 0] - target_vals
    rg = tape.input_grads - target_grads
    l_con = float(np.mean(r * r))
    l_grad = float(np.mean(np.sum(rg * rg, axis=1)))
    grad = network.backward(tape, 2.0 * r / B, 2.0 * rg / B)
    return l_con, l_grad, grad


def _surface_pool(oracle, cfg, rng):
    if cfg.surface_fraction == 0:
        return None
    try:
        return sample_surface(oracle, 4096, seed=int(rng.integers(2**31))).positions
    except Exception as exc:  # sampling failure degrades to uniform sampling
        log.warning("surface sampling failed (%s); falling back to uniform points", exc)
        return None


def _fit_sdf(theta, layout, oracle, cfg, steps, rng, pool, history, step0=0):
    sampler = PointSampler(layout.input_dim, rng, pool, cfg.surface_fraction, cfg.surface_noise)
    opt = Adam(theta.size)
    for i in range(steps):
        pts = sampler.draw(cfg.batch_size)
        targets = np.asarray(oracle.eval_batch(pts), dtype=np.float64)
        if cfg.loss == "Eikonal":
            l_con, l_grad, grad = _eikonal_terms(layout, theta, pts, targets, cfg.eikonal_weight)
        elif cfg.loss == "FDEikonal":
            l_con, l_grad, grad = _fd_eikonal_terms(layout, theta, pts, targets,
                                                    cfg.eikonal_weight, cfg.fd_h)
        else:
            l_con, grad = _mse_terms(layout, theta, pts, targets)
            l_grad = 0.0
        _check_progress(step0 + i, l_con + l_grad)
        history.append((l_con, l_grad))
        opt.step(theta, grad, cfg.lr_at(i, steps))
    return theta


def _finalize(field, theta, history, sigma=float("nan")):
    if not np.all(np.isfinite(theta)):
        raise TrainingError("parameters became non-finite")
    hist = np.asarray(history, dtype=np.float64).reshape(-1, 2)
    return FinetuneResult(field.with_params(theta), hist, sigma)


def pretrain_sdf(config_field, oracle, cfg):
    """Fit a fresh field (built from ``cfg.seed``) to the oracle's SDF.

    ``config_field`` is a :class:`FieldConfig` or an initial
    :class:`HybridField`. ``cfg.loss`` may be ``MSE``, ``Eikonal`` or
    ``FDEikonal``; an ``FT`` config is trained with plain MSE.
    """
    field = _initial_field(config_field, cfg.seed)
    if field.input_dim != oracle.input_dim:
        raise ConfigError("field and oracle dimensions differ")
    rng = np.random.default_rng(cfg.seed)
    theta = np.array(field.theta)
    history = []
    if cfg.steps:
        pool = _surface_pool(oracle, cfg, rng)
        if cfg.loss == "FT":
            cfg = cfg.replace(loss="MSE")
        _fit_sdf(theta, field.layout, oracle, cfg, cfg.steps, rng, pool, history)
    return _finalize(field, theta, history)


def train_eikonal(config_field, oracle, cfg):
    if cfg.loss not in ("Eikonal", "FDEikonal"):
        raise ConfigError("train_eikonal needs loss Eikonal or FDEikonal")
    return pretrain_sdf(config_field, oracle, cfg)


def _initial_field(config_field, seed):
    if isinstance(config_field, HybridField):
        return config_field
    return build_field(config_field, seed)


def project_to_zero_set(field, xs, iterations=8, tol=1e-3):
    """Newton projection ``x <- x - F(x) grad F / |grad F|^2`` onto the zero
    level set; returns only the points that converged inside the domain."""
    xs = np.array(xs, dtype=np.float64)
    for _ in range(iterations):
        v, g = _value_grad(field, xs)
        n2 = np.sum(g * g, axis=1)
        ok = n2 > 1e-12
        xs[ok] -= (v[ok] / n2[ok])[:, None] * g[ok]
        xs = np.clip(xs, -1.0, 1.0)
    v = np.asarray(field.eval_batch(xs))
    keep = np.abs(v) < tol
    return xs[keep]


def _value_grad(field, xs):
    return np.asarray(field.eval_batch(xs)), exact_gradient_batch(field, xs)


def _frozen_pool(M, cfg, rng):
    if cfg.surface_fraction == 0:
        return None
    pool = project_to_zero_set(M, rng.uniform(-1.0, 1.0, size=(8192, M.input_dim)))
    if len(pool) < 64:
        log.warning("frozen field has few zero-level points (%d); sampling uniformly", len(pool))
        return None
    return pool


def _finetune_theta(M, theta, cfg, steps, rng, history, step0=0):
    op = cfg.grad_op
    layout = M.layout
    sampler = PointSampler(M.input_dim, rng, _frozen_pool(M, cfg, rng),
                           cfg.surface_fraction, cfg.surface_noise)
    opt = Adam(theta.size)
    for i in range(steps):
        pts = sampler.draw(cfg.batch_size)
        target_vals = np.asarray(M.eval_batch(pts))
        try:
            target_grads = op.gradient_batch(M, pts, rng=rng)
        except NumericError as exc:
            raise TrainingError(f"gradient target failed at step {step0 + i}: {exc}") from exc
        l_con, l_grad, grad = _ft_terms(layout, theta, pts, target_vals, target_grads)
        _check_progress(step0 + i, l_con + l_grad)
        history.append((l_con, l_grad))
        opt.step(theta, grad, cfg.lr_at(i, steps))
    return theta


def finetune(pretrained, cfg):
    """Minimise ``|F - M|^2 + |grad F - grad_hat M|^2`` starting from ``M``.

    ``M`` is a frozen copy of ``pretrained``; ``grad_hat`` is ``cfg.grad_op``
    applied to ``M``, recomputed on every batch.
    """
    if cfg.loss != "FT":
        raise ConfigError("finetune needs cfg.loss = 'FT'")
    M = pretrained
    rng = np.random.default_rng(cfg.seed)
    theta = np.array(M.theta)
    history = []
    _finetune_theta(M, theta, cfg, cfg.steps, rng, history)
    return _finalize(M, theta, history, cfg.grad_op.scale)


def train_warm_start(config_field, oracle, cfg):
    """``s = cfg.warm_start`` MSE steps, then ``n - s`` fine-tuning steps
    against the field frozen at step ``s``."""
    s, n = cfg.warm_start, cfg.steps
    if s == 0:
        log.warning("warm_start = 0: fine-tuning against an untrained field is unstable")
    field = _initial_field(config_field, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    theta = np.array(field.theta)
    history = []
    if s:
        pool = _surface_pool(oracle, cfg, rng)
        _fit_sdf(theta, field.layout, oracle, cfg.replace(loss="MSE"), s, rng, pool, history)
    if n - s:
        M = field.with_params(theta)
        theta = np.array(M.theta)
        _finetune_theta(M, theta, cfg.replace(loss="FT"), n - s, rng, history, step0=s)
    return _finalize(field, theta, history, cfg.grad_op.scale)


def ad_angle_error(field, samples):
    """Mean AD normal angular error (degrees) against ground-truth samples."""
    g = exact_gradient_batch(field, samples.positions)
    return float(np.mean(angular_error_deg(g, samples.normals)))


def ensemble_finetune(pretrained, sigma_list, cfg, gt_samples=None, score=None):
    """Fine-tune once per sigma and keep the member whose AD normals score
    best (lowest). Ties go to the smallest sigma.

    ``score(field) -> float`` overrides the default AD angular error against
    ``gt_samples``. For an ``fd`` operator the list supplies stencil sizes.
    """
    sigmas = sorted(float(s) for s in sigma_list)
    if not sigmas:
        raise ConfigError("sigma_list is empty")
    if score is None:
        if gt_samples is None:
            raise ConfigError("ensemble_finetune needs gt_samples or score")
        score = lambda f: ad_angle_error(f, gt_samples)  # noqa: E731
    best, best_err = None, np.inf
    for s in sigmas:
        key = "h" if cfg.grad_op.method == "fd" else "sigma"
        member_cfg = cfg.replace(grad_op=cfg.grad_op.replace(**{key: s}))
        try:
            res = finetune(pretrained, member_cfg)
        except TrainingError as exc:
            log.warning("ensemble member sigma=%g diverged: %s", s, exc)
            continue
        err = float(score(res.field))
        res.sigma_used = s
        if err < best_err:
            best, best_err = res, err
    if best is None:
        raise TrainingError("every ensemble member diverged")
    return best


def write_loss_csv(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "l_con", "l_grad", "total"])
        for i, (a, b) in enumerate(result.loss_history):
            w.writerow([i, repr(float(a)), repr(float(b)), repr(float(a + b))])
    return path
