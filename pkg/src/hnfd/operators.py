"""Derivative estimators queried at arbitrary points.

The polynomial-fit operators sample a Gaussian neighbourhood around the
query, evaluate the field there, and fit a local linear (gradient) or
quadratic (gradient, Hessian, Laplacian) model by least squares. The
alternatives kept for comparison are autodiff, central finite differences,
stochastic finite differences and Gaussian-averaged autodiff.

Every stochastic estimator is a pure function of ``(field, q, seed)``: each
query draws from its own generator seeded by ``seed`` and the bytes of
``q``. Batch functions also accept an explicit ``rng``; training loops use
that to draw a whole batch of neighbourhoods at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import diff
from .errors import ConfigError, DegenerateNeighborhoodError, InputError, SearchError
from .field import HybridField

METHODS = ("AD", "FD", "SFD", "SFD_N", "GAD", "PolyLinear", "PolyQuadratic")

#: coarse level of the telescopic sigma search: 10^i for -5 <= i <= 1
COARSE_SIGMAS = tuple(10.0**i for i in range(-5, 2))
#: finite-difference stencil sweep 2 / 2^i for 5 <= i <= 9
FD_STEPS = tuple(2.0 / 2**i for i in range(5, 10))


def linear_terms(m):
    return m + 1


def quadratic_terms(m):
    return 1 + m + m * (m + 1) // 2


def tril_pairs(m):
    """Row-major lower-triangle index pairs ``(i, j)`` with ``j <= i``."""
    return [(i, j) for i in range(m) for j in range(i + 1)]


def diag_positions(m):
    return [n for n, (i, j) in enumerate(tril_pairs(m)) if i == j]


def tril_to_matrix(lower, m):
    H = np.zeros(lower.shape[:-1] + (m, m))
    for n, (i, j) in enumerate(tril_pairs(m)):
        H[..., i, j] = lower[..., n]
        H[..., j, i] = lower[..., n]
    return H


@dataclass(frozen=True)
class NeighborhoodSpec:
    sigma: float
    k: int = 256
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ConfigError(f"sigma must be finite and positive, got {self.sigma}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")

    def check(self, m, quadratic=False):
        need = quadratic_terms(m) if quadratic else linear_terms(m)
        if self.k < need:
            kind = "quadratic" if quadratic else "linear"
            raise ConfigError(f"{kind} fit in {m}D needs k >= {need}, got k = {self.k}")


@dataclass
class DerivativeEstimate:
    gradient: np.ndarray
    method: str
    hyperparams: dict = dc_field(default_factory=dict)
    hessian: np.ndarray | None = None
    laplacian: float | None = None

    def hessian_matrix(self):
        if self.hessian is None:
            return None
        return tril_to_matrix(self.hessian, len(self.gradient))


@dataclass
class PolyFitLinear:
    g: np.ndarray
    b: float


@dataclass
class PolyFitQuadratic:
    H: np.ndarray
    p: np.ndarray
    q0: float

    def hessian_matrix(self):
        return tril_to_matrix(self.H, len(self.p))


# ---------------------------------------------------------------- sampling

def _query_rng(q, seed):
    words = np.frombuffer(np.ascontiguousarray(q, dtype=np.float64).tobytes(), dtype=np.uint32)
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *words.tolist()])


def sample_neighborhood(q, spec):
    """``k`` draws from ``N(q, sigma^2 I)``, deterministic in ``(q, seed)``.

    Points are returned unclamped; operators clamp them to the field's
    domain before evaluation.
    """
    q = np.asarray(q, dtype=np.float64)
    return q + spec.sigma * _query_rng(q, spec.seed).standard_normal((spec.k, q.size))


def _offsets(qs, k, seed, rng):
    N, m = qs.shape
    if rng is not None:
        return rng.standard_normal((N, k, m))
    out = np.empty((N, k, m))
    for i in range(N):
        out[i] = _query_rng(qs[i], seed).standard_normal((k, m))
    return out


def _neighbourhood_values(field, qs, offsets, sigma):
    pts = qs[:, None, :] + sigma * offsets
    if getattr(field, "clamps_input", False):
        pts = np.clip(pts, -1.0, 1.0)
    N, k, m = pts.shape
    vals = np.asarray(field.eval_batch(pts.reshape(N * k, m)), dtype=np.float64)
    return pts, vals.reshape(N, k)


# ---------------------------------------------------------------- least squares

def _chol_solve(L, r):
    """Solve ``L L^T x = r`` for a batch of lower-triangular factors."""
    d = L.shape[-1]
    z = np.empty_like(r)
    for i in range(d):
        z[:, i] = (r[:, i] - np.einsum("nj,nj->n", L[:, i, :i], z[:, :i])) / L[:, i, i]
    x = np.empty_like(r)
    for i in range(d - 1, -1, -1):
        x[:, i] = (z[:, i] - np.einsum("nj,nj->n", L[:, i + 1:, i], x[:, i + 1:])) / L[:, i, i]
    return x


def _cholesky_with_jitter(N):
    try:
        return np.linalg.cholesky(N)
    except np.linalg.LinAlgError:
        pass
    L = np.empty_like(N)
    d = N.shape[-1]
    for i in range(len(N)):
        try:
            L[i] = np.linalg.cholesky(N[i])
            continue
        except np.linalg.LinAlgError:
            pass
        lam = 1e-10 * np.trace(N[i]) / d
        try:
            L[i] = np.linalg.cholesky(N[i] + lam * np.eye(d))
        except np.linalg.LinAlgError:
            raise DegenerateNeighborhoodError(
                "normal equations singular even after Tikhonov jitter"
            ) from None
    return L


def _lstsq_batch(A, y):
    """Batched least squares via normal equations, Cholesky, and one step of
    iterative refinement. ``A`` is ``(N, k, d)``, ``y`` is ``(N, k)``."""
    N_mat = np.einsum("nki,nkj->nij", A, A)
    d = A.shape[-1]
    tr = np.trace(N_mat, axis1=1, axis2=2)
    L = _cholesky_with_jitter(N_mat)
    pivots = np.diagonal(L, axis1=1, axis2=2) ** 2
    if np.any(~np.isfinite(pivots)) or np.any(pivots.min(axis=1) <= 1e-9 * tr / d):
        raise DegenerateNeighborhoodError("rank-deficient neighbourhood design")
    x = _chol_solve(L, np.einsum("nki,nk->ni", A, y))
    resid = y - np.einsum("nki,ni->nk", A, x)
    return x + _chol_solve(L, np.einsum("nki,nk->ni", A, resid))


def solve_least_squares(design, y):
    """Minimiser of ``||design @ x - y||^2``.

    Normal equations with a Cholesky factorisation; a failed factorisation
    is retried once with jitter ``1e-10 * trace(A^T A) / d``.
    """
    A = np.asarray(design, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if A.ndim != 2 or y.shape != (A.shape[0],):
        raise InputError("design must be (k, d) and y (k,)")
    if A.shape[0] < A.shape[1]:
        raise ConfigError(f"need k >= d, got k = {A.shape[0]} < d = {A.shape[1]}")
    return _lstsq_batch(A[None], y[None])[0]


def _linear_design(u):
    N, k, m = u.shape
    return np.concatenate([np.ones((N, k, 1)), u], axis=2)


def _quadratic_design(u):
    N, k, m = u.shape
    cols = [np.ones((N, k)), *[u[..., i] for i in range(m)]]
    for i, j in tril_pairs(m):
        cols.append(0.5 * u[..., i] * u[..., i] if i == j else u[..., i] * u[..., j])
    return np.stack(cols, axis=2)


def _scale(dx):
    s = np.sqrt(np.mean(dx * dx, axis=(1, 2)))
    if np.any(s == 0):
        raise DegenerateNeighborhoodError("all neighbourhood points coincide with the query")
    return s


def fit_linear_batch(points, values, centers):
    """Fit ``y ~ b + g.(x - c)`` per query; returns ``(g (N, m), b (N,))``.

    Centred coordinates are rescaled to unit RMS before solving, which
    keeps the normal equations well conditioned for tiny ``sigma``.
    """
    dx = points - centers[:, None, :]
    s = _scale(dx)
    coef = _lstsq_batch(_linear_design(dx / s[:, None, None]), values)
    return coef[:, 1:] / s[:, None], coef[:, 0]


def fit_quadratic_batch(points, values, centers):
    """Fit ``y ~ q0 + p.(x - c) + 1/2 (x - c)^T H (x - c)`` per query.

    Returns ``(H_lower (N, m(m+1)/2), p (N, m), q0 (N,))``; ``H`` is the
    Hessian itself, stored as its row-major lower triangle.
    """
    dx = points - centers[:, None, :]
    s = _scale(dx)
    m = dx.shape[2]
    coef = _lstsq_batch(_quadratic_design(dx / s[:, None, None]), values)
    p = coef[:, 1:m + 1] / s[:, None]
    H = coef[:, m + 1:] / (s * s)[:, None]
    return H, p, coef[:, 0]


def fit_linear(points, values, center):
    g, b = fit_linear_batch(np.asarray(points)[None], np.asarray(values)[None],
                            np.asarray(center, dtype=np.float64)[None])
    return PolyFitLinear(g[0], float(b[0]))


def fit_quadratic(points, values, center):
    H, p, q0 = fit_quadratic_batch(np.asarray(points)[None], np.asarray(values)[None],
                                   np.asarray(center, dtype=np.float64)[None])
    return PolyFitQuadratic(H[0], p[0], float(q0[0]))


# ---------------------------------------------------------------- operators

def _queries(field, q):
    qs = np.asarray(q, dtype=np.float64)
    qs = qs.reshape(1, -1) if qs.ndim == 1 else qs
    if qs.ndim != 2 or qs.shape[1] != field.input_dim:
        raise InputError(f"query points must have {field.input_dim} coordinates")
    if not np.all(np.isfinite(qs)):
        raise InputError("query points must be finite")
    return qs


def polyfit_gradient_batch(field, qs, spec, rng=None, chunk=2048):
    """Linear-fit gradients ``(N, m)`` at each row of ``qs``."""
    qs = _queries(field, qs)
    spec.check(qs.shape[1])
    out = np.empty_like(qs)
    for i in range(0, len(qs), chunk):
        part = qs[i:i + chunk]
        pts, vals = _neighbourhood_values(field, part, _offsets(part, spec.k, spec.seed, rng),
                                          spec.sigma)
        out[i:i + chunk] = fit_linear_batch(pts, vals, part)[0]
    return out


def polyfit_hessian_batch(field, qs, spec, rng=None, chunk=1024):
    """Quadratic-fit ``(gradient (N, m), H_lower (N, t), laplacian (N,))``."""
    qs = _queries(field, qs)
    m = qs.shape[1]
    spec.check(m, quadratic=True)
    grads = np.empty_like(qs)
    hess = np.empty((len(qs), m * (m + 1) // 2))
    for i in range(0, len(qs), chunk):
        part = qs[i:i + chunk]
        pts, vals = _neighbourhood_values(field, part, _offsets(part, spec.k, spec.seed, rng),
                                          spec.sigma)
        H, p, _ = fit_quadratic_batch(pts, vals, part)
        grads[i:i + chunk] = p
        hess[i:i + chunk] = H
    lap = hess[:, diag_positions(m)].sum(axis=1)
    return grads, hess, lap


def polyfit_gradient(field, q, spec):
    g = polyfit_gradient_batch(field, q, spec)[0]
    return DerivativeEstimate(g, "PolyLinear", {"sigma": spec.sigma, "k": spec.k, "seed": spec.seed})


def polyfit_hessian(field, q, spec):
    g, H, lap = polyfit_hessian_batch(field, q, spec)
    return DerivativeEstimate(g[0], "PolyQuadratic",
                              {"sigma": spec.sigma, "k": spec.k, "seed": spec.seed},
                              hessian=H[0], laplacian=float(lap[0]))


def fd_gradient_batch(field, qs, h):
    if not h > 0:
        raise ConfigError("h must be positive")
    qs = _queries(field, qs)
    N, m = qs.shape
    E = np.eye(m) * h
    pts = np.concatenate([qs[:, None, :] + E[None], qs[:, None, :] - E[None]], axis=1)
    vals = np.asarray(field.eval_batch(pts.reshape(-1, m))).reshape(N, 2 * m)
    return (vals[:, :m] - vals[:, m:]) / (2.0 * h)


def fd_laplacian_batch(field, qs, h):
    if not h > 0:
        raise ConfigError("h must be positive")
    qs = _queries(field, qs)
    N, m = qs.shape
    E = np.eye(m) * h
    pts = np.concatenate([qs[:, None, :], qs[:, None, :] + E[None], qs[:, None, :] - E[None]],
                         axis=1)
    vals = np.asarray(field.eval_batch(pts.reshape(-1, m))).reshape(N, 2 * m + 1)
    centre = vals[:, :1]
    grads = (vals[:, 1:m + 1] - vals[:, m + 1:]) / (2.0 * h)
    lap = np.sum((vals[:, 1:m + 1] - 2.0 * centre + vals[:, m + 1:]) / (h * h), axis=1)
    return grads, lap


def fd_gradient(field, q, h):
    return DerivativeEstimate(fd_gradient_batch(field, q, h)[0], "FD", {"h": h})


def fd_laplacian(field, q, h):
    g, lap = fd_laplacian_batch(field, q, h)
    return DerivativeEstimate(g[0], "FD", {"h": h}, laplacian=float(lap[0]))


def sfd_gradient_batch(field, qs, sigma, n_samples=1, seed=0, rng=None):
    """Stochastic finite differences: mean of ``m u (F(q+su) - F(q-su)) / 2s``
    over directions ``u`` uniform on the unit sphere."""
    if not sigma > 0 or n_samples < 1:
        raise ConfigError("need sigma > 0 and n_samples >= 1")
    qs = _queries(field, qs)
    N, m = qs.shape
    u = _offsets(qs, n_samples, seed, rng)
    u /= np.linalg.norm(u, axis=2, keepdims=True)
    pts = np.concatenate([qs[:, None, :] + sigma * u, qs[:, None, :] - sigma * u], axis=1)
    vals = np.asarray(field.eval_batch(pts.reshape(-1, m))).reshape(N, 2 * n_samples)
    slope = (vals[:, :n_samples] - vals[:, n_samples:]) / (2.0 * sigma)
    return m * np.einsum("ns,nsm->nm", slope, u) / n_samples


def sfd_gradient(field, q, sigma, n_samples=1, seed=0):
    g = sfd_gradient_batch(field, q, sigma, n_samples, seed)[0]
    return DerivativeEstimate(g, "SFD" if n_samples == 1 else "SFD_N",
                              {"sigma": sigma, "n_samples": n_samples, "seed": seed})


def exact_gradient_batch(field, qs):
    """Autodiff for hybrid fields, closed form for analytic ones."""
    qs = _queries(field, qs)
    if isinstance(field, HybridField):
        return diff.ad_input_gradient_batch(field, qs)
    if hasattr(field, "gradient_batch"):
        return np.asarray(field.gradient_batch(qs), dtype=np.float64)
    raise InputError(f"{type(field).__name__} has no exact gradient")


def gad_gradient_batch(field, qs, spec, rng=None):
    """Gaussian-averaged autodiff: mean exact gradient over the neighbourhood."""
    qs = _queries(field, qs)
    N, m = qs.shape
    pts = qs[:, None, :] + spec.sigma * _offsets(qs, spec.k, spec.seed, rng)
    if getattr(field, "clamps_input", False):
        pts = np.clip(pts, -1.0, 1.0)
    g = exact_gradient_batch(field, pts.reshape(-1, m))
    return g.reshape(N, spec.k, m).mean(axis=1)


def gad_gradient(field, q, spec):
    g = gad_gradient_batch(field, q, spec)[0]
    return DerivativeEstimate(g, "GAD", {"sigma": spec.sigma, "k": spec.k, "seed": spec.seed})


def ad_gradient(field, q):
    return DerivativeEstimate(exact_gradient_batch(field, q)[0], "AD", {})


# ---------------------------------------------------------------- dispatch

@dataclass(frozen=True)
class OperatorSpec:
    """Names one gradient operator and its hyperparameters.

    ``method`` is one of ``ad``, ``fd``, ``poly``, ``poly2`` (quadratic
    fit), ``sfd``, ``gad``.
    """

    method: str = "poly"
    sigma: float = 0.01
    k: int = 256
    h: float = 2.0 / 64
    n_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("ad", "fd", "poly", "poly2", "sfd", "gad"):
            raise ConfigError(f"unknown operator method {self.method!r}")

    @property
    def neighborhood(self):
        return NeighborhoodSpec(self.sigma, self.k, self.seed)

    @property
    def tag(self):
        return {"ad": "AD", "fd": "FD", "poly": "PolyLinear", "poly2": "PolyQuadratic",
                "sfd": "SFD" if self.n_samples == 1 else "SFD_N", "gad": "GAD"}[self.method]

    @property
    def scale(self):
        """The smoothing hyperparameter reported in metric tables."""
        if self.method == "fd":
            return self.h
        if self.method in ("poly", "poly2", "sfd", "gad"):
            return self.sigma
        return float("nan")

    def gradient_batch(self, field, qs, rng=None):
        if self.method == "ad":
            return exact_gradient_batch(field, qs)
        if self.method == "fd":
            return fd_gradient_batch(field, qs, self.h)
        if self.method == "poly":
            return polyfit_gradient_batch(field, qs, self.neighborhood, rng)
        if self.method == "poly2":
            return polyfit_hessian_batch(field, qs, self.neighborhood, rng)[0]
        if self.method == "sfd":
            return sfd_gradient_batch(field, qs, self.sigma, self.n_samples, self.seed, rng)
        return gad_gradient_batch(field, qs, self.neighborhood, rng)

    def laplacian_batch(self, field, qs, rng=None):
        if self.method == "fd":
            return fd_laplacian_batch(field, qs, self.h)[1]
        if self.method in ("poly", "poly2"):
            return polyfit_hessian_batch(field, qs, self.neighborhood, rng)[2]
        raise ConfigError(f"operator {self.method!r} has no Laplacian")

    def replace(self, **kw):
        d = {k: getattr(self, k) for k in ("method", "sigma", "k", "h", "n_samples", "seed")}
        d.update(kw)
        return OperatorSpec(**d)


# ---------------------------------------------------------------- hyperparameters

def telescopic_search(objective, coarse_set=COARSE_SIGMAS, fine_count=20):
    """Two-level sigma sweep.

    Evaluates ``objective`` on ``coarse_set``, takes the best value and its
    better neighbour, then sweeps ``fine_count`` evenly spaced values between
    them (endpoints included). Ties go to the smallest sigma. Returns
    ``(best_sigma, history)`` with ``history`` a list of ``(sigma, value)``.
    """
    coarse = sorted(float(s) for s in coarse_set)
    if not coarse:
        raise SearchError("coarse set is empty")
    history = []

    def score(values):
        out = []
        for s in values:
            try:
                v = float(objective(s))
            except (DegenerateNeighborhoodError, FloatingPointError):
                v = float("nan")
            history.append((s, v))
            out.append(v if np.isfinite(v) else np.inf)
        return np.array(out)

    cv = score(coarse)
    if not np.any(np.isfinite(cv)):
        raise SearchError("objective is non-finite for every coarse sigma")
    best = int(np.argmin(cv))
    nbrs = [i for i in (best - 1, best + 1) if 0 <= i < len(coarse)]
    if not nbrs:
        return coarse[best], history
    nb = min(nbrs, key=lambda i: (cv[i], coarse[i]))
    lo, hi = sorted((coarse[best], coarse[nb]))
    fine = [float(s) for s in np.linspace(lo, hi, fine_count)]
    fv = score(fine)
    if not np.any(np.isfinite(fv)):
        return coarse[best], history
    return float(fine[int(np.argmin(fv))]), history


def angular_error_deg(estimates, truths):
    """Per-point angle between (renormalised) estimates and unit truths;
    zero-length estimates count as 180 degrees."""
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    norm = np.linalg.norm(est, axis=1)
    bad = ~(norm > 0) | ~np.isfinite(norm)
    a = est / np.where(bad, 1.0, norm)[:, None]
    # atan2(|a x b|, a.b) stays accurate near 0 and 180 degrees
    if a.shape[1] == 2:
        sin = np.abs(a[:, 0] * tru[:, 1] - a[:, 1] * tru[:, 0])
    else:
        sin = np.linalg.norm(np.cross(a, tru), axis=1)
    ang = np.degrees(np.arctan2(sin, np.einsum("nm,nm->n", a, tru)))
    ang[bad] = 180.0
    return ang


def select_sigma(field, samples, k=256, seed=0, method="poly", coarse_set=COARSE_SIGMAS):
    """Telescopic search for the sigma that minimises mean angular error of
    ``method`` (``poly`` or ``gad``) against ground-truth ``samples``."""
    def objective(sigma):
        op = OperatorSpec(method, sigma=sigma, k=k, seed=seed)
        g = op.gradient_batch(field, samples.positions)
        return float(np.mean(angular_error_deg(g, samples.normals)))

    return telescopic_search(objective, coarse_set)


def select_fd_step(field, samples, steps=FD_STEPS):
    """Best stencil size from ``steps`` by mean angular error."""
    errs = [float(np.mean(angular_error_deg(fd_gradient_batch(field, samples.positions, h),
                                            samples.normals))) for h in steps]
    i = int(np.argmin(errs))
    return steps[i], list(zip(steps, errs))
