"""Analytic shape oracles: exact SDFs, normals and mean curvatures.

Mean curvature follows ``kappa = laplacian(sdf) / (m - 1)``, so a sphere of
radius ``r`` has ``kappa = 1 / r`` in 2D and 3D and convex shapes are
positive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError, SamplingError, UndefinedPointError

log = logging.getLogger(__name__)

_AXIS_EPS = 1e-12


def _points(x, m):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x.reshape(1, -1) if single else x
    if xs.ndim != 2 or xs.shape[1] != m:
        raise InputError(f"expected points with {m} coordinates, got shape {x.shape}")
    if not np.all(np.isfinite(xs)):
        raise InputError("points must be finite")
    return xs, single


def _out(v, single):
    if single:
        return float(v[0]) if v.ndim == 1 else v[0]
    return v


class ShapeOracle:
    """Base class. Subclasses implement the ``_sdf/_normal/_curvature``
    batch hooks on ``(N, m)`` arrays; public methods accept one point or a
    batch. Oracles are also scalar fields (``eval_batch``), unclamped.
    """

    input_dim = 3
    exact = True
    clamps_input = False

    def sdf(self, x):
        xs, single = _points(x, self.input_dim)
        return _out(self._sdf(xs), single)

    def normal(self, x):
        xs, single = _points(x, self.input_dim)
        return _out(self._normal(xs), single)

    def mean_curvature(self, x):
        if not self.exact:
            raise UndefinedPointError(f"{self!r} is not an exact SDF; no curvature ground truth")
        xs, single = _points(x, self.input_dim)
        return _out(self._curvature(xs), single)

    curvature = mean_curvature

    def eval_batch(self, xs):
        return self._sdf(_points(xs, self.input_dim)[0])

    __call__ = eval_batch

    def gradient_batch(self, xs):
        return self._normal(_points(xs, self.input_dim)[0])

    def _seed_surface(self, rng, count):
        """Initial guesses for surface sampling; projected afterwards."""
        return rng.uniform(-1.0, 1.0, size=(count, self.input_dim))


@dataclass(frozen=True)
class Ball(ShapeOracle):
    """Circle (m=2) or sphere (m=3) of radius ``radius`` about ``center``."""

    radius: float
    dim: int = 3
    center: tuple = None

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError("radius must be positive")
        if self.dim not in (2, 3):
            raise ConfigError("dim must be 2 or 3")
        c = (0.0,) * self.dim if self.center is None else tuple(float(v) for v in self.center)
        if len(c) != self.dim:
            raise ConfigError("center has wrong dimension")
        object.__setattr__(self, "center", c)

    @property
    def input_dim(self):
        return self.dim

    def _rel(self, xs):
        d = xs - np.asarray(self.center)
        return d, np.linalg.norm(d, axis=1)

    def _sdf(self, xs):
        return self._rel(xs)[1] - self.radius

    def _normal(self, xs):
        d, r = self._rel(xs)
        if np.any(r < _AXIS_EPS):
            raise UndefinedPointError("normal undefined at the center")
        return d / r[:, None]

    def _curvature(self, xs):
        _, r = self._rel(xs)
        if np.any(r < _AXIS_EPS):
            raise UndefinedPointError("curvature undefined at the center (medial axis)")
        return 1.0 / r

    def laplacian(self, x):
        xs, single = _points(x, self.dim)
        return _out((self.dim - 1) / self._rel(xs)[1], single)

    def _seed_surface(self, rng, count):
        u = rng.normal(size=(count, self.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * u


def Circle2D(r=1.0, center=None):
    return Ball(r, 2, center)


def Sphere(r=0.5, center=None):
    return Ball(r, 3, center)


@dataclass(frozen=True)
class Box(ShapeOracle):
    """Axis-aligned box with optional edge rounding (exact SDF)."""

    half_extents: tuple
    rounding: float = 0.0

    def __post_init__(self):
        h = tuple(float(v) for v in self.half_extents)
        if len(h) not in (2, 3) or min(h) <= 0:
            raise ConfigError("half_extents must be 2 or 3 positive values")
        if self.rounding < 0:
            raise ConfigError("rounding must be >= 0")
        object.__setattr__(self, "half_extents", h)

    @property
    def input_dim(self):
        return len(self.half_extents)

    def _q(self, xs):
        return np.abs(xs) - (np.asarray(self.half_extents) - self.rounding)

    def _sdf(self, xs):
        q = self._q(xs)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside - self.rounding

    def _normal(self, xs):
        q = self._q(xs)
        s = np.where(xs >= 0, 1.0, -1.0)
        qp = np.maximum(q, 0.0)
        d = np.linalg.norm(qp, axis=1)
        out = d > 0
        n = np.zeros_like(xs)
        n[out] = qp[out] / d[out, None] * s[out]
        inner = ~out
        if inner.any():
            axis = q[inner].argmax(axis=1)
            n[np.flatnonzero(inner), axis] = s[inner, axis]
        return n

    def _curvature(self, xs):
        q = self._q(xs)
        k = (q > 0).sum(axis=1)
        d = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        curved = k >= 2
        on_edge = (q > -_AXIS_EPS).sum(axis=1) >= 2
        if np.any((curved | on_edge) & (d < _AXIS_EPS)):
            raise UndefinedPointError("curvature undefined on a sharp edge or corner")
        lap = np.zeros(len(xs))
        lap[curved] = (k[curved] - 1) / d[curved]
        return lap / (self.input_dim - 1)


@dataclass(frozen=True)
class Torus(ShapeOracle):
    """Torus around the z axis: major radius ``R``, tube radius ``r``."""

    R: float
    r: float

    def __post_init__(self):
        if not (0 < self.r < self.R):
            raise ConfigError("need 0 < r < R")

    input_dim = 3

    def _parts(self, xs):
        rho = np.hypot(xs[:, 0], xs[:, 1])
        a = rho - self.R
        d = np.hypot(a, xs[:, 2])
        return rho, a, d

    def _sdf(self, xs):
        return self._parts(xs)[2] - self.r

    def _normal(self, xs):
        rho, a, d = self._parts(xs)
        if np.any(rho < _AXIS_EPS) or np.any(d < _AXIS_EPS):
            raise UndefinedPointError("torus normal undefined on its axis or core circle")
        return np.stack([a / d * xs[:, 0] / rho, a / d * xs[:, 1] / rho, xs[:, 2] / d], axis=1)

    def _curvature(self, xs):
        rho, a, d = self._parts(xs)
        if np.any(rho < _AXIS_EPS) or np.any(d < _AXIS_EPS):
            raise UndefinedPointError("torus curvature undefined on its axis or core circle")
        return 0.5 * (1.0 / d + a / (d * rho))

    def _seed_surface(self, rng, count):
        # area element is proportional to (R + r cos v); rejection-sample v
        out = []
        while sum(len(o) for o in out) < count:
            u = rng.uniform(0, 2 * np.pi, count)
            v = rng.uniform(0, 2 * np.pi, count)
            keep = rng.uniform(0, self.R + self.r, count) < self.R + self.r * np.cos(v)
            u, v = u[keep], v[keep]
            rad = self.R + self.r * np.cos(v)
            out.append(np.stack([rad * np.cos(u), rad * np.sin(u), self.r * np.sin(v)], axis=1))
        return np.concatenate(out)[:count]


@dataclass(frozen=True)
class CSG(ShapeOracle):
    """Union or intersection of two primitives. Not an exact SDF, so it has
    no curvature ground truth."""

    a: ShapeOracle
    b: ShapeOracle
    op: str = "union"
    exact = False

    def __post_init__(self):
        if self.op not in ("union", "intersection"):
            raise ConfigError("op must be 'union' or 'intersection'")
        if self.a.input_dim != self.b.input_dim:
            raise ConfigError("operands differ in dimension")

    @property
    def input_dim(self):
        return self.a.input_dim

    def _pick(self, xs):
        da, db = self.a._sdf(xs), self.b._sdf(xs)
        return (da <= db) if self.op == "union" else (da >= db), da, db

    def _sdf(self, xs):
        use_a, da, db = self._pick(xs)
        return np.where(use_a, da, db)

    def _normal(self, xs):
        use_a, _, _ = self._pick(xs)
        n = np.empty_like(xs)
        if use_a.any():
            n[use_a] = self.a._normal(xs[use_a])
        if (~use_a).any():
            n[~use_a] = self.b._normal(xs[~use_a])
        return n

    def _curvature(self, xs):  # pragma: no cover - guarded by mean_curvature
        raise UndefinedPointError("CSG shapes have no curvature ground truth")


def Union(a, b):
    return CSG(a, b, "union")


def Intersection(a, b):
    return CSG(a, b, "intersection")


@dataclass(frozen=True)
class GroundTruthSample:
    position: np.ndarray
    normal: np.ndarray
    mean_curvature: float


@dataclass
class SampleSet:
    """Columnar ground truth: ``positions (N, m)``, ``normals (N, m)``,
    ``curvatures (N,)`` (NaN where undefined)."""

    positions: np.ndarray
    normals: np.ndarray
    curvatures: np.ndarray

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray, list)):
            return SampleSet(self.positions[i], self.normals[i], self.curvatures[i])
        return GroundTruthSample(self.positions[i], self.normals[i], float(self.curvatures[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_samples(cls, samples, dim=None):
        samples = list(samples)
        if not samples:
            d = dim or 3
            return cls(np.zeros((0, d)), np.zeros((0, d)), np.zeros(0))
        return cls(
            np.array([s.position for s in samples], dtype=np.float64),
            np.array([s.normal for s in samples], dtype=np.float64),
            np.array([s.mean_curvature for s in samples], dtype=np.float64),
        )


def project_to_surface(oracle, xs, iterations=5, tol=1e-6):
    """Newton-style projection ``x <- x - sdf(x) * n(x)``; returns points and
    a convergence mask."""
    xs = np.array(xs, dtype=np.float64)
    for _ in range(iterations):
        d = oracle._sdf(xs)
        if np.all(np.abs(d) < tol):
            break
        xs = xs - d[:, None] * oracle._normal(xs)
    ok = np.abs(oracle._sdf(xs)) < tol
    return xs, ok


def sample_surface(oracle, count, seed=0):
    """``count`` ground-truth samples on the zero level set, deterministic in
    ``seed``. Every emitted point satisfies ``|sdf| < 1e-6``."""
    if count < 1:
        raise InputError("count must be >= 1")
    rng = np.random.default_rng(seed)
    got = []
    have = 0
    for _ in range(50):
        seeds = oracle._seed_surface(rng, max(2 * (count - have), 16))
        try:
            pts, ok = project_to_surface(oracle, seeds)
        except UndefinedPointError:
            continue
        pts = pts[ok]
        got.append(pts)
        have += len(pts)
        if have >= count:
            break
    if have < count:
        raise SamplingError(f"surface projection converged for only {have}/{count} samples")
    pos = np.concatenate(got)[:count]
    normals = oracle._normal(pos)
    if oracle.exact:
        try:
            curv = oracle._curvature(pos)
        except UndefinedPointError:
            curv = np.full(count, np.nan)
    else:
        curv = np.full(count, np.nan)
    return SampleSet(pos, normals, curv)


def load_pointset(path):
    """Read ``x y z nx ny nz kappa`` (or the 5-column 2D form) per line.

    ``#`` starts a comment. Normals more than 1% off unit length are logged
    and renormalised.
    """
    rows = []
    width = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (5, 7):
            raise FormatError(f"{path}:{lineno}: expected 5 or 7 fields, got {len(parts)}")
        if width is not None and len(parts) != width:
            raise FormatError(f"{path}:{lineno}: mixed 2D and 3D rows")
        width = len(parts)
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric field") from None
        if not all(np.isfinite(vals)):
            raise FormatError(f"{path}:{lineno}: non-finite value")
        rows.append(vals)
    if not rows:
        return SampleSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    arr = np.array(rows)
    m = (width - 1) // 2
    normals = arr[:, m:2 * m]
    norms = np.linalg.norm(normals, axis=1)
    if np.any(norms == 0):
        raise FormatError(f"{path}: zero-length normal")
    off = np.abs(norms - 1.0) > 0.01
    if off.any():
        log.warning("%s: %d normals off unit length by >1%%; renormalising", path, int(off.sum()))
    return SampleSet(arr[:, :m].copy(), normals / norms[:, None], arr[:, 2 * m].copy())


def save_pointset(samples, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# position normal kappa\n")
        for p, n, k in zip(samples.positions, samples.normals, samples.curvatures):
            fh.write(" ".join(repr(float(v)) for v in (*p, *n, k)) + "\n")


SHAPES = {
    "circle": lambda: Circle2D(0.5),
    "unit_circle": lambda: Circle2D(1.0),
    "sphere": lambda: Sphere(0.5),
    "torus": lambda: Torus(0.6, 0.2),
    "box": lambda: Box((0.5, 0.4, 0.3), 0.1),
}


def shape_by_name(name):
    try:
        return SHAPES[name]()
    except KeyError:
        raise ConfigError(f"unknown shape {name!r}; choose from {sorted(SHAPES)}") from None
