"""Sphere tracing and normal/shaded images of 3D fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, FormatError

BACKGROUND = 0.2
SAFETY = 0.9


@dataclass(frozen=True)
class Camera:
    position: tuple = (0.0, 0.0, -3.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    fov_deg: float = 40.0
    resolution: tuple = (256, 256)

    def __post_init__(self):
        if not 0.0 < self.fov_deg < 180.0:
            raise ConfigError("fov must lie in (0, 180) degrees")
        w, h = self.resolution
        if w < 1 or h < 1:
            raise ConfigError("resolution must be positive")
        f = self.forward
        if np.linalg.norm(np.cross(f, np.asarray(self.up, dtype=np.float64))) < 1e-9:
            raise ConfigError("camera up vector is parallel to the view direction")

    @property
    def forward(self):
        f = np.asarray(self.look_at, dtype=np.float64) - np.asarray(self.position, dtype=np.float64)
        n = np.linalg.norm(f)
        if n == 0:
            raise ConfigError("camera position equals look_at")
        return f / n

    def rays(self):
        """Origins and unit directions ``(H*W, 3)``, row-major from the top-left pixel."""
        w, h = self.resolution
        f = self.forward
        right = np.cross(f, np.asarray(self.up, dtype=np.float64))
        right /= np.linalg.norm(right)
        up = np.cross(right, f)
        half = np.tan(np.radians(self.fov_deg) / 2)
        xs = (2 * (np.arange(w) + 0.5) / w - 1) * half * (w / h)
        ys = (1 - 2 * (np.arange(h) + 0.5) / h) * half
        px, py = np.meshgrid(xs, ys)
        d = f + px.reshape(-1, 1) * right + py.reshape(-1, 1) * up
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(np.asarray(self.position, dtype=np.float64), d.shape).copy()
        return o, d


def _box_interval(origins, dirs):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (-1.0 - origins) * inv
        t2 = (1.0 - origins) * inv
    lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # axis-parallel rays outside the slab never enter it
    para = dirs == 0
    outside = para & (np.abs(origins) > 1.0)
    lo = np.where(para, -np.inf, lo)
    hi = np.where(para, np.inf, hi)
    t0 = np.maximum(lo.max(axis=1), 0.0)
    t1 = hi.min(axis=1)
    return t0, t1, (t0 <= t1) & ~outside.any(axis=1)


def sphere_trace_batch(field, origins, dirs, eps=1e-4, max_steps=256):
    """March every ray through ``[-1, 1]^3`` by ``0.9 F(x)``.

    Returns ``(points (N, 3), hit (N,))``; a ray hits when ``|F| < eps``.
    """
    if not eps > 0:
        raise ConfigError("eps must be positive")
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t, t_far, alive = _box_interval(origins, dirs)
    hit = np.zeros(len(origins), dtype=bool)
    pts = origins + t[:, None] * dirs
    for _ in range(max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        x = origins[idx] + t[idx, None] * dirs[idx]
        v = np.asarray(field.eval_batch(x), dtype=np.float64)
        done = np.abs(v) < eps
        hit[idx[done]] = True
        pts[idx[done]] = x[done]
        alive[idx[done]] = False
        step = idx[~done]
        t[step] += SAFETY * v[~done]
        alive[step] = (t[step] <= t_far[step] + eps) & (t[step] >= 0)
    return pts, hit


def sphere_trace(field, origin, direction, eps=1e-4, max_steps=256):
    """First zero crossing along the ray, or ``None``."""
    pts, hit = sphere_trace_batch(field, np.reshape(origin, (1, 3)),
                                  np.reshape(direction, (1, 3)), eps, max_steps)
    return pts[0] if hit[0] else None


@dataclass
class TraceResult:
    points: np.ndarray
    hit: np.ndarray
    dirs: np.ndarray
    shape: tuple


def trace_camera(field, camera, eps=1e-4, max_steps=256):
    o, d = camera.rays()
    pts, hit = sphere_trace_batch(field, o, d, eps, max_steps)
    w, h = camera.resolution
    return TraceResult(pts, hit, d, (h, w))


def _unit(v):
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return np.where(n > 0, v / np.where(n > 0, n, 1.0), 0.0)


def hit_normals(field, trace, op):
    """Unit normals from ``op`` at the hit points, zeros elsewhere."""
    normals = np.zeros_like(trace.points)
    if trace.hit.any():
        normals[trace.hit] = _unit(op.gradient_batch(field, trace.points[trace.hit]))
    return normals


def render_normals(field, camera, op, eps=1e-4, max_steps=256, trace=None):
    """``(H, W, 3)`` image of ``(n + 1) / 2``; misses are 0.2 grey."""
    trace = trace or trace_camera(field, camera, eps, max_steps)
    img = np.full(trace.points.shape, BACKGROUND)
    n = hit_normals(field, trace, op)
    img[trace.hit] = (n[trace.hit] + 1.0) / 2.0
    return img.reshape(trace.shape + (3,))


def environment(r):
    """Procedural lat-long map: sky-to-ground gradient times an 8x4 checker."""
    r = _unit(np.atleast_2d(r))
    theta = np.arccos(np.clip(r[:, 1], -1.0, 1.0))
    phi = np.arctan2(r[:, 2], r[:, 0])
    u = np.minimum(np.floor(8 * (phi + np.pi) / (2 * np.pi)), 7)
    v = np.minimum(np.floor(4 * theta / np.pi), 3)
    check = np.where((u + v) % 2 == 0, 1.0, 0.6)
    grad = 0.5 + 0.5 * r[:, 1]
    sky = np.array([0.55, 0.7, 1.0])
    ground = np.array([0.35, 0.25, 0.2])
    rgb = grad[:, None] * sky + (1 - grad[:, None]) * ground
    return np.clip(rgb * check[:, None], 0.0, 1.0)


def shade(field, camera, op, mode="lambertian", light_dir=None, eps=1e-4, max_steps=256,
          trace=None):
    """Lambertian ``max(0, n.l)`` (light from behind the camera by default)
    or a perfect mirror reflecting :func:`environment`."""
    trace = trace or trace_camera(field, camera, eps, max_steps)
    n = hit_normals(field, trace, op)
    img = np.full(trace.points.shape, BACKGROUND)
    h = trace.hit
    if mode == "lambertian":
        l = -camera.forward if light_dir is None else np.asarray(light_dir, dtype=np.float64)
        if abs(np.linalg.norm(l) - 1.0) > 1e-9:
            raise ConfigError("light_dir must be a unit vector")
        img[h] = np.maximum(0.0, n[h] @ l)[:, None]
    elif mode == "specular_env":
        d = trace.dirs[h]
        r = d - 2.0 * np.sum(d * n[h], axis=1, keepdims=True) * n[h]
        img[h] = environment(r)
    else:
        raise ConfigError(f"unknown shading mode {mode!r}")
    return img.reshape(trace.shape + (3,))


def normal_angle_map(field, oracle, camera, op, trace=None):
    """Per-pixel angle (degrees) between ``op`` normals and the oracle's
    normals at the hit points; NaN on misses."""
    from ..operators import angular_error_deg

    trace = trace or trace_camera(field, camera)
    out = np.full(len(trace.hit), np.nan)
    if trace.hit.any():
        p = trace.points[trace.hit]
        out[trace.hit] = angular_error_deg(op.gradient_batch(field, p), oracle.normal(p))
    return out.reshape(trace.shape)


def laplacian_energy(img, mask=None):
    """Mean absolute 5-point Laplacian response over interior pixels whose
    whole stencil lies in ``mask``."""
    g = np.asarray(img, dtype=np.float64)
    if g.ndim == 3:
        g = g.mean(axis=2)
    lap = 4 * g[1:-1, 1:-1] - g[:-2, 1:-1] - g[2:, 1:-1] - g[1:-1, :-2] - g[1:-1, 2:]
    if mask is None:
        return float(np.mean(np.abs(lap)))
    m = np.asarray(mask, dtype=bool)
    ok = (m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:])
    return float(np.mean(np.abs(lap[ok]))) if ok.any() else 0.0


def to_bytes(img):
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def write_ppm(img, path):
    """Binary P6, 8 bits per channel, no gamma."""
    data = to_bytes(img)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ConfigError("image must be (H, W, 3)")
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
    return path


def read_ppm(path):
    """Inverse of :func:`write_ppm`; returns a ``uint8`` array ``(H, W, 3)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError(f"{path}: only 8-bit P6 images are supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: pixel data has {len(body)} bytes, expected {w * h * 3}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
