"""Metrics for normals, curvature and level sets; 1D spectra; timing."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError, MetricError
from .operators import angular_error_deg

FSCORE_THRESHOLD = 0.01
RRE_FLOOR = 1.0
METRICS_HEADER = ["shape", "method", "sigma_or_h", "l2", "ang", "aa1", "aa2", "rre", "cd", "fscore"]


@dataclass
class MetricsReport:
    l2: float
    ang_deg: float
    aa1: float
    aa2: float
    rre: float | None = None
    cd: float | None = None
    fscore: float | None = None
    method: str = ""
    hyperparams: dict = dc_field(default_factory=dict)

    @property
    def sigma_or_h(self):
        for key in ("sigma", "h"):
            if key in self.hyperparams:
                return float(self.hyperparams[key])
        return float("nan")

    def row(self, shape):
        opt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        return [shape, self.method, repr(self.sigma_or_h), repr(self.l2), repr(self.ang_deg),
                repr(self.aa1), repr(self.aa2), opt(self.rre), opt(self.cd), opt(self.fscore)]


def normal_metrics(estimates, gts, method="", hyperparams=None):
    """Compare estimated normals (renormalised here) with unit ground truth.

    A zero or non-finite estimate scores 180 degrees and an L2 error of 2.
    """
    est = np.asarray(estimates, dtype=np.float64)
    gt = np.asarray(gts, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or len(est) == 0:
        raise MetricError("estimates and ground truths must be equal-length, nonempty (N, m)")
    norm = np.linalg.norm(est, axis=1)
    good = (norm > 0) & np.isfinite(norm)
    unit = np.where(good[:, None], est / np.where(good, norm, 1.0)[:, None], 0.0)
    l2 = np.where(good, np.linalg.norm(unit - gt, axis=1), 2.0)
    ang = angular_error_deg(est, gt)
    return MetricsReport(
        l2=float(np.mean(l2)),
        ang_deg=float(np.mean(ang)),
        aa1=100.0 * float(np.mean(ang < 1.0)),
        aa2=100.0 * float(np.mean(ang < 2.0)),
        method=method,
        hyperparams=dict(hyperparams or {}),
    )


def curvature_rre(estimates, gts):
    """Mean of ``|k_hat - k| / max(|k|, 1)``."""
    est = np.asarray(estimates, dtype=np.float64)
    gt = np.asarray(gts, dtype=np.float64)
    if est.shape != gt.shape:
        raise MetricError("curvature lists differ in length")
    return float(np.mean(np.abs(est - gt) / np.maximum(np.abs(gt), RRE_FLOOR)))


def chamfer_fscore(set_a, set_b, threshold=FSCORE_THRESHOLD):
    """Symmetric Chamfer distance (mean of the two mean squared
    nearest-neighbour distances) and F-score in percent."""
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise MetricError("Chamfer distance needs two nonempty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    cd = 0.5 * (float(np.mean(d_ab**2)) + float(np.mean(d_ba**2)))
    precision = float(np.mean(d_ab < threshold))
    recall = float(np.mean(d_ba < threshold))
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return cd, 100.0 * f


def slice_points(start, end, n_samples):
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    if start.shape != end.shape or start.ndim != 1:
        raise InputError("start and end must be points of equal dimension")
    if np.allclose(start, end, rtol=0, atol=0):
        raise InputError("degenerate slice: start equals end")
    if n_samples < 8 or n_samples & (n_samples - 1):
        raise InputError("n_samples must be a power of two >= 8")
    t = np.arange(n_samples) / n_samples
    return start + t[:, None] * (end - start)


def spectrum_slice(field, start, end, n_samples=256):
    """Magnitude spectrum (``n/2 + 1`` bins) of the field sampled at
    ``start + (i/n)(end - start)``, ``i = 0..n-1``."""
    pts = slice_points(start, end, n_samples)
    values = np.asarray(field.eval_batch(pts), dtype=np.float64)
    return np.abs(np.fft.rfft(values))


def spectrum_energy(amplitudes, n_samples):
    """``(1/n) sum |X_k|^2`` over the full spectrum, reconstructed from the
    one-sided bins by conjugate symmetry."""
    a = np.asarray(amplitudes, dtype=np.float64)
    w = np.full(a.shape, 2.0)
    w[0] = 1.0
    if n_samples % 2 == 0:
        w[-1] = 1.0
    return float(np.sum(w * a * a) / n_samples)


def high_frequency_mass(amplitudes, fraction=0.25):
    """Summed magnitude over the top ``fraction`` of frequency bins."""
    a = np.asarray(amplitudes, dtype=np.float64)
    start = int(math.ceil((1.0 - fraction) * (len(a) - 1)))
    return float(np.sum(a[start:]))


def level_set_deviation(field, reference, res=64):
    """Mean ``|F - M|`` on a ``res^m`` grid of cell centres."""
    m = field.input_dim
    axis = -1.0 + (np.arange(res) + 0.5) * (2.0 / res)
    grid = np.stack(np.meshgrid(*[axis] * m, indexing="ij"), axis=-1).reshape(-1, m)
    return float(np.mean(np.abs(np.asarray(field.eval_batch(grid))
                                - np.asarray(reference.eval_batch(grid)))))


def bench_operator(field, op, q_count=1000, repeats=7, seed=0):
    """Wall time of single-point gradient queries, microseconds per query."""
    if repeats < 2:
        raise InputError("repeats must be >= 2")
    qs = np.random.default_rng(seed).uniform(-0.9, 0.9, size=(q_count, field.input_dim))
    runs = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for q in qs:
            op.gradient_batch(field, q[None, :])
        runs.append((time.perf_counter() - t0) / q_count * 1e6)
    return {"mean_us": float(np.mean(runs)), "std_us": float(np.std(runs, ddof=1))}


def write_metrics_csv(rows, path):
    """``rows`` is an iterable of ``(shape, MetricsReport)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for shape, report in rows:
            w.writerow(report.row(shape))
    return path


def read_metrics_csv(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise InputError(f"{path}: unexpected header {reader.fieldnames}")
        for r in reader:
            opt = lambda v: None if v == "" else float(v)  # noqa: E731
            hp = {} if math.isnan(float(r["sigma_or_h"])) else {"sigma": float(r["sigma_or_h"])}
            out.append((r["shape"], MetricsReport(
                float(r["l2"]), float(r["ang"]), float(r["aa1"]), float(r["aa2"]),
                opt(r["rre"]), opt(r["cd"]), opt(r["fscore"]), r["method"], hp)))
    return out
