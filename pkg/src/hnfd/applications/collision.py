"""Head-on elastic collisions resolved with estimated surface normals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import sample_surface
from ..operators import angular_error_deg


@dataclass
class CollisionTrial:
    contact_point: np.ndarray
    velocity: np.ndarray
    estimated_normal: np.ndarray
    true_normal: np.ndarray
    error_deg: float


def reflect(v, n):
    """``v - 2 (v.n) n`` row-wise; ``n`` must be unit (or zero)."""
    return v - 2.0 * np.sum(v * n, axis=-1, keepdims=True) * n


def collision_trials(field, oracle, n_trials, op, seed=0):
    """Run ``n_trials`` head-on impacts; returns a :class:`CollisionTrial` list.

    Contacts are uniform on the oracle surface. The incoming velocity is
    ``-speed * n`` with speed uniform in ``[0.5, 2]``; the rebound computed
    with the estimated normal is compared to the true rebound ``+n``.
    """
    samples = sample_surface(oracle, n_trials, seed=seed)
    rng = np.random.default_rng([seed, 1])
    speed = rng.uniform(0.5, 2.0, size=n_trials)
    n_true = samples.normals
    v = -speed[:, None] * n_true
    est = np.asarray(op.gradient_batch(field, samples.positions), dtype=np.float64)
    norm = np.linalg.norm(est, axis=1, keepdims=True)
    n_hat = np.where(norm > 0, est / np.where(norm > 0, norm, 1.0), 0.0)
    v_out = reflect(v, n_hat)
    err = angular_error_deg(v_out, n_true)
    err[norm[:, 0] == 0] = 180.0
    return [CollisionTrial(samples.positions[i], v[i], n_hat[i], n_true[i], float(err[i]))
            for i in range(n_trials)]


def run_collision_trials(field, oracle, n_trials, op, seed=0):
    """Mean rebound-direction error in degrees."""
    trials = collision_trials(field, oracle, n_trials, op, seed)
    return float(np.mean([t.error_deg for t in trials]))
