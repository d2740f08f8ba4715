"""Input-space and parameter-space derivatives of hybrid fields.

Every call records its own tape and discards it; nothing is cached between
queries, so concurrent callers on one field never share scratch state.
ReLU has derivative 0 at 0, and on a cell face the upper cell's
interpolation weights are used (the last cell on the domain boundary).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import network
from .errors import InputError, NumericError
from .field import _check_points


def _theta(field, theta):
    if theta is None:
        return field.theta
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (field.param_count,):
        raise InputError(f"theta must have shape ({field.param_count},)")
    return theta


def _require_scalar(field):
    if field.config.output_dim != 1:
        raise InputError("input gradients are defined for scalar fields (output_dim = 1)")


def ad_input_gradient(field, x, theta=None):
    """Exact spatial gradient ``dF/dx`` at a single point (almost everywhere)."""
    return ad_input_gradient_batch(field, np.reshape(x, (1, -1)), theta)[0]


def ad_input_gradient_batch(field, xs, theta=None):
    _require_scalar(field)
    xs = _check_points(xs, field.input_dim)
    _, grads = network.evaluate_with_grad(field.layout, _theta(field, theta), xs)
    return grads


def value_and_input_gradient(field, xs, theta=None):
    """``(values (N,), gradients (N, m))`` from one pass."""
    _require_scalar(field)
    xs = _check_points(xs, field.input_dim)
    return network.evaluate_with_grad(field.layout, _theta(field, theta), xs)


@dataclass
class LossEvaluator:
    """Scalar loss of field outputs at a fixed batch of points.

    ``fn(values)`` returns ``(loss, dloss_dvalues)`` with ``values`` of shape
    ``(N,)``.
    """

    points: np.ndarray
    fn: Callable

    def __call__(self, values):
        return self.fn(values)

    @classmethod
    def mse(cls, points, targets):
        targets = np.asarray(targets, dtype=np.float64)
        n = len(targets)

        def fn(values):
            r = values - targets
            return float(np.mean(r * r)), 2.0 * r / n

        return cls(np.asarray(points, dtype=np.float64), fn)

    @classmethod
    def constant(cls, points, value=1.0):
        return cls(np.asarray(points, dtype=np.float64),
                   lambda values: (float(value), np.zeros_like(values)))

    def scaled(self, alpha):
        def fn(values):
            loss, d = self.fn(values)
            return alpha * loss, alpha * d

        return LossEvaluator(self.points, fn)

    def __add__(self, other):
        if other.points is not self.points and not np.array_equal(other.points, self.points):
            raise InputError("can only add losses over the same points")

        def fn(values):
            la, da = self.fn(values)
            lb, db = other.fn(values)
            return la + lb, da + db

        return LossEvaluator(self.points, fn)


def param_gradient(field, loss_evaluator, theta=None):
    """Gradient of ``loss_evaluator`` w.r.t. all field parameters.

    Returns ``(loss, grad)`` with ``grad`` aligned to the checkpoint layout.
    """
    theta = _theta(field, theta)
    xs = _check_points(loss_evaluator.points, field.input_dim)
    tape = network.forward(field.layout, theta, xs)
    values = tape.values[:, 0] if field.config.output_dim == 1 else tape.values
    loss, dvalues = loss_evaluator(values)
    if not np.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss}")
    grad = network.backward(tape, dvalues)
    if not np.all(np.isfinite(grad)):
        raise NumericError("parameter gradient is not finite")
    return loss, grad


def param_gradient_of_input_gradient(field, q, target_vector, theta=None):
    """Gradient w.r.t. parameters of ``||dF/dx(q) - target||^2``.

    ``q`` may be one point ``(m,)`` or a batch ``(N, m)`` with targets
    ``(N, m)``; a batch sums the per-point terms. Returns ``(loss, grad)``.
    """
    _require_scalar(field)
    target = np.asarray(target_vector, dtype=np.float64)
    if not np.all(np.isfinite(target)):
        raise InputError("target gradient must be finite")
    xs = _check_points(q, field.input_dim)
    target = target.reshape(xs.shape)
    tape = network.forward(field.layout, _theta(field, theta), xs, tangents=True)
    resid = tape.input_grads - target
    loss = float(np.sum(resid * resid))
    grad = network.backward(tape, np.zeros(xs.shape[0]), 2.0 * resid)
    return loss, grad
