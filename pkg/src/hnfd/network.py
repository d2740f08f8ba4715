"""Parameter layout and the forward/backward passes of a hybrid field.

A field maps ``x -> MLP(encode(x))``. The encoder is multilinear
interpolation into one or more feature grids; the MLP is ReLU with a linear
output layer. Parameters live in one flat vector ``theta`` whose order is
the checkpoint order: grid segments coarse to fine (row-major), then MLP
layers input to output, each weight matrix ``(fan_in, fan_out)`` row-major
followed by its bias.

Spatial derivatives are propagated forward-mode alongside the primal pass:
the MLP acts on a stack of shape ``(1 + m, B, D)`` whose slot 0 is the
primal activation and slots ``1..m`` are tangents along each input axis.
ReLU masks come from the primal slot and biases only touch it. Reverse mode
over that stack yields parameter gradients of any loss in the values and
input gradients, which is what the fine-tuning objective needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels

TRIPLANE_AXES = ((0, 1), (1, 2), (0, 2))


@dataclass(frozen=True)
class GridSegment:
    offset: int
    rows: int
    width: int
    res: int
    hashed: bool
    axes: tuple
    col: int

    @property
    def size(self):
        return self.rows * self.width


@dataclass(frozen=True)
class DenseLayer:
    w_offset: int
    b_offset: int
    fan_in: int
    fan_out: int


@dataclass(frozen=True)
class Layout:
    segments: tuple
    layers: tuple
    size: int
    feature_width: int
    input_dim: int
    output_dim: int

    @property
    def grid_size(self):
        return sum(s.size for s in self.segments)


@lru_cache(maxsize=64)
def layout_for(config) -> Layout:
    """Compute (and cache) the flat parameter layout of a validated config."""
    m = config.input_dim
    segments = []
    offset = 0
    if config.arch == "TriPlane":
        F = config.plane_feature_dim
        for axes in TRIPLANE_AXES:
            rows = config.plane_res**2
            segments.append(GridSegment(offset, rows, F, config.plane_res, False, axes, 0))
            offset += rows * F
        width = F
    else:
        F = config.feature_dim
        col = 0
        for res in config.level_resolutions():
            dense_rows = res**m
            hashed = config.arch == "HashGrid" and dense_rows > config.hash_table_size
            rows = config.hash_table_size if hashed else dense_rows
            segments.append(GridSegment(offset, rows, F, res, hashed, tuple(range(m)), col))
            offset += rows * F
            col += F
        width = col
    layers = []
    dims = [width] + [config.mlp_hidden_width] * config.mlp_hidden_layers + [config.output_dim]
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        layers.append(DenseLayer(offset, offset + fan_in * fan_out, fan_in, fan_out))
        offset += fan_in * fan_out + fan_out
    return Layout(tuple(segments), tuple(layers), offset, width, m, config.output_dim)


def segment_table(layout, theta, seg):
    return theta[seg.offset:seg.offset + seg.size].reshape(seg.rows, seg.width)


def layer_params(theta, layer):
    W = theta[layer.w_offset:layer.b_offset].reshape(layer.fan_in, layer.fan_out)
    b = theta[layer.b_offset:layer.b_offset + layer.fan_out]
    return W, b


@dataclass
class Tape:
    """Record of one forward pass, consumed by :func:`backward`."""

    layout: Layout
    theta: np.ndarray
    x: np.ndarray
    outside: np.ndarray
    tangents: bool
    enc: list
    acts: list
    masks: list
    out: np.ndarray

    @property
    def values(self):
        """Field values, ``(B, n)``."""
        return self.out[0]

    @property
    def input_grads(self):
        """Spatial gradients ``(B, m)`` of output channel 0."""
        return self.out[1:, :, 0].T


def forward(layout, theta, x, tangents=False):
    """Evaluate the field on ``x`` of shape ``(B, m)`` and keep a tape.

    Inputs outside ``[-1, 1]^m`` are clamped; the clamp's zero derivative is
    reflected in the tangents.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = np.ascontiguousarray(np.clip(x, -1.0, 1.0))
    outside = np.abs(x) > 1.0
    B, m = xc.shape
    S = 1 + m if tangents else 1
    z = np.zeros((S, B, layout.feature_width))
    enc = []
    for seg in layout.segments:
        table = segment_table(layout, theta, seg)
        sub = xc if len(seg.axes) == m else np.ascontiguousarray(xc[:, list(seg.axes)])
        feats, dfeats, idx, w, dw = kernels.level_forward(sub, table, seg.res, seg.hashed, tangents)
        cols = slice(seg.col, seg.col + seg.width)
        z[0, :, cols] += feats
        if tangents:
            for k, axis in enumerate(seg.axes):
                clipped = outside[:, axis]
                if clipped.any():
                    dfeats[k][clipped] = 0.0
                    dw[clipped, k, :] = 0.0
                z[1 + axis, :, cols] += dfeats[k]
        enc.append((idx, w, dw))
    acts = []
    masks = []
    a = z
    n_layers = len(layout.layers)
    for li, layer in enumerate(layout.layers):
        W, b = layer_params(theta, layer)
        acts.append(a)
        h = a @ W
        h[0] += b
        if li < n_layers - 1:
            mask = h[0] > 0.0
            masks.append(mask)
            a = h * mask
        else:
            a = h
    return Tape(layout, theta, xc, outside, tangents, enc, acts, masks, a)


def backward(tape, adj_values, adj_grads=None):
    """Reverse pass: parameter gradient of ``sum(adj_values * values) +
    sum(adj_grads * input_grads)``.

    ``adj_values`` has shape ``(B,)`` or ``(B, n)``; ``adj_grads`` ``(B, m)``
    (output channel 0 only) and requires a tape recorded with tangents.
    """
    layout = tape.layout
    theta = tape.theta
    grad = np.zeros(layout.size)
    S, B, n = tape.out.shape
    adj = np.zeros((S, B, n))
    av = np.asarray(adj_values, dtype=np.float64)
    adj[0] = av.reshape(B, -1) if av.ndim == 2 else av[:, None] * (np.arange(n) == 0)
    if adj_grads is not None:
        if not tape.tangents:
            raise ValueError("tape was recorded without tangents")
        adj[1:, :, 0] = np.asarray(adj_grads, dtype=np.float64).T
    n_layers = len(layout.layers)
    for li in range(n_layers - 1, -1, -1):
        layer = layout.layers[li]
        W, _ = layer_params(theta, layer)
        a = tape.acts[li]
        if li < n_layers - 1:
            adj = adj * tape.masks[li]
        gW = np.tensordot(a, adj, axes=([0, 1], [0, 1]))
        grad[layer.w_offset:layer.b_offset] = gW.ravel()
        grad[layer.b_offset:layer.b_offset + layer.fan_out] = adj[0].sum(axis=0)
        adj = adj @ W.T
    for seg, (idx, w, dw) in zip(layout.segments, tape.enc):
        cols = slice(seg.col, seg.col + seg.width)
        gfeat = np.ascontiguousarray(adj[0, :, cols])
        gdfeat = None
        if tape.tangents:
            gdfeat = np.ascontiguousarray(np.stack([adj[1 + axis, :, cols] for axis in seg.axes]))
        gtable = grad[seg.offset:seg.offset + seg.size].reshape(seg.rows, seg.width)
        kernels.level_backward(idx, w, dw if tape.tangents else None, gfeat, gdfeat, gtable)
    return grad


def evaluate(layout, theta, x, chunk=1 << 16):
    """Values only, ``(B, n)``, chunked to bound memory."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] <= chunk:
        return forward(layout, theta, x).values
    return np.concatenate(
        [forward(layout, theta, x[i:i + chunk]).values for i in range(0, x.shape[0], chunk)]
    )


def evaluate_with_grad(layout, theta, x, chunk=1 << 15):
    """Values ``(B,)`` and input gradients ``(B, m)`` of output channel 0."""
    x = np.asarray(x, dtype=np.float64)
    vals, grads = [], []
    for i in range(0, max(x.shape[0], 1), chunk):
        tape = forward(layout, theta, x[i:i + chunk], tangents=True)
        vals.append(tape.values[:, 0])
        grads.append(tape.input_grads)
    return np.concatenate(vals), np.concatenate(grads)
