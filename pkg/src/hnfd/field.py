"""Hybrid neural field: feature grid(s) + small ReLU MLP, with checkpoints."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field as dc_field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import network
from .errors import ConfigError, FormatError, InputError

ARCHS = ("DenseGrid", "HashGrid", "TriPlane")

MAGIC = b"HNFD"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass(frozen=True)
class FieldConfig:
    """Architecture of a hybrid field.

    Grid resolutions count vertices per axis, so a level of resolution ``r``
    spans ``r - 1`` cells over ``[-1, 1]``.
    """

    arch: str = "DenseGrid"
    input_dim: int = 3
    output_dim: int = 1
    levels: int = 4
    min_res: int = 16
    max_res: int = 256
    feature_dim: int = 2
    hash_table_size: int = 2**14
    plane_res: int = 512
    plane_feature_dim: int = 32
    mlp_hidden_layers: int = 2
    mlp_hidden_width: int = 64
    activation: str = "ReLU"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.input_dim not in (2, 3):
            raise ConfigError(f"input_dim must be 2 or 3, got {self.input_dim}")
        if self.output_dim < 1:
            raise ConfigError("output_dim must be >= 1")
        if self.activation != "ReLU":
            raise ConfigError(f"only ReLU activation is supported, got {self.activation!r}")
        if self.mlp_hidden_layers < 0 or self.mlp_hidden_width < 1:
            raise ConfigError("MLP needs hidden_layers >= 0 and hidden_width >= 1")
        if self.arch == "TriPlane":
            if self.input_dim != 3:
                raise ConfigError("TriPlane requires input_dim = 3")
            if self.plane_res < 2 or self.plane_feature_dim < 1:
                raise ConfigError("TriPlane needs plane_res >= 2 and plane_feature_dim >= 1")
        else:
            if self.levels < 1:
                raise ConfigError("levels must be >= 1")
            if self.min_res < 2:
                raise ConfigError("min_res must be >= 2 (vertices per axis)")
            if self.min_res > self.max_res:
                raise ConfigError(f"min_res {self.min_res} > max_res {self.max_res}")
            if self.feature_dim < 1:
                raise ConfigError("feature_dim must be >= 1")
            if self.arch == "HashGrid" and self.hash_table_size < 1:
                raise ConfigError("hash_table_size must be >= 1")

    def level_resolutions(self):
        if self.levels == 1:
            return [self.min_res]
        growth = (self.max_res / self.min_res) ** (1.0 / (self.levels - 1))
        return [int(np.floor(self.min_res * growth**lvl + 0.5)) for lvl in range(self.levels)]

    @property
    def param_count(self):
        return network.layout_for(self).size

    def to_text(self):
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text):
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or key not in kinds:
                raise ConfigError(f"config line {lineno}: unrecognised entry {raw!r}")
            try:
                values[key] = int(val) if kinds[key] in ("int", int) else val
            except ValueError:
                raise ConfigError(f"config line {lineno}: {key} expects an integer") from None
        return cls(**values)


@dataclass(frozen=True, eq=False)
class HybridField:
    """Immutable trained (or freshly initialised) field.

    ``params`` is the flat float32 parameter vector in checkpoint order.
    Computation happens in float64 on a cached up-cast copy.
    """

    config: FieldConfig
    params: np.ndarray = dc_field(repr=False)
    clamps_input = True

    def __post_init__(self):
        p = np.ascontiguousarray(self.params, dtype=np.float32)
        if p.ndim != 1 or p.size != self.config.param_count:
            raise ConfigError(
                f"parameter vector has {p.size} entries, config requires {self.config.param_count}"
            )
        if not np.all(np.isfinite(p)):
            raise InputError("field parameters must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @property
    def input_dim(self):
        return self.config.input_dim

    @property
    def param_count(self):
        return self.params.size

    @cached_property
    def layout(self):
        return network.layout_for(self.config)

    @cached_property
    def theta(self):
        t = self.params.astype(np.float64)
        t.setflags(write=False)
        return t

    @property
    def grid_params(self):
        """Per-segment feature tables, coarse to fine (read-only views)."""
        return [network.segment_table(self.layout, self.params, s) for s in self.layout.segments]

    @property
    def mlp_params(self):
        """``[(W, b), ...]`` input to output; ``W`` is ``(fan_in, fan_out)``."""
        return [network.layer_params(self.params, layer) for layer in self.layout.layers]

    def with_params(self, theta):
        """New field with the same config; parameters rounded to float32."""
        return HybridField(self.config, np.asarray(theta, dtype=np.float32))

    def eval(self, x):
        """Field value at a single point (float when ``output_dim == 1``)."""
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        out = self.eval_batch(x)
        return float(out[0]) if out.ndim == 1 else out[0]

    def eval_batch(self, xs):
        """Values at ``(N, m)`` points: ``(N,)`` for scalar fields, else ``(N, n)``."""
        xs = _check_points(xs, self.input_dim)
        out = network.evaluate(self.layout, self.theta, xs)
        return out[:, 0] if self.config.output_dim == 1 else out

    __call__ = eval_batch


def _check_points(xs, m):
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs.reshape(1, -1)
    if xs.ndim != 2 or xs.shape[1] != m:
        raise InputError(f"expected points of shape (N, {m}), got {xs.shape}")
    if not np.all(np.isfinite(xs)):
        raise InputError("query points must be finite")
    return xs


def build_field(config, seed=0):
    """Initialise a field deterministically from ``seed``.

    Grid features are uniform in ``[-1e-4, 1e-4]``; MLP weights are uniform
    with bound ``sqrt(6 / fan_in)`` and biases start at zero.
    """
    if not isinstance(config, FieldConfig):
        raise ConfigError("build_field expects a FieldConfig")
    layout = network.layout_for(config)
    rng = np.random.default_rng(seed)
    theta = np.zeros(layout.size)
    grid_end = layout.grid_size
    theta[:grid_end] = rng.uniform(-1e-4, 1e-4, size=grid_end)
    for layer in layout.layers:
        bound = np.sqrt(6.0 / layer.fan_in)
        theta[layer.w_offset:layer.b_offset] = rng.uniform(
            -bound, bound, size=layer.fan_in * layer.fan_out
        )
    return HybridField(config, theta.astype(np.float32))


def eval(field, x):  # noqa: A001 - mirrors the operation name
    return field.eval(x)


def eval_batch(field, xs):
    return field.eval_batch(xs)


def save_checkpoint(field, path):
    text = field.config.to_text().encode("utf-8")
    blob = field.params.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(text)))
        fh.write(text)
        fh.write(blob)
    return Path(path)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file too short for header")
    magic, version, text_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    start = _HEADER.size
    if start + text_len > len(data):
        raise FormatError(f"{path}: truncated config text")
    try:
        config = FieldConfig.from_text(data[start:start + text_len].decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"{path}: bad config: {exc}") from exc
    blob = data[start + text_len:]
    expected = config.param_count * 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: parameter blob has {len(blob)} bytes, config requires {expected}"
        )
    params = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    return HybridField(config, params)
