"""Parameter containers, multilayer perceptrons and reverse-mode gradients.

Differentiation is delegated to JAX running in 64-bit mode. Parameters live in
a single flat array (:class:`ParamVector`) whose named segments hold each
network or parameter group; the container is a JAX pytree, so ``jax.grad``
of a function of a ``ParamVector`` returns a ``ParamVector`` with the same
layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConfigurationError, ContractViolation

jax.config.update("jax_enable_x64", True)

ACTIVATIONS = ("tanh", "swish", "silu", "sigmoid")

CHECKPOINT_FORMAT = "neuralsde.params/1"


def sigmoid(x):
    return jax.nn.sigmoid(x)


def swish(x):
    return x * jax.nn.sigmoid(x)


def softplus(x):
    return jax.nn.softplus(x)


def activation_fn(name: str) -> Callable:
    if name == "tanh":
        return jnp.tanh
    if name in ("swish", "silu"):
        return swish
    if name == "sigmoid":
        return sigmoid
    raise ConfigurationError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network ``input_dim -> hidden... -> output_dim``.

    The output layer is linear; callers apply their own output head.
    """

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.input_dim, *self.hidden, self.output_dim)
        if any(int(w) < 1 for w in widths):
            raise ConfigurationError(f"all layer widths must be >= 1, got {widths}")
        activation_fn(self.activation)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))


def mlp_forward(spec: MlpSpec, params, x):
    """Evaluate the network on one input vector.

    ``params`` is the flat segment for this network: per layer, the weight
    matrix ``(fan_in, fan_out)`` in row-major order followed by the bias.
    """
    x = jnp.asarray(x)
    if x.shape != (spec.input_dim,):
        raise ConfigurationError(f"mlp input has shape {x.shape}, expected ({spec.input_dim},)")
    if params.shape != (spec.n_params,):
        raise ConfigurationError(f"mlp params have shape {params.shape}, expected ({spec.n_params},)")
    act = activation_fn(spec.activation)
    widths = spec.widths
    offset = 0
    h = x
    n_layers = len(widths) - 1
    for layer in range(n_layers):
        fan_in, fan_out = widths[layer], widths[layer + 1]
        w = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        h = h @ w + b
        if layer < n_layers - 1:
            h = act(h)
    return h


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    widths = spec.widths
    chunks = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


@jax.tree_util.register_pytree_node_class
class ParamVector:
    """Flat float64 array partitioned into named, disjoint segments.

    ``layout`` is a tuple of ``(name, offset, shape)`` entries that tile the
    array exactly, in order.
    """

    def __init__(self, values, layout):
        self.values = values
        self.layout = tuple((str(n), int(o), tuple(int(s) for s in shp)) for n, o, shp in layout)

    @classmethod
    def from_segments(cls, segments: Mapping[str, object]) -> "ParamVector":
        layout = []
        chunks = []
        offset = 0
        for name, arr in segments.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout.append((name, offset, arr.shape))
            chunks.append(arr.reshape(-1))
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(jnp.asarray(values), layout)

    def tree_flatten(self):
        return (self.values,), self.layout

    @classmethod
    def tree_unflatten(cls, layout, children):
        obj = object.__new__(cls)
        obj.values = children[0]
        obj.layout = layout
        return obj

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _, _ in self.layout)

    @property
    def size(self) -> int:
        return sum(int(np.prod(s, dtype=int)) for _, _, s in self.layout)

    def _entry(self, name):
        for n, off, shp in self.layout:
            if n == name:
                return off, shp
        raise KeyError(name)

    def __getitem__(self, name: str):
        off, shp = self._entry(name)
        size = int(np.prod(shp, dtype=int))
        return self.values[off : off + size].reshape(shp)

    def __contains__(self, name) -> bool:
        return name in self.names

    def replace(self, **segments) -> "ParamVector":
        """Return a copy with the named segments overwritten."""
        values = self.values
        for name, arr in segments.items():
            off, shp = self._entry(name)
            arr = jnp.asarray(arr, dtype=jnp.float64).reshape(-1)
            size = int(np.prod(shp, dtype=int))
            if arr.shape != (size,):
                raise ConfigurationError(f"segment {name!r} expects {size} values, got {arr.shape}")
            values = values.at[off : off + size].set(arr)
        return ParamVector(values, self.layout)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def to_dict(self) -> dict:
        flat = np.asarray(self.values, dtype=np.float64)
        segments = {}
        for name, off, shp in self.layout:
            size = int(np.prod(shp, dtype=int))
            segments[name] = {"shape": list(shp), "values": flat[off : off + size].tolist()}
        # "order" keeps the layout stable when the document is written with sorted keys.
        return {"format": CHECKPOINT_FORMAT, "order": [name for name, _, _ in self.layout], "segments": segments}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ParamVector":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError(f"not a parameter checkpoint (format={doc.get('format')!r})")
        order = doc.get("order", list(doc["segments"]))
        if sorted(order) != sorted(doc["segments"]):
            raise ConfigurationError("segment order does not list the stored segments")
        segments = {}
        for name in order:
            seg = doc["segments"][name]
            shape = tuple(seg["shape"])
            vals = np.asarray(seg["values"], dtype=np.float64)
            if vals.size != int(np.prod(shape, dtype=int)):
                raise ConfigurationError(f"segment {name!r}: {vals.size} values for shape {shape}")
            segments[name] = vals.reshape(shape)
        return cls.from_segments(segments)

    def __repr__(self):
        return f"ParamVector(size={self.size}, segments={list(self.names)})"


def save_params(params: ParamVector, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=1) + "\n")


def load_params(path) -> ParamVector:
    return ParamVector.from_dict(json.loads(Path(path).read_text()))


def grad(scalar_fn: Callable, params):
    """Reverse-mode gradient of a scalar-valued function.

    The result has the same pytree structure (and, for a ``ParamVector``, the
    same layout) as ``params``.
    """
    out = jax.eval_shape(scalar_fn, params)
    if getattr(out, "shape", None) != ():
        raise ContractViolation(f"grad requires a scalar output, got shape {getattr(out, 'shape', None)}")
    return jax.grad(scalar_fn)(params)


def value_and_grad(scalar_fn: Callable, params):
    out = jax.eval_shape(scalar_fn, params)
    if getattr(out, "shape", None) != ():
        raise ContractViolation(f"value_and_grad requires a scalar output, got shape {getattr(out, 'shape', None)}")
    return jax.value_and_grad(scalar_fn)(params)


def seeded_gaussians(seed: int, n: int) -> np.ndarray:
    """``n`` standard normal draws, a pure function of ``seed``."""
    if n < 0:
        raise ConfigurationError("n must be >= 0")
    if n == 0:
        return np.zeros(0)
    return np.asarray(jax.random.normal(jax.random.PRNGKey(seed), (n,), dtype=jnp.float64))


def stream_key(seed: int, *path: int):
    """PRNG key for the stream addressed by ``(seed, *path)``."""
    key = jax.random.PRNGKey(seed)
    for p in path:
        key = jax.random.fold_in(key, p)
    return key


def central_differences(fn: Callable, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a flat array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (float(fn(xp)) - float(fn(xm))) / (2 * step)
    return g
