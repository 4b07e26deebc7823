"""Neural SDE with a composed drift and a distance-aware diagonal diffusion.

The state follows ``dx = f(x, u) dt + sigma(x, u) * dW`` (Ito, diagonal noise)
where

* ``f`` is a known composer applied to ``(x, u)`` and the outputs of a few
  small networks (the unknown terms), and
* ``sigma = sigma_max * sigmoid(W * raw_d + b)`` with ``raw_d`` the pre-sigmoid
  output of the distance network ``d = sigmoid(raw_d)`` and every entry of
  ``W`` at least one (``W = 1 + softplus(w_raw)``).

A strong-convexity network ``mu`` (softplus head, strictly positive) is part
of the model because it is trained jointly with ``d``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from .diffcore import MlpSpec, ParamVector, init_mlp, mlp_forward, sigmoid, softplus
from .errors import ConfigurationError


_D_LO = float(np.finfo(np.float64).tiny)
_D_HI = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class Selector:
    """Picks entries of ``z = [x; u]``; entries listed in ``trig`` are
    replaced by the pair ``(sin, cos)``."""

    indices: tuple[int, ...]
    trig: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        object.__setattr__(self, "trig", tuple(int(i) for i in self.trig))
        if not self.indices:
            raise ConfigurationError("selector must pick at least one entry")
        if not set(self.trig) <= set(self.indices):
            raise ConfigurationError(f"trig entries {self.trig} must be among selected indices {self.indices}")

    @property
    def dim(self) -> int:
        return len(self.indices) + len(self.trig)

    def check(self, z_dim: int) -> None:
        bad = [i for i in self.indices if not 0 <= i < z_dim]
        if bad:
            raise ConfigurationError(f"selector indices {bad} out of range for z of length {z_dim}")

    def __call__(self, z):
        parts = []
        for i in self.indices:
            if i in self.trig:
                parts.append(jnp.sin(z[i]))
                parts.append(jnp.cos(z[i]))
            else:
                parts.append(z[i])
        return jnp.stack(parts)


@dataclass(frozen=True)
class UnknownTerm:
    name: str
    net: MlpSpec
    selector: Selector


# Composers: (x, u, {term name: output}, options) -> dx/dt.


def _blackbox(x, u, g, options):
    return g["g"]


def _velocity_passthrough(x, u, g, options):
    pairs = options["pairs"]
    pos = jnp.array([p for p, _ in pairs])
    vel = jnp.array([v for _, v in pairs])
    out = jnp.zeros_like(x)
    out = out.at[pos].set(x[vel])
    return out.at[vel].set(g["g"])


def _cartpole_affine(x, u, g, options):
    return jnp.stack(
        [
            x[1],
            g["g1"][0] + jnp.dot(g["g2"], u),
            x[3],
            g["g3"][0] + jnp.dot(g["g4"], u),
        ]
    )


@dataclass(frozen=True)
class Composer:
    fn: Callable
    # term name -> output dim as a function of (state_dim, control_dim, options)
    terms: tuple[tuple[str, Callable], ...]
    check: Callable = lambda n, m, options: None


def _vp_check(n, m, options):
    used = [i for pair in options["pairs"] for i in pair]
    if len(set(used)) != len(used) or any(not 0 <= i < n for i in used):
        raise ConfigurationError(f"velocity-passthrough pairs {options['pairs']} invalid for state dim {n}")
    if len(used) != n:
        raise ConfigurationError("velocity-passthrough pairs must cover every state entry")


def _cartpole_check(n, m, options):
    if n != 4:
        raise ConfigurationError(f"cartpole-affine requires state dim 4, got {n}")


COMPOSERS: dict[str, Composer] = {
    "blackbox": Composer(_blackbox, (("g", lambda n, m, o: n),)),
    "velocity-passthrough": Composer(
        _velocity_passthrough, (("g", lambda n, m, o: len(o["pairs"])),), _vp_check
    ),
    "cartpole-affine": Composer(
        _cartpole_affine,
        (
            ("g1", lambda n, m, o: 1),
            ("g2", lambda n, m, o: m),
            ("g3", lambda n, m, o: 1),
            ("g4", lambda n, m, o: m),
        ),
        _cartpole_check,
    ),
}


def default_options(composer: str, state_dim: int) -> dict:
    if composer == "velocity-passthrough":
        half = state_dim // 2
        return {"pairs": tuple((i, i + half) for i in range(half))}
    return {}


@dataclass(frozen=True)
class DriftSpec:
    composer: str
    terms: tuple[UnknownTerm, ...]
    options: tuple[tuple[str, object], ...] = ()

    @property
    def option_dict(self) -> dict:
        return dict(self.options)


@dataclass(frozen=True)
class DiffusionSpec:
    sigma_max: tuple[float, ...]
    d_net: MlpSpec
    mu_net: MlpSpec
    selector: Selector

    def __post_init__(self):
        object.__setattr__(self, "sigma_max", tuple(float(s) for s in self.sigma_max))
        if any(s < 0 for s in self.sigma_max):
            raise ConfigurationError("sigma_max entries must be >= 0")
        if self.d_net.output_dim != 1 or self.mu_net.output_dim != 1:
            raise ConfigurationError("distance and mu networks must have a scalar output")
        if self.d_net.input_dim != self.selector.dim or self.mu_net.input_dim != self.selector.dim:
            raise ConfigurationError(
                f"distance/mu networks take {self.d_net.input_dim}/{self.mu_net.input_dim} inputs "
                f"but the feature selector yields {self.selector.dim}"
            )


@jax.tree_util.register_pytree_node_class
@dataclass(frozen=True)
class NeuralSdeModel:
    drift_spec: DriftSpec
    diffusion_spec: DiffusionSpec
    params: ParamVector
    state_dim: int
    control_dim: int

    def tree_flatten(self):
        return (self.params,), (self.drift_spec, self.diffusion_spec, self.state_dim, self.control_dim)

    @classmethod
    def tree_unflatten(cls, aux, children):
        drift, diff, n, m = aux
        return cls(drift, diff, children[0], n, m)

    @property
    def wiener_dim(self) -> int:
        return self.state_dim

    def with_params(self, params: ParamVector) -> "NeuralSdeModel":
        return replace(self, params=params)

    def _check(self, x, u):
        if jnp.shape(x) != (self.state_dim,) or jnp.shape(u) != (self.control_dim,):
            raise ConfigurationError(
                f"expected x of shape ({self.state_dim},) and u of shape ({self.control_dim},), "
                f"got {jnp.shape(x)} and {jnp.shape(u)}"
            )

    def drift(self, x, u):
        self._check(x, u)
        z = jnp.concatenate([x, u])
        outs = {
            t.name: mlp_forward(t.net, self.params[f"drift.{t.name}"], t.selector(z))
            for t in self.drift_spec.terms
        }
        return COMPOSERS[self.drift_spec.composer].fn(x, u, outs, self.drift_spec.option_dict)

    def features(self, x, u):
        self._check(x, u)
        return self.diffusion_spec.selector(jnp.concatenate([x, u]))

    def d_raw_features(self, feat):
        return mlp_forward(self.diffusion_spec.d_net, self.params["diffusion.d_net"], feat)[0]

    def d_features(self, feat):
        # float64 sigmoid rounds to exactly 0 or 1 for |raw| beyond ~37 (upper) and ~745 (lower)
        return jnp.clip(sigmoid(self.d_raw_features(feat)), _D_LO, _D_HI)

    def mu_features(self, feat):
        return softplus(mlp_forward(self.diffusion_spec.mu_net, self.params["diffusion.mu_net"], feat)[0])

    def monotone_weights(self):
        return 1.0 + softplus(self.params["diffusion.w_raw"])

    def diffusion_from_raw(self, raw):
        sigma_max = jnp.asarray(self.diffusion_spec.sigma_max)
        return sigma_max * sigmoid(self.monotone_weights() * raw + self.params["diffusion.b"])

    def d_psi(self, x, u):
        return self.d_features(self.features(x, u))

    def diffusion(self, x, u):
        return self.diffusion_from_raw(self.d_raw_features(self.features(x, u)))

    def mu(self, x, u):
        return self.mu_features(self.features(x, u))


def drift_eval(model: NeuralSdeModel, x, u):
    return model.drift(jnp.asarray(x, dtype=jnp.float64), jnp.asarray(u, dtype=jnp.float64))


def d_psi(model: NeuralSdeModel, x, u):
    return model.d_psi(jnp.asarray(x, dtype=jnp.float64), jnp.asarray(u, dtype=jnp.float64))


def diffusion_eval(model: NeuralSdeModel, x, u):
    return model.diffusion(jnp.asarray(x, dtype=jnp.float64), jnp.asarray(u, dtype=jnp.float64))


def mu_eval(model: NeuralSdeModel, x, u):
    return model.mu(jnp.asarray(x, dtype=jnp.float64), jnp.asarray(u, dtype=jnp.float64))


def build_model(
    state_dim: int,
    control_dim: int,
    composer: str,
    terms: list[UnknownTerm],
    diffusion: DiffusionSpec,
    seed: int = 0,
    options: dict | None = None,
    w_raw_init: float = 0.0,
) -> NeuralSdeModel:
    """Validate the structure and draw initial parameters."""
    if composer not in COMPOSERS:
        raise ConfigurationError(f"unknown composer {composer!r}; expected one of {sorted(COMPOSERS)}")
    comp = COMPOSERS[composer]
    opts = default_options(composer, state_dim)
    opts.update(options or {})
    if "pairs" in opts:
        opts["pairs"] = tuple(tuple(int(i) for i in p) for p in opts["pairs"])
    comp.check(state_dim, control_dim, opts)
    z_dim = state_dim + control_dim
    by_name = {t.name: t for t in terms}
    expected = [name for name, _ in comp.terms]
    if sorted(by_name) != sorted(expected):
        raise ConfigurationError(f"composer {composer!r} needs terms {expected}, got {sorted(by_name)}")
    for name, out_dim in comp.terms:
        t = by_name[name]
        t.selector.check(z_dim)
        if t.net.input_dim != t.selector.dim:
            raise ConfigurationError(f"term {name!r}: net input {t.net.input_dim} != selector dim {t.selector.dim}")
        want = out_dim(state_dim, control_dim, opts)
        if t.net.output_dim != want:
            raise ConfigurationError(f"term {name!r}: net output {t.net.output_dim} != required {want}")
    diffusion.selector.check(z_dim)
    if len(diffusion.sigma_max) != state_dim:
        raise ConfigurationError(f"sigma_max has {len(diffusion.sigma_max)} entries for state dim {state_dim}")

    rng = np.random.default_rng(seed)
    segments = {}
    for name in expected:
        segments[f"drift.{name}"] = init_mlp(by_name[name].net, rng)
    segments["diffusion.d_net"] = init_mlp(diffusion.d_net, rng)
    segments["diffusion.w_raw"] = np.full(state_dim, float(w_raw_init))
    segments["diffusion.b"] = np.zeros(state_dim)
    segments["diffusion.mu_net"] = init_mlp(diffusion.mu_net, rng)
    drift = DriftSpec(composer, tuple(by_name[n] for n in expected), tuple(sorted(opts.items())))
    return NeuralSdeModel(drift, diffusion, ParamVector.from_segments(segments), state_dim, control_dim)


def diffusion_param_names() -> tuple[str, ...]:
    return ("diffusion.d_net", "diffusion.w_raw", "diffusion.b", "diffusion.mu_net")


def as_ode(model: NeuralSdeModel) -> NeuralSdeModel:
    """The same model with the diffusion switched off (neural ODE baseline)."""
    diff = replace(model.diffusion_spec, sigma_max=tuple(0.0 for _ in model.diffusion_spec.sigma_max))
    return replace(model, diffusion_spec=diff)


@dataclass(frozen=True)
class AnalyticSde:
    """Hand-written SDE with the same ``drift``/``diffusion`` interface as a
    neural model; used for oracles, stubs and ground-truth comparisons."""

    drift_fn: Callable
    diffusion_fn: Callable
    state_dim: int
    control_dim: int = 0
    name: str = field(default="analytic", compare=False)

    def drift(self, x, u):
        return self.drift_fn(x, u)

    def diffusion(self, x, u):
        return self.diffusion_fn(x, u)


jax.tree_util.register_pytree_node(
    AnalyticSde, lambda s: ((), s), lambda aux, _: aux
)
