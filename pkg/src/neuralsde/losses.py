"""Training objective: data fit plus the three distance-awareness terms.

All terms are sums (over segments, anchors and sampled pairs); the joint
objective is their weighted sum. The distance terms act on the features fed
to the distance network, not on the full ``[x; u]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np

from .diffcore import stream_key
from .errors import ConfigurationError, ContractViolation
from .model import NeuralSdeModel
from .solvers import SolverConfig, rollout_particles, wiener_increments


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 0.01
    lam: float = 1.0
    s_diag: Optional[tuple[float, ...]] = None  # None: estimate from the dataset
    rho: float = 0.05
    n_convex_pairs: int = 8
    convex_on: str = "output"  # "output": d itself; "logit": the pre-sigmoid network output

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.lam) < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.s_diag is not None:
            object.__setattr__(self, "s_diag", tuple(float(s) for s in self.s_diag))
            if any(s <= 0 for s in self.s_diag):
                raise ConfigurationError("s_diag entries must be > 0")
        if not self.rho > 0:
            raise ConfigurationError("rho must be > 0")
        if self.n_convex_pairs < 1:
            raise ConfigurationError("n_convex_pairs must be >= 1")
        if self.convex_on not in ("logit", "output"):
            raise ConfigurationError("convex_on must be 'logit' or 'output'")


@jax.tree_util.register_dataclass
@dataclass
class Batch:
    """Segments of consecutive transitions: ``x`` is (B, H+1, n), ``u`` (B, H, m)."""

    x: jax.Array
    u: jax.Array

    @property
    def size(self) -> int:
        return self.x.shape[0]


def _is_tracer(x) -> bool:
    return isinstance(x, jax.core.Tracer)


# Data term


def segment_residual_loss(paths, target, s_diag):
    """``paths`` (P, H+1, n) and ``target`` (H+1, n); the conditioning state
    at index 0 is excluded. Sum over steps and particles divided by P."""
    r = paths[:, 1:, :] - target[None, 1:, :]
    return jnp.sum(r * r / s_diag) / paths.shape[0]


def segment_data_loss(model, seg_x, seg_u, noise, scheme, dt, s_diag):
    paths = rollout_particles(model, seg_x[0], seg_u, noise, scheme, dt)
    return segment_residual_loss(paths, seg_x, jnp.asarray(s_diag))


def batch_data_loss(model, batch: Batch, key, scheme, dt, s_diag, n_particles=1):
    """Sum of per-segment data losses; segment ``i`` draws noise from
    ``fold_in(key, i)``."""
    B, Hp1, n = batch.x.shape
    H = Hp1 - 1

    def one(i, sx, su):
        if scheme == "euler_ode":
            noise = jnp.zeros((n_particles, H, n))
        else:
            noise = wiener_increments(jax.random.fold_in(key, i), n_particles, H, n, dt)
        return segment_data_loss(model, sx, su, noise, scheme, dt, s_diag)

    return jnp.sum(jax.vmap(one)(jnp.arange(B), batch.x, batch.u))


def data_loss(model: NeuralSdeModel, seg_x, seg_u, cfg: SolverConfig, s_diag) -> jax.Array:
    """Data term for one segment ``x_i..x_{i+H}`` with controls ``u_i..u_{i+H-1}``."""
    seg_x = jnp.asarray(seg_x, dtype=jnp.float64)
    seg_u = jnp.asarray(seg_u, dtype=jnp.float64)
    seg_u = seg_u.reshape(seg_u.shape[0] if seg_u.ndim else 0, model.control_dim)
    if seg_x.shape[0] < cfg.horizon + 1 or seg_u.shape[0] < cfg.horizon:
        raise ConfigurationError(
            f"segment has {seg_x.shape[0]} states / {seg_u.shape[0]} controls; horizon {cfg.horizon} needs "
            f"{cfg.horizon + 1} / {cfg.horizon}"
        )
    seg_x = seg_x[: cfg.horizon + 1]
    seg_u = seg_u[: cfg.horizon]
    n = model.state_dim
    if cfg.scheme == "euler_ode":
        noise = jnp.zeros((cfg.n_particles, cfg.horizon, n))
    else:
        noise = wiener_increments(stream_key(cfg.seed), cfg.n_particles, cfg.horizon, n, cfg.dt)
    return segment_data_loss(model, seg_x, seg_u, noise, cfg.scheme, cfg.dt, s_diag)


def default_s_diag(trajectory_states, floor: float = 1e-6) -> np.ndarray:
    """Per-dimension variance of one-step state differences, floored."""
    diffs = np.concatenate([np.diff(np.asarray(x), axis=0) for x in trajectory_states], axis=0)
    return np.maximum(diffs.var(axis=0), floor)


# Distance-awareness terms


def _safe_norm(v):
    sq = jnp.sum(v * v)
    pos = sq > 0
    return jnp.where(pos, jnp.sqrt(jnp.where(pos, sq, 1.0)), 0.0)


def grad_norm_sum(d_fn: Callable, feats):
    """Sum over rows of ``feats`` of the Euclidean norm of grad d."""
    g = jax.vmap(jax.grad(d_fn))(feats)
    return jnp.sum(jax.vmap(_safe_norm)(g))


def grad_loss(model: NeuralSdeModel, feats) -> jax.Array:
    return grad_norm_sum(model.d_features, jnp.asarray(feats, dtype=jnp.float64))


def strong_convexity_gap(d_fn: Callable, mu, z, z2):
    """F = d(z') - d(z) - grad d(z).(z' - z) - mu |z' - z|^2."""
    d_z, g_z = jax.value_and_grad(d_fn)(z)
    dz = z2 - z
    return d_fn(z2) - d_z - jnp.dot(g_z, dz) - mu * jnp.dot(dz, dz)


def convexity_gap(model: NeuralSdeModel, anchor, z, z2):
    """Gap for a pair of feature vectors around a dataset anchor."""
    mu = model.mu_features(jnp.asarray(anchor, dtype=jnp.float64))
    return strong_convexity_gap(model.d_features, mu, jnp.asarray(z, dtype=jnp.float64), jnp.asarray(z2, dtype=jnp.float64))


def sample_pairs(key, anchors, rho: float, n_pairs: int):
    """Two (N, K, k) arrays of points drawn i.i.d. from N(anchor, rho^2 I)."""
    N, k = anchors.shape
    eps = jax.random.normal(key, (2, N, n_pairs, k), dtype=jnp.float64) * rho
    return anchors[:, None, :] + eps[0], anchors[:, None, :] + eps[1]


def hinge_sq(F):
    return jnp.square(jnp.minimum(F, 0.0))


def convex_hinge_sum(d_fn: Callable, mu_fn: Callable, anchors, z, z2):
    """Sum of hinge^2 over all sampled pairs; ``z``/``z2`` are (N, K, k)."""
    mus = jax.vmap(mu_fn)(anchors)

    def per_anchor(mu, za, zb):
        F = jax.vmap(lambda a, b: strong_convexity_gap(d_fn, mu, a, b))(za, zb)
        return jnp.sum(hinge_sq(F))

    return jnp.sum(jax.vmap(per_anchor)(mus, z, z2))


def convex_loss(model: NeuralSdeModel, anchors, rho: float, n_convex_pairs: int, seed: int) -> jax.Array:
    anchors = jnp.asarray(anchors, dtype=jnp.float64)
    z, z2 = sample_pairs(stream_key(seed), anchors, rho, n_convex_pairs)
    return convex_hinge_sum(model.d_features, model.mu_features, anchors, z, z2)


def mu_loss(model: NeuralSdeModel, feats) -> jax.Array:
    mus = jax.vmap(model.mu_features)(jnp.asarray(feats, dtype=jnp.float64))
    if not _is_tracer(mus) and not bool(jnp.all(mus > 0)):
        raise ContractViolation("strong-convexity network returned a nonpositive value")
    return jnp.sum(1.0 / mus)


# Joint objective


def anchor_features(model: NeuralSdeModel, batch: Batch):
    """Distance-network features of each segment's first (state, control)."""
    return jax.vmap(model.features)(batch.x[:, 0, :], batch.u[:, 0, :])


def loss_terms(model: NeuralSdeModel, batch: Batch, loss_cfg: LossConfig, scheme: str, dt: float, key, s_diag):
    """Dict of the four terms; terms with zero weight are skipped (reported as 0)."""
    zero = jnp.zeros(())
    k_data, k_pairs = jax.random.split(key)
    out = {"data": zero, "grad": zero, "convex": zero, "mu": zero}
    if loss_cfg.alpha:
        out["data"] = batch_data_loss(model, batch, k_data, scheme, dt, s_diag)
    if loss_cfg.beta or loss_cfg.gamma or loss_cfg.lam:
        feats = anchor_features(model, batch)
        if loss_cfg.beta:
            out["grad"] = grad_norm_sum(model.d_features, feats)
        if loss_cfg.gamma:
            z, z2 = sample_pairs(k_pairs, feats, loss_cfg.rho, loss_cfg.n_convex_pairs)
            d_fn = model.d_raw_features if loss_cfg.convex_on == "logit" else model.d_features
            out["convex"] = convex_hinge_sum(d_fn, model.mu_features, feats, z, z2)
        if loss_cfg.lam:
            out["mu"] = jnp.sum(1.0 / jax.vmap(model.mu_features)(feats))
    return out


def combine(terms: dict, loss_cfg: LossConfig):
    return (
        loss_cfg.alpha * terms["data"]
        + loss_cfg.beta * terms["grad"]
        + loss_cfg.gamma * terms["convex"]
        + loss_cfg.lam * terms["mu"]
    )


def total_loss(model: NeuralSdeModel, batch: Batch, loss_cfg: LossConfig, solver_cfg: SolverConfig, s_diag=None, seed=None):
    """Weighted objective on one batch. Returns ``(total, terms)``."""
    if s_diag is None:
        s_diag = loss_cfg.s_diag if loss_cfg.s_diag is not None else np.ones(model.state_dim)
    key = stream_key(solver_cfg.seed if seed is None else seed)
    terms = loss_terms(model, batch, loss_cfg, solver_cfg.scheme, solver_cfg.dt, key, jnp.asarray(s_diag))
    return combine(terms, loss_cfg), terms
