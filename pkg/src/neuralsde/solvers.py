"""Fixed-step, differentiable SDE integrators.

Three schemes share one step kernel:

``euler_ode``       x' = x + f dt                      (diffusion ignored)
``euler_maruyama``  x' = x + f dt + s dW
``milstein_df``     Euler-Maruyama plus the derivative-free Milstein
                    correction per diagonal entry,
                    (s(x + f dt + s sqrt(dt)) - s(x)) (dW^2 - dt) / (2 sqrt(dt))

Controls are held constant over each step. Particle ``p`` draws its Wiener
increments from the stream ``(seed, p)`` so adding particles never changes
existing paths.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import partial
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .diffcore import stream_key
from .errors import ConfigurationError, IntegrationDiverged
from .model import AnalyticSde

SCHEMES = ("euler_ode", "euler_maruyama", "milstein_df")


@dataclass(frozen=True)
class SolverConfig:
    scheme: str = "euler_maruyama"
    dt: float = 0.01
    horizon: int = 50
    n_particles: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.dt > 0:
            raise ConfigurationError("dt must be > 0")
        if self.horizon < 1 or self.n_particles < 1:
            raise ConfigurationError("horizon and n_particles must be >= 1")


@dataclass
class PathBundle:
    paths: np.ndarray  # (n_particles, horizon + 1, state_dim)
    times: np.ndarray  # (horizon + 1,)

    def to_csv(self, path) -> None:
        n = self.paths.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["particle", "step", "t", *[f"x_{i}" for i in range(n)]])
            for p in range(self.paths.shape[0]):
                for k in range(self.paths.shape[1]):
                    w.writerow([p, k, repr(float(self.times[k])), *[repr(float(v)) for v in self.paths[p, k]]])


def step(system, scheme: str, x, u, dw, dt):
    """One integration step from ``x`` with held control ``u`` and Wiener
    increment ``dw`` (already scaled by sqrt(dt))."""
    f = system.drift(x, u)
    x_det = x + f * dt
    if scheme == "euler_ode":
        return x_det
    s = system.diffusion(x, u)
    x_em = x_det + s * dw
    if scheme == "euler_maruyama":
        return x_em
    sq = jnp.sqrt(dt)
    support = x_det + s * sq
    return x_em + (system.diffusion(support, u) - s) * (dw * dw - dt) / (2.0 * sq)


def rollout(system, x0, controls, noise, scheme: str, dt: float):
    """One path: ``controls`` is (H, m), ``noise`` (H, n) Wiener increments.
    Returns (H + 1, n) states including ``x0``."""

    def body(x, inputs):
        u, dw = inputs
        nxt = step(system, scheme, x, u, dw, dt)
        return nxt, nxt

    _, xs = jax.lax.scan(body, x0, (controls, noise))
    return jnp.concatenate([x0[None], xs], axis=0)


def rollout_particles(system, x0, controls, noise, scheme: str, dt: float):
    """``noise`` is (P, H, n); returns (P, H + 1, n)."""
    return jax.vmap(lambda nz: rollout(system, x0, controls, nz, scheme, dt))(noise)


def wiener_increments(key, n_particles: int, horizon: int, dim: int, dt: float, first_particle: int = 0):
    """(P, H, dim) increments; particle ``p`` uses ``fold_in(key, p)``."""
    idx = jnp.arange(first_particle, first_particle + n_particles)
    keys = jax.vmap(lambda p: jax.random.fold_in(key, p))(idx)
    z = jax.vmap(lambda k: jax.random.normal(k, (horizon, dim), dtype=jnp.float64))(keys)
    return z * jnp.sqrt(dt)


@partial(jax.jit, static_argnames=("scheme", "dt", "horizon", "n_particles"))
def _solve(system, x0, controls, key, scheme, dt, horizon, n_particles):
    n = x0.shape[0]
    if scheme == "euler_ode":
        noise = jnp.zeros((n_particles, horizon, n))
    else:
        noise = wiener_increments(key, n_particles, horizon, n, dt)
    return rollout_particles(system, x0, controls, noise, scheme, dt)


def _as_controls(system, controls, horizon):
    m = getattr(system, "control_dim", 0)
    if controls is None:
        controls = np.zeros((horizon, m))
    controls = jnp.asarray(controls, dtype=jnp.float64).reshape(-1, m) if m else jnp.zeros((horizon, 0))
    if controls.shape[0] != horizon:
        raise ConfigurationError(f"expected {horizon} controls, got {controls.shape[0]}")
    return controls


def first_nonfinite_step(paths: np.ndarray):
    """Index of the first step (1-based over integration steps) whose state
    is not finite in any particle, or None."""
    bad = ~np.isfinite(paths).all(axis=(0, 2))
    if bad.any():
        return int(np.argmax(bad))
    return None


def sdesolve(system, x0, controls, cfg: SolverConfig) -> PathBundle:
    """Sample ``cfg.n_particles`` paths of ``cfg.horizon`` steps from ``x0``."""
    x0 = jnp.asarray(x0, dtype=jnp.float64).reshape(-1)
    controls = _as_controls(system, controls, cfg.horizon)
    paths = np.asarray(
        _solve(system, x0, controls, stream_key(cfg.seed), cfg.scheme, float(cfg.dt), cfg.horizon, cfg.n_particles)
    )
    bad = first_nonfinite_step(paths)
    if bad is not None:
        raise IntegrationDiverged(bad)
    return PathBundle(paths, np.arange(cfg.horizon + 1) * cfg.dt)


# Strong convergence on geometric Brownian motion.


def gbm(a: float, b: float) -> AnalyticSde:
    return AnalyticSde(lambda x, u: a * x, lambda x, u: b * x, state_dim=1, name=f"gbm(a={a}, b={b})")


@partial(jax.jit, static_argnames=("scheme", "dt", "stride"))
def _gbm_terminal(system, x0, fine_dw, scheme, dt, stride):
    n_paths, n_fine = fine_dw.shape
    dw = fine_dw.reshape(n_paths, n_fine // stride, stride).sum(axis=2)[..., None]
    controls = jnp.zeros((n_fine // stride, 0))

    def one(nz):
        return rollout(system, x0, controls, nz, scheme, dt)[-1, 0]

    return jax.vmap(one)(dw)


def strong_error(
    scheme: str,
    a: float = 1.0,
    b: float = 0.5,
    dt_list: Sequence[float] = (1 / 64, 1 / 128, 1 / 256),
    T: float = 1.0,
    x0: float = 1.0,
    n_paths: int = 4000,
    seed: int = 0,
) -> np.ndarray:
    """Mean absolute terminal error against the exact GBM solution driven by
    the same Brownian path, one entry per step size."""
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    if n_paths < 1:
        raise ConfigurationError("n_paths must be >= 1")
    dt_min = min(dt_list)
    n_fine = int(round(T / dt_min))
    strides = []
    for dt in dt_list:
        s = dt / dt_min
        if abs(s - round(s)) > 1e-9 or n_fine % int(round(s)):
            raise ConfigurationError("every dt must be an integer multiple of the smallest dt dividing T")
        strides.append(int(round(s)))
    fine_dw = np.asarray(jax.random.normal(stream_key(seed), (n_paths, n_fine), dtype=jnp.float64)) * np.sqrt(dt_min)
    w_T = fine_dw.sum(axis=1)
    exact = x0 * np.exp((a - 0.5 * b * b) * T + b * w_T)
    system = gbm(a, b)
    errors = []
    for dt, stride in zip(dt_list, strides):
        num = np.asarray(_gbm_terminal(system, jnp.array([x0]), jnp.asarray(fine_dw), scheme, float(dt), stride))
        errors.append(np.mean(np.abs(num - exact)))
    return np.asarray(errors)


def fit_order(dt_list: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(dt)."""
    return float(np.polyfit(np.log(np.asarray(dt_list)), np.log(np.asarray(errors)), 1)[0])
