"""Sampling-based stochastic NMPC on a learned SDE.

Each solve minimises a Monte-Carlo tracking cost over a control sequence
with Nesterov-accelerated projected gradient descent. The Wiener increments
are frozen for the duration of a solve, so the cost is a deterministic
function of the controls.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .diffcore import stream_key
from .errors import ConfigurationError
from .solvers import rollout_particles, wiener_increments

DIVERGED_COST = 1e9


@dataclass(frozen=True)
class MpcConfig:
    q: tuple[float, ...]
    r: tuple[float, ...]
    horizon_steps: int = 20
    dt: float = 0.05
    n_particles: int = 1
    lo: tuple[float, ...] = (-1.0,)
    hi: tuple[float, ...] = (1.0,)
    iters: int = 50
    lr0: float = 0.1
    scheme: str = "euler_maruyama"
    wrap: tuple[int, ...] = ()  # state entries compared as angles
    seed: int = 0

    def __post_init__(self):
        for name in ("q", "r", "lo", "hi", "wrap"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if any(v < 0 for v in self.q + self.r):
            raise ConfigurationError("Q and R entries must be >= 0")
        if len(self.lo) != len(self.hi) or any(lo > hi for lo, hi in zip(self.lo, self.hi)):
            raise ConfigurationError("control bounds must pair up with lo <= hi")
        if self.iters < 1 or self.horizon_steps < 1 or self.n_particles < 1:
            raise ConfigurationError("iters, horizon_steps and n_particles must be >= 1")
        if not self.dt > 0 or not self.lr0 > 0:
            raise ConfigurationError("dt and lr0 must be > 0")

    @property
    def horizon_s(self) -> float:
        return self.horizon_steps * self.dt


def _wrap(d):
    return (d + jnp.pi) % (2 * jnp.pi) - jnp.pi


def tracking_residual(x, x_ref, wrap: Sequence[int]):
    d = x - x_ref
    if wrap:
        idx = jnp.asarray(wrap)
        d = d.at[..., idx].set(_wrap(d[..., idx]))
    return d


def _cost_with_noise(model, x0, controls, ref_window, noise, cfg: MpcConfig):
    paths = rollout_particles(model, x0, controls, noise, cfg.scheme, cfg.dt)
    d = tracking_residual(paths[:, 1:, :], ref_window[None], cfg.wrap)
    track = jnp.sum(d * d * jnp.asarray(cfg.q)) / paths.shape[0]
    effort = jnp.sum(controls * controls * jnp.asarray(cfg.r))
    cost = track + effort
    return jnp.where(jnp.isfinite(cost), cost, DIVERGED_COST)


def _noise(model, key, cfg: MpcConfig):
    if cfg.scheme == "euler_ode":
        return jnp.zeros((cfg.n_particles, cfg.horizon_steps, model.state_dim))
    return wiener_increments(key, cfg.n_particles, cfg.horizon_steps, model.state_dim, cfg.dt)


def mpc_cost(model, x0, controls, ref_window, cfg: MpcConfig, key=None):
    """Monte-Carlo estimate of the summed weighted tracking error of
    ``x_1..x_H`` against ``ref_window`` plus control effort; returns
    ``DIVERGED_COST`` when the rollout is not finite."""
    controls = jnp.asarray(controls, dtype=jnp.float64).reshape(cfg.horizon_steps, -1)
    ref_window = jnp.asarray(ref_window, dtype=jnp.float64).reshape(cfg.horizon_steps, -1)
    key = stream_key(cfg.seed) if key is None else key
    return _cost_with_noise(model, jnp.asarray(x0, dtype=jnp.float64), controls, ref_window, _noise(model, key, cfg), cfg)


def projected_nesterov(cost_fn: Callable, u0, lo, hi, iters: int, lr0: float):
    """Projected gradient descent with Nesterov momentum and an adaptive
    step: a candidate that lowers the cost is accepted and the step grows by
    1.1; otherwise the step halves and momentum restarts. Returns the best
    (last accepted) iterate, its cost and the accepted-cost trace."""
    lo = jnp.broadcast_to(jnp.asarray(lo, dtype=jnp.float64), jnp.shape(u0))
    hi = jnp.broadcast_to(jnp.asarray(hi, dtype=jnp.float64), jnp.shape(u0))
    value_and_grad = jax.value_and_grad(cost_fn)

    def proj(u):
        return jnp.clip(u, lo, hi)

    u0 = proj(jnp.asarray(u0, dtype=jnp.float64))
    c0 = cost_fn(u0)

    def body(i, carry):
        u, u_prev, c, lr, t, trace = carry
        t_next = 0.5 * (1.0 + jnp.sqrt(1.0 + 4.0 * t * t))
        y = proj(u + ((t - 1.0) / t_next) * (u - u_prev))
        _, g = value_and_grad(y)
        cand = proj(y - lr * g)
        c_cand = cost_fn(cand)
        accept = c_cand < c
        u_new = jnp.where(accept, cand, u)
        c_new = jnp.where(accept, c_cand, c)
        lr_new = jnp.where(accept, lr * 1.1, lr * 0.5)
        t_new = jnp.where(accept, t_next, 1.0)
        trace = trace.at[i].set(c_new)
        return u_new, u, c_new, lr_new, t_new, trace

    init = (u0, u0, c0, jnp.asarray(lr0, dtype=jnp.float64), jnp.asarray(1.0), jnp.zeros(iters))
    u, _, c, _, _, trace = jax.lax.fori_loop(0, iters, body, init)
    return u, c, trace


@partial(jax.jit, static_argnames=("cfg",))
def _solve(model, x0, ref_window, warm_start, key, cfg: MpcConfig):
    noise = _noise(model, key, cfg)

    def cost(u):
        return _cost_with_noise(model, x0, u, ref_window, noise, cfg)

    return projected_nesterov(cost, warm_start, jnp.asarray(cfg.lo), jnp.asarray(cfg.hi), cfg.iters, cfg.lr0)


def solve_controls(model, x0, ref_window, warm_start, cfg: MpcConfig, key=None, return_info=False):
    """Optimise the control sequence from ``x0``; common random numbers are
    used across iterations."""
    m = len(cfg.lo)
    warm = jnp.asarray(warm_start, dtype=jnp.float64).reshape(cfg.horizon_steps, m)
    if bool(jnp.any(warm < jnp.asarray(cfg.lo))) or bool(jnp.any(warm > jnp.asarray(cfg.hi))):
        raise ConfigurationError("warm start lies outside the control bounds")
    key = stream_key(cfg.seed) if key is None else key
    u, c, trace = _solve(
        model,
        jnp.asarray(x0, dtype=jnp.float64),
        jnp.asarray(ref_window, dtype=jnp.float64).reshape(cfg.horizon_steps, -1),
        warm,
        key,
        cfg,
    )
    if return_info:
        return np.asarray(u), float(c), np.asarray(trace)
    return np.asarray(u)


def shift_warm_start(controls: np.ndarray) -> np.ndarray:
    """``[u_1..u_H] -> [u_2..u_H, u_H]``."""
    controls = np.asarray(controls)
    return np.concatenate([controls[1:], controls[-1:]], axis=0)


@dataclass
class ReferenceTrack:
    t: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or len(self.t) != len(self.x) or len(self.t) == 0:
            raise ConfigurationError("reference needs t (T,) and x (T, n)")

    @classmethod
    def constant(cls, x, duration: float) -> "ReferenceTrack":
        x = np.asarray(x, dtype=np.float64)
        return cls(np.array([0.0, duration]), np.stack([x, x]))

    def window(self, t0: float, dt: float, steps: int) -> np.ndarray:
        """Reference at ``t0 + k dt`` for k = 1..steps, interpolated linearly
        and held at the ends."""
        ts = t0 + dt * np.arange(1, steps + 1)
        return np.stack([np.interp(ts, self.t, self.x[:, i]) for i in range(self.x.shape[1])], axis=1)


@dataclass
class EpisodeLog:
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    u: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    terminated: bool = False

    def to_csv(self, path, include_wall_time: bool = False) -> None:
        n = len(self.x[0]) if self.x else 0
        m = len(self.u[0]) if self.u else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["t", *[f"x_{i}" for i in range(n)], *[f"u_{i}" for i in range(m)], "planned_cost"]
            if include_wall_time:
                header.append("solve_wall_time")
            w.writerow(header)
            for k in range(len(self.t)):
                u = self.u[k] if k < len(self.u) else [float("nan")] * m
                c = self.cost[k] if k < len(self.cost) else float("nan")
                row = [repr(float(self.t[k]))] + [repr(float(v)) for v in self.x[k]] + [repr(float(v)) for v in u] + [repr(float(c))]
                if include_wall_time:
                    row.append(repr(float(self.wall[k])) if k < len(self.wall) else "nan")
                w.writerow(row)

    def states(self) -> np.ndarray:
        return np.asarray(self.x)


def run_episode(
    model,
    env_step: Callable,
    ref: ReferenceTrack,
    cfg: MpcConfig,
    episode_s: float,
    x0,
    warm_start=None,
) -> EpisodeLog:
    """Receding-horizon loop with control period ``cfg.dt``: solve from the
    true state, apply the first control to ``env_step(x, u, dt)``, shift."""
    m = len(cfg.lo)
    n_steps = int(round(episode_s / cfg.dt))
    if warm_start is None:
        mid = np.clip(np.zeros(m), cfg.lo, cfg.hi)
        warm = np.tile(mid, (cfg.horizon_steps, 1))
    else:
        warm = np.asarray(warm_start, dtype=np.float64).reshape(cfg.horizon_steps, m)
    log = EpisodeLog()
    x = np.asarray(x0, dtype=np.float64)
    for k in range(n_steps):
        t = k * cfg.dt
        tic = time.perf_counter()
        plan, cost, _ = solve_controls(
            model, x, ref.window(t, cfg.dt, cfg.horizon_steps), warm, cfg, key=stream_key(cfg.seed, k), return_info=True
        )
        log.wall.append(time.perf_counter() - tic)
        log.t.append(t)
        log.x.append(x.tolist())
        log.u.append(plan[0].tolist())
        log.cost.append(cost)
        x = np.asarray(env_step(x, plan[0], cfg.dt), dtype=np.float64)
        if not np.all(np.isfinite(x)):
            log.terminated = True
            return log
        warm = shift_warm_start(plan)
    log.t.append(n_steps * cfg.dt)
    log.x.append(x.tolist())
    return log
