"""Grid maps of the distance field and prediction variance, and open-loop
prediction reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import partial
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .diffcore import stream_key
from .envs import Trajectory
from .errors import ConfigurationError
from .model import NeuralSdeModel
from .solvers import SolverConfig, rollout_particles, wiener_increments


@dataclass(frozen=True)
class GridAxis:
    index: int
    lo: float
    hi: float
    n_cells: int

    def __post_init__(self):
        if self.n_cells < 1:
            raise ConfigurationError("n_cells must be >= 1")
        if not self.lo < self.hi:
            raise ConfigurationError("grid axis needs lo < hi")

    def centers(self) -> np.ndarray:
        if self.n_cells == 1:
            return np.array([(self.lo + self.hi) / 2])
        return np.linspace(self.lo, self.hi, self.n_cells)


@dataclass(frozen=True)
class GridSpec:
    """Axes over selected coordinates of a base vector; coordinates not
    gridded keep their base value."""

    axes: tuple[GridAxis, ...]
    base: tuple[float, ...]

    def __post_init__(self):
        if not self.axes:
            raise ConfigurationError("grid needs at least one axis")
        for ax in self.axes:
            if not 0 <= ax.index < len(self.base):
                raise ConfigurationError(f"grid axis index {ax.index} outside base of length {len(self.base)}")

    @classmethod
    def square(cls, lo=-0.2, hi=0.2, n=41, dims=2) -> "GridSpec":
        return cls(tuple(GridAxis(i, lo, hi, n) for i in range(dims)), tuple(0.0 for _ in range(dims)))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(ax.n_cells for ax in self.axes)

    def points(self) -> np.ndarray:
        """Cell centres in row-major order (first axis outermost)."""
        mesh = np.meshgrid(*[ax.centers() for ax in self.axes], indexing="ij")
        pts = np.tile(np.asarray(self.base, dtype=np.float64), (mesh[0].size, 1))
        for ax, coords in zip(self.axes, mesh):
            pts[:, ax.index] = coords.reshape(-1)
        return pts


@dataclass
class Field:
    grid: GridSpec
    points: np.ndarray  # (N, dim)
    values: np.ndarray  # (N,)

    def to_csv(self, path) -> None:
        names = ["cell_x", "cell_y", "cell_z", "cell_w"]
        idx = [ax.index for ax in self.grid.axes]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([names[i] if i < len(names) else f"cell_{i}" for i in range(len(idx))] + ["value"])
            for p, v in zip(self.points, self.values):
                w.writerow([repr(float(p[i])) for i in idx] + [repr(float(v))])


def dmap(model: NeuralSdeModel, grid: GridSpec) -> Field:
    """Distance field evaluated on the distance network's feature space."""
    pts = grid.points()
    if pts.shape[1] != model.diffusion_spec.selector.dim:
        raise ConfigurationError(
            f"grid has {pts.shape[1]} dims but the distance network takes {model.diffusion_spec.selector.dim}"
        )
    vals = np.asarray(jax.jit(jax.vmap(model.d_features))(jnp.asarray(pts)))
    return Field(grid, pts, vals)


def shifted_moments(samples):
    """Mean and sample std over axis 0, computed about the first sample so
    that identical samples give exactly that sample and exactly zero. The
    std is zero for a single sample."""
    k = samples - samples[0]
    n = samples.shape[0]
    s1 = jnp.sum(k, axis=0)
    mean = samples[0] + s1 / n
    if n < 2:
        return mean, jnp.zeros_like(mean)
    var = (jnp.sum(k * k, axis=0) - s1 * s1 / n) / (n - 1)
    return mean, jnp.sqrt(jnp.maximum(var, 0.0))


@partial(jax.jit, static_argnames=("scheme", "dt", "horizon", "n_particles"))
def _terminal_variance(model, x0s, controls, key, scheme, dt, horizon, n_particles):
    n = x0s.shape[1]
    if scheme == "euler_ode":
        noise = jnp.zeros((n_particles, horizon, n))
    else:
        noise = wiener_increments(key, n_particles, horizon, n, dt)

    def one(x0):
        paths = rollout_particles(model, x0, controls, noise, scheme, dt)
        return jnp.sum(shifted_moments(paths[:, -1, :])[1] ** 2)

    return jax.vmap(one)(x0s)


def uncertainty_grid(
    model: NeuralSdeModel,
    grid: GridSpec,
    horizon_s: float,
    n_particles: int,
    cfg: SolverConfig,
    control=None,
) -> Field:
    """Trace of the terminal-state sample covariance after ``horizon_s``
    seconds from every cell centre (as initial state). Cells whose rollout
    diverges are NaN."""
    if n_particles < 2:
        raise ConfigurationError("variance needs n_particles >= 2")
    pts = grid.points()
    if pts.shape[1] != model.state_dim:
        raise ConfigurationError(f"grid has {pts.shape[1]} dims, model state has {model.state_dim}")
    horizon = max(1, int(round(horizon_s / cfg.dt)))
    u = np.zeros(model.control_dim) if control is None else np.asarray(control, dtype=np.float64)
    controls = jnp.tile(jnp.asarray(u).reshape(1, -1), (horizon, 1))
    vals = np.asarray(
        _terminal_variance(model, jnp.asarray(pts), controls, stream_key(cfg.seed), cfg.scheme, float(cfg.dt), horizon, n_particles)
    )
    vals = np.where(np.isfinite(vals), vals, np.nan)
    return Field(grid, pts, vals)


@dataclass
class PredictionReport:
    window: int
    t: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    truth: np.ndarray
    rmse: float
    coverage: float
    coverage_per_dim: list = field(default_factory=list)
    k_sigma: float = 3.0

    def summary(self) -> dict:
        return {
            "window": self.window,
            "t0": float(self.t[0]),
            "t1": float(self.t[-1]),
            "steps": int(len(self.t)),
            "rmse": float(self.rmse),
            "coverage": float(self.coverage),
            "coverage_per_dim": [float(c) for c in self.coverage_per_dim],
            "k_sigma": float(self.k_sigma),
        }


def envelope_coverage(mean, std, truth, k: float = 3.0) -> tuple[float, np.ndarray]:
    """Fraction of time steps at which every state entry of ``truth`` lies in
    ``mean +- k std``, and the per-dimension fractions."""
    inside = np.abs(truth - mean) <= k * std
    return float(np.mean(np.all(inside, axis=1))), np.mean(inside, axis=0)


@partial(jax.jit, static_argnames=("scheme", "dt", "n_particles"))
def _window_paths(model, x0, controls, key, scheme, dt, n_particles):
    H, n = controls.shape[0], x0.shape[0]
    if scheme == "euler_ode":
        noise = jnp.zeros((n_particles, H, n))
    else:
        noise = wiener_increments(key, n_particles, H, n, dt)
    return rollout_particles(model, x0, controls, noise, scheme, dt)


def openloop_report(
    model: NeuralSdeModel,
    trajectory: Trajectory,
    window_s: float,
    cfg: SolverConfig,
    k_sigma: float = 3.0,
) -> list[PredictionReport]:
    """Split the trajectory into windows; in each, start from the recorded
    first state and replay the recorded controls open loop."""
    T = len(trajectory)
    if T < 2:
        raise ConfigurationError("trajectory needs at least two points")
    dts = np.diff(trajectory.t)
    dt = float(dts[0])
    if not np.allclose(dts, dt, rtol=1e-6, atol=1e-12):
        raise ConfigurationError("open-loop prediction needs a uniform time step")
    steps = max(1, int(round(window_s / dt)))
    reports = []
    start = 0
    w = 0
    while start < T - 1:
        stop = min(start + steps, T - 1)
        x0 = jnp.asarray(trajectory.x[start])
        controls = jnp.asarray(trajectory.u[start:stop]).reshape(stop - start, model.control_dim)
        paths = np.asarray(
            _window_paths(model, x0, controls, stream_key(cfg.seed, w), cfg.scheme, dt, cfg.n_particles)
        )
        mean, std = shifted_moments(paths)
        mean, std = np.asarray(mean), np.asarray(std)
        truth = trajectory.x[start : stop + 1]
        rmse = float(np.sqrt(np.mean((mean - truth) ** 2)))
        cov, per_dim = envelope_coverage(mean, std, truth, k_sigma)
        reports.append(PredictionReport(w, trajectory.t[start : stop + 1], mean, std, truth, rmse, cov, per_dim.tolist(), k_sigma))
        start = stop
        w += 1
    return reports


def reports_to_csv(reports: Sequence[PredictionReport], path) -> None:
    if not reports:
        return
    n = reports[0].mean.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["window", "t"]
            + [f"mean_{i}" for i in range(n)]
            + [f"std_{i}" for i in range(n)]
            + [f"truth_{i}" for i in range(n)]
        )
        for r in reports:
            for k in range(len(r.t)):
                w.writerow(
                    [r.window, repr(float(r.t[k]))]
                    + [repr(float(v)) for v in r.mean[k]]
                    + [repr(float(v)) for v in r.std[k]]
                    + [repr(float(v)) for v in r.truth[k]]
                )


def reports_summary(reports: Sequence[PredictionReport]) -> dict:
    return {
        "windows": [r.summary() for r in reports],
        "mean_rmse": float(np.mean([r.rmse for r in reports])) if reports else None,
        "mean_coverage": float(np.mean([r.coverage for r in reports])) if reports else None,
    }


def distance_to_points(query: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Euclidean distance from each query row to its nearest point."""
    q = np.asarray(query, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    out = np.empty(len(q))
    for start in range(0, len(q), 1024):
        block = q[start : start + 1024]
        d2 = ((block[:, None, :] - p[None, :, :]) ** 2).sum(-1)
        out[start : start + 1024] = np.sqrt(d2.min(axis=1))
    return out


def near_far_split(fld: Field, data_points: np.ndarray, rho: float, far_factor: float = 3.0):
    """Boolean masks of cells within ``rho`` of the data and farther than
    ``far_factor * rho``."""
    idx = [ax.index for ax in fld.grid.axes]
    dist = distance_to_points(fld.points[:, idx], np.asarray(data_points)[:, idx])
    return dist < rho, dist > far_factor * rho
