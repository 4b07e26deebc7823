"""Ground-truth simulators, dataset generation and the dataset file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class MassSpringParams:
    m: float = 1.0
    b: float = 0.5
    k: float = 1.0

    def __post_init__(self):
        if not self.m > 0 or self.b < 0 or self.k < 0:
            raise ConfigurationError("mass-spring needs m > 0, b >= 0, k >= 0")


@dataclass(frozen=True)
class CartpoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_length: float = 0.5  # half-length, pivot to centre of mass
    gravity: float = 9.81
    u_max: float = 10.0

    def __post_init__(self):
        if min(self.cart_mass, self.pole_mass, self.pole_length) <= 0:
            raise ConfigurationError("cartpole masses and length must be > 0")


def mass_spring_rhs(params: MassSpringParams, x, u=0.0):
    x = np.asarray(x, dtype=np.float64)
    force = float(np.sum(u)) if np.size(u) else 0.0
    return np.array([x[1], (-params.b * x[1] - params.k * x[0] + force) / params.m])


def mass_spring_step(params: MassSpringParams, x, dt: float, u=0.0):
    """One explicit Euler step; ``u`` is an optional force on the mass."""
    if not dt > 0:
        raise ConfigurationError("dt must be > 0")
    x = np.asarray(x, dtype=np.float64)
    return x + dt * mass_spring_rhs(params, x, u)


def cartpole_rhs(params: CartpoleParams, x, u):
    """Frictionless cartpole, state ``[p, p_dot, theta, theta_dot]`` with
    ``theta = 0`` upright."""
    _, p_dot, th, th_dot = np.asarray(x, dtype=np.float64)
    force = float(np.ravel(u)[0]) if np.size(u) else 0.0
    total = params.cart_mass + params.pole_mass
    ml = params.pole_mass * params.pole_length
    s, c = np.sin(th), np.cos(th)
    temp = (force + ml * th_dot * th_dot * s) / total
    th_acc = (params.gravity * s - c * temp) / (params.pole_length * (4.0 / 3.0 - params.pole_mass * c * c / total))
    p_acc = temp - ml * th_acc * c / total
    return np.array([p_dot, p_acc, th_dot, th_acc])


def cartpole_step(params: CartpoleParams, x, u, dt: float):
    if not dt > 0:
        raise ConfigurationError("dt must be > 0")
    u = np.clip(np.ravel(np.asarray(u, dtype=np.float64)), -params.u_max, params.u_max)
    x = np.asarray(x, dtype=np.float64)
    return x + dt * cartpole_rhs(params, x, u)


def wrap_angle(theta):
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


# Datasets


@dataclass
class Trajectory:
    t: np.ndarray  # (T,)
    x: np.ndarray  # (T, n)
    u: np.ndarray  # (T, m)

    def __len__(self):
        return len(self.t)


@dataclass
class Dataset:
    dt: float
    state_dim: int
    control_dim: int
    trajectories: list[Trajectory] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dt": float(self.dt),
            "state_dim": int(self.state_dim),
            "control_dim": int(self.control_dim),
            "trajectories": [
                {"t": tr.t.tolist(), "x": tr.x.tolist(), "u": tr.u.tolist()} for tr in self.trajectories
            ],
        }

    @classmethod
    def from_dict(cls, doc) -> "Dataset":
        try:
            n, m = int(doc["state_dim"]), int(doc["control_dim"])
            trajs = []
            for tr in doc["trajectories"]:
                t = np.asarray(tr["t"], dtype=np.float64)
                x = np.asarray(tr["x"], dtype=np.float64).reshape(len(t), n)
                u = np.asarray(tr["u"], dtype=np.float64).reshape(len(t), m)
                trajs.append(Trajectory(t, x, u))
            return cls(float(doc["dt"]), n, m, trajs)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed dataset document: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(self.dt, self.state_dim, self.control_dim, [self.trajectories[i] for i in indices])

    @property
    def n_points(self) -> int:
        return sum(len(tr) for tr in self.trajectories)

    def states(self) -> np.ndarray:
        if not self.trajectories:
            return np.zeros((0, self.state_dim))
        return np.concatenate([tr.x for tr in self.trajectories], axis=0)

    def controls(self) -> np.ndarray:
        if not self.trajectories:
            return np.zeros((0, self.control_dim))
        return np.concatenate([tr.u for tr in self.trajectories], axis=0)


@dataclass(frozen=True)
class GenConfig:
    n_trajectories: int = 5
    duration: float = 5.0
    dt: float = 0.01
    noise_std: tuple[float, ...] = (0.005, 0.01)
    init_low: tuple[float, ...] = (-0.1, -0.1)
    init_high: tuple[float, ...] = (0.1, 0.1)
    control_policy: str = "none"  # none | uniform_random | scripted
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("dt must be > 0")
        if self.n_trajectories < 0 or self.duration < 0:
            raise ConfigurationError("n_trajectories and duration must be >= 0")
        if any(s < 0 for s in self.noise_std):
            raise ConfigurationError("noise_std entries must be >= 0")
        if len(self.init_low) != len(self.init_high) or any(
            lo > hi for lo, hi in zip(self.init_low, self.init_high)
        ):
            raise ConfigurationError("init region bounds must pair up with low <= high")
        if self.control_policy not in ("none", "uniform_random", "scripted"):
            raise ConfigurationError(f"unknown control policy {self.control_policy!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))


SYSTEMS = ("mass_spring", "cartpole")


def system_dims(system: str) -> tuple[int, int]:
    if system == "mass_spring":
        return 2, 0
    if system == "cartpole":
        return 4, 1
    raise ConfigurationError(f"unknown system {system!r}; expected one of {SYSTEMS}")


def energy_pumping_control(params: CartpoleParams, x, gain: float = 6.0) -> float:
    """Swing-up heuristic: push energy toward the upright level, then hold."""
    _, p_dot, th, th_dot = x
    ml = params.pole_mass * params.pole_length
    energy = 0.5 * ml * params.pole_length * th_dot**2 + ml * params.gravity * (np.cos(th) - 1.0)
    u = gain * energy * th_dot * np.cos(th) - 0.5 * p_dot
    return float(np.clip(-u * 40.0, -params.u_max, params.u_max))


def simulate(system: str, x0, controls, dt: float, params=None) -> np.ndarray:
    """Clean trajectory of ``len(controls) + 1`` states under held controls."""
    x = np.asarray(x0, dtype=np.float64)
    out = [x]
    for u in controls:
        if system == "mass_spring":
            x = mass_spring_step(params or MassSpringParams(), x, dt, u)
        else:
            x = cartpole_step(params or CartpoleParams(), x, u, dt)
        out.append(x)
    return np.stack(out)


def generate_dataset(system: str, cfg: GenConfig, params=None) -> Dataset:
    """Simulate ``cfg.n_trajectories`` trajectories with Euler steps and add
    Gaussian observation noise to the recorded states (controls stay clean)."""
    n, m = system_dims(system)
    if params is None:
        params = MassSpringParams() if system == "mass_spring" else CartpoleParams()
    if len(cfg.init_low) != n:
        raise ConfigurationError(f"init region has {len(cfg.init_low)} dims, system state has {n}")
    noise = np.broadcast_to(np.asarray(cfg.noise_std, dtype=np.float64), (n,))
    rng = np.random.default_rng(cfg.seed)
    T = cfg.n_steps
    t = np.arange(T + 1) * cfg.dt
    trajs = []
    for _ in range(cfg.n_trajectories):
        x = rng.uniform(cfg.init_low, cfg.init_high)
        xs = [x]
        us = []
        for _ in range(T + 1):
            if m == 0 or cfg.control_policy == "none":
                u = np.zeros(m)
            elif cfg.control_policy == "uniform_random":
                u = rng.uniform(-params.u_max, params.u_max, size=m)
            else:
                u = np.array([energy_pumping_control(params, x)])
            us.append(u)
            if len(xs) <= T:
                if system == "mass_spring":
                    x = mass_spring_step(params, x, cfg.dt, u)
                else:
                    x = cartpole_step(params, x, u, cfg.dt)
                xs.append(x)
        xs = np.stack(xs)
        xs = xs + rng.normal(size=xs.shape) * noise
        trajs.append(Trajectory(t.copy(), xs, np.stack(us).reshape(T + 1, m)))
    return Dataset(cfg.dt, n, m, trajs)


def shape_point_cloud(shape: str, n_points: int, seed: int, jitter: float = 0.002) -> np.ndarray:
    """Points along a circle (radius 0.1) or a figure-eight (Gerono
    lemniscate, half-width 0.12), evenly spaced in the curve parameter with a
    random phase, plus Gaussian jitter."""
    rng = np.random.default_rng(seed)
    t = 2 * np.pi * (np.arange(n_points) + rng.uniform()) / max(n_points, 1)
    pts = curve_points(shape, t)
    return pts + rng.normal(scale=jitter, size=pts.shape)


def curve_points(shape: str, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if shape == "circle":
        return 0.1 * np.stack([np.cos(t), np.sin(t)], axis=-1)
    if shape == "figure_eight":
        return 0.12 * np.stack([np.sin(t), np.sin(t) * np.cos(t)], axis=-1)
    raise ConfigurationError(f"unknown shape {shape!r}; expected circle or figure_eight")


def point_cloud_dataset(points: np.ndarray, dt: float = 1.0) -> Dataset:
    """Wrap a point cloud as one uncontrolled trajectory."""
    points = np.asarray(points, dtype=np.float64)
    return Dataset(dt, points.shape[1], 0, [Trajectory(np.arange(len(points)) * dt, points, np.zeros((len(points), 0)))])


def coverage_percentiles(dataset: Dataset, q: float = 95.0) -> dict:
    """Per-dimension percentile of |state| and |control| over the dataset."""
    out = {}
    if dataset.n_points:
        out["state_abs_p"] = np.percentile(np.abs(dataset.states()), q, axis=0).tolist()
        out["state_abs_max"] = np.abs(dataset.states()).max(axis=0).tolist()
        if dataset.control_dim:
            out["control_abs_p"] = np.percentile(np.abs(dataset.controls()), q, axis=0).tolist()
    return out


def reference_from_dict(doc, state_dim: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Parse a reference track document ``{"t": [...], "x": [[...], ...]}``."""
    try:
        t = np.asarray(doc["t"], dtype=np.float64)
        x = np.asarray(doc["x"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"malformed reference: {exc}") from exc
    if t.ndim != 1 or x.ndim != 2 or len(t) != len(x) or len(t) == 0:
        raise ConfigurationError("reference needs t of shape (T,) and x of shape (T, n)")
    if state_dim is not None and x.shape[1] != state_dim:
        raise ConfigurationError(f"reference state dim {x.shape[1]} != model state dim {state_dim}")
    if np.any(np.diff(t) <= 0):
        raise ConfigurationError("reference times must be strictly increasing")
    return t, x
