"""Run configuration: one YAML/JSON document with a section per component.

Every section rejects unknown keys. Leaf values can be overridden with
dotted paths (``train.max_steps=500``, ``model.terms.0.hidden=[8,8]``).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from .diffcore import ACTIVATIONS, MlpSpec, ParamVector
from .envs import CartpoleParams, GenConfig, MassSpringParams, system_dims
from .errors import ConfigurationError
from .evaluator import GridAxis, GridSpec
from .losses import LossConfig
from .model import DiffusionSpec, NeuralSdeModel, Selector, UnknownTerm, build_model
from .mpc import MpcConfig
from .solvers import SCHEMES, SolverConfig
from .trainer import TrainConfig

Activation = Literal[tuple(ACTIVATIONS)]
System = Literal["mass_spring", "cartpole", "circle", "figure_eight"]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Features(Section):
    indices: list[int]
    trig: list[int] = []

    def selector(self) -> Selector:
        return Selector(tuple(self.indices), tuple(self.trig))


class Net(Section):
    hidden: list[int]
    activation: Activation = "tanh"


class Term(Section):
    name: str
    hidden: list[int]
    activation: Activation = "tanh"
    features: Features


class ModelSection(Section):
    composer: Literal["blackbox", "velocity-passthrough", "cartpole-affine"] = "velocity-passthrough"
    terms: list[Term] = [Term(name="g", hidden=[4, 16], features=Features(indices=[0, 1]))]
    pairs: Optional[list[list[int]]] = None  # velocity-passthrough (position, velocity) index pairs
    sigma_max: list[float] = [0.001, 0.02]
    features: Features = Features(indices=[0, 1])  # input of the distance and mu networks
    d_net: Net = Net(hidden=[32, 32], activation="swish")
    mu_net: Net = Net(hidden=[8, 8], activation="tanh")
    w_raw_init: float = 0.0


class SolverSection(Section):
    scheme: Literal[SCHEMES] = "euler_maruyama"
    dt: float = 0.01
    horizon: int = 50
    n_particles: int = 1


class LossSection(Section):
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 0.01
    lam: float = 1.0
    s_diag: Optional[list[float]] = None
    rho: float = 0.05
    n_convex_pairs: int = 8
    convex_on: Literal["output", "logit"] = "output"


class TrainSection(Section):
    batch_size: int = 128
    lr_start: float = 0.01
    lr_end: float = 0.001
    decay_steps: int = 10000
    max_steps: int = 3000
    patience: int = 10
    eval_every: int = 200
    eval_fraction: float = 0.0
    eval_segments: int = 256


class MassSpringSection(Section):
    m: float = 1.0
    b: float = 0.5
    k: float = 1.0


class CartpoleSection(Section):
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_length: float = 0.5
    gravity: float = 9.81
    u_max: float = 10.0


class GenSection(Section):
    system: System = "mass_spring"
    n_trajectories: int = 5
    duration: float = 5.0
    dt: float = 0.01
    noise_std: list[float] = [0.005, 0.01]
    init_low: list[float] = [-0.1, -0.1]
    init_high: list[float] = [0.1, 0.1]
    control_policy: Literal["none", "uniform_random", "scripted"] = "none"
    n_points: int = 100  # point-cloud systems only
    jitter: float = 0.002
    mass_spring: MassSpringSection = MassSpringSection()
    cartpole: CartpoleSection = CartpoleSection()


class Axis(Section):
    index: int
    lo: float = -0.2
    hi: float = 0.2
    n_cells: int = 41


class EvalSection(Section):
    axes: list[Axis] = [Axis(index=0), Axis(index=1)]
    base: Optional[list[float]] = None  # values of the coordinates that are not gridded
    horizon_s: float = 0.2
    n_particles: int = 100
    control: Optional[list[float]] = None
    window_s: float = 8.0
    openloop_particles: int = 200
    k_sigma: float = 3.0
    trajectory: int = 0


class MpcSection(Section):
    q: list[float] = [1.0, 0.1]
    r: list[float] = [0.01]
    horizon_steps: int = 20
    dt: float = 0.05
    n_particles: int = 1
    lo: list[float] = [-1.0]
    hi: list[float] = [1.0]
    iters: int = 50
    lr0: float = 0.1
    scheme: Literal[SCHEMES] = "euler_maruyama"
    wrap: list[int] = []
    episode_s: float = 10.0
    x0: list[float] = [0.15, -0.15]
    settle_s: float = 2.0  # tail of the episode summarised in the report


class RunConfig(Section):
    seed: int = 0
    model: ModelSection = ModelSection()
    solver: SolverSection = SolverSection()
    loss: LossSection = LossSection()
    train: TrainSection = TrainSection()
    gen: GenSection = GenSection()
    eval: EvalSection = EvalSection()
    mpc: MpcSection = MpcSection()

    # Conversions to the component configs

    @property
    def dims(self) -> tuple[int, int]:
        if self.gen.system in ("circle", "figure_eight"):
            return 2, 0
        return system_dims(self.gen.system)

    def physics(self):
        if self.gen.system == "mass_spring":
            return MassSpringParams(**self.gen.mass_spring.model_dump())
        if self.gen.system == "cartpole":
            return CartpoleParams(**self.gen.cartpole.model_dump())
        return None

    def gen_config(self) -> GenConfig:
        g = self.gen
        return GenConfig(
            n_trajectories=g.n_trajectories,
            duration=g.duration,
            dt=g.dt,
            noise_std=tuple(g.noise_std),
            init_low=tuple(g.init_low),
            init_high=tuple(g.init_high),
            control_policy=g.control_policy,
            seed=self.seed,
        )

    def solver_config(self) -> SolverConfig:
        s = self.solver
        return SolverConfig(s.scheme, s.dt, s.horizon, s.n_particles, self.seed)

    def loss_config(self) -> LossConfig:
        d = self.loss.model_dump()
        d["s_diag"] = None if d["s_diag"] is None else tuple(d["s_diag"])
        return LossConfig(**d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(horizon=self.solver.horizon, seed=self.seed, **self.train.model_dump())

    def mpc_config(self) -> MpcConfig:
        m = self.mpc
        return MpcConfig(
            q=tuple(m.q),
            r=tuple(m.r),
            horizon_steps=m.horizon_steps,
            dt=m.dt,
            n_particles=m.n_particles,
            lo=tuple(m.lo),
            hi=tuple(m.hi),
            iters=m.iters,
            lr0=m.lr0,
            scheme=m.scheme,
            wrap=tuple(m.wrap),
            seed=self.seed,
        )

    def grid(self, dim: int) -> GridSpec:
        base = self.eval.base if self.eval.base is not None else [0.0] * dim
        if len(base) != dim:
            raise ConfigurationError(f"eval.base has {len(base)} entries, expected {dim}")
        axes = tuple(GridAxis(a.index, a.lo, a.hi, a.n_cells) for a in self.eval.axes)
        return GridSpec(axes, tuple(float(b) for b in base))

    def build_model(self) -> NeuralSdeModel:
        return model_from_section(self.model, *self.dims, seed=self.seed)

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.model_dump()).encode()).hexdigest()


def model_from_section(section: ModelSection, state_dim: int, control_dim: int, seed: int = 0) -> NeuralSdeModel:
    # Output sizes of the drift terms are fixed by the composer; build_model checks them.
    out_dims = {"blackbox": {"g": state_dim}, "cartpole-affine": {"g1": 1, "g2": control_dim, "g3": 1, "g4": control_dim}}
    if section.composer == "velocity-passthrough":
        n_pairs = len(section.pairs) if section.pairs is not None else state_dim // 2
        out_dims["velocity-passthrough"] = {"g": n_pairs}
    terms = []
    for t in section.terms:
        sel = t.features.selector()
        out = out_dims[section.composer].get(t.name, 1)
        terms.append(UnknownTerm(t.name, MlpSpec(sel.dim, tuple(t.hidden), out, t.activation), sel))
    fsel = section.features.selector()
    diffusion = DiffusionSpec(
        tuple(section.sigma_max),
        MlpSpec(fsel.dim, tuple(section.d_net.hidden), 1, section.d_net.activation),
        MlpSpec(fsel.dim, tuple(section.mu_net.hidden), 1, section.mu_net.activation),
        fsel,
    )
    options = {"pairs": section.pairs} if section.pairs is not None else None
    return build_model(
        state_dim, control_dim, section.composer, terms, diffusion, seed=seed, options=options, w_raw_init=section.w_raw_init
    )


# Loading and overrides


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for i, key in enumerate(keys):
        last = i == len(keys) - 1
        if isinstance(node, list):
            if not key.isdigit() or int(key) >= len(node):
                raise ConfigurationError(f"override {dotted!r}: no list entry {key!r}")
            key = int(key)
        elif not isinstance(node, dict):
            raise ConfigurationError(f"override {dotted!r}: {'.'.join(keys[:i])!r} is not a section")
        if last:
            node[key] = value
        else:
            if isinstance(node, dict) and key not in node:
                node[key] = {}
            node = node[key]


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigurationError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"override {item!r}: {exc}") from exc
    return key, value


def load_config(path=None, overrides=(), seed: Optional[int] = None) -> RunConfig:
    """Read a YAML/JSON document (or start from defaults), apply dotted
    ``key=value`` overrides, then the seed, and validate."""
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file {p} does not exist")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{p} must hold a mapping at the top level")
    # Overrides apply to the fully defaulted document so list entries can be addressed.
    try:
        full = RunConfig.model_validate(doc).model_dump()
    except ValidationError as exc:
        raise ConfigurationError(_format_errors(exc)) from exc
    for item in overrides:
        key, value = parse_override(item)
        _set_path(full, key, value)
    if seed is not None:
        full["seed"] = int(seed)
    try:
        return RunConfig.model_validate(full)
    except ValidationError as exc:
        raise ConfigurationError(_format_errors(exc)) from exc


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        lines.append(f"{loc}: {err['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


# Checkpoints


CHECKPOINT_FORMAT = "neuralsde.checkpoint/1"


def checkpoint_dict(model: NeuralSdeModel, section: ModelSection) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "state_dim": model.state_dim,
        "control_dim": model.control_dim,
        "model": section.model_dump(),
        "params": model.params.to_dict(),
    }


def save_checkpoint(path, model: NeuralSdeModel, section: ModelSection) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, section), sort_keys=True, indent=1) + "\n")


def load_checkpoint(path) -> tuple[NeuralSdeModel, ModelSection]:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"checkpoint {p} does not exist")
    try:
        doc = json.loads(p.read_text())
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError(f"{p} is not a {CHECKPOINT_FORMAT} document")
        section = ModelSection.model_validate(doc["model"])
        params = ParamVector.from_dict(doc["params"])
        model = model_from_section(section, int(doc["state_dim"]), int(doc["control_dim"]))
    except (KeyError, TypeError, json.JSONDecodeError, ValidationError) as exc:
        raise ConfigurationError(f"malformed checkpoint {p}: {exc}") from exc
    if not model.params.same_layout(params):
        raise ConfigurationError(f"checkpoint {p} parameters do not match its model section")
    return model.with_params(params), section


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def as_float_list(x) -> list[float]:
    return [float(v) for v in np.ravel(x)]
