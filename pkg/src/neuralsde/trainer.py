"""Adam training loop with a linear learning-rate ramp and early stopping."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np

from .diffcore import ParamVector, stream_key
from .envs import Dataset
from .errors import ConfigurationError, TrainingDiverged
from .losses import Batch, LossConfig, batch_data_loss, combine, default_s_diag, loss_terms
from .model import NeuralSdeModel
from .solvers import SolverConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    horizon: int = 50
    lr_start: float = 0.01
    lr_end: float = 0.001
    decay_steps: int = 10000
    max_steps: int = 10000
    patience: int = 10
    eval_every: int = 200
    eval_fraction: float = 0.1
    eval_segments: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigurationError("need 0 < lr_end <= lr_start")
        if self.batch_size < 1 or self.horizon < 1 or self.eval_every < 1 or self.patience < 1:
            raise ConfigurationError("batch_size, horizon, eval_every and patience must be >= 1")
        if not 0 <= self.eval_fraction < 1:
            raise ConfigurationError("eval_fraction must lie in [0, 1)")
        if self.max_steps < 0 or self.decay_steps < 0:
            raise ConfigurationError("max_steps and decay_steps must be >= 0")


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ConfigurationError("step must be >= 0")
    if cfg.decay_steps == 0 or step >= cfg.decay_steps:
        return cfg.lr_end
    frac = step / cfg.decay_steps
    return cfg.lr_start + frac * (cfg.lr_end - cfg.lr_start)


# Adam


@jax.tree_util.register_dataclass
@dataclass
class AdamState:
    m: jax.Array
    v: jax.Array
    t: jax.Array
    b1: float = field(default=0.9, metadata=dict(static=True))
    b2: float = field(default=0.999, metadata=dict(static=True))
    eps: float = field(default=1e-8, metadata=dict(static=True))

    @classmethod
    def init(cls, params: ParamVector, b1=0.9, b2=0.999, eps=1e-8) -> "AdamState":
        z = jnp.zeros_like(params.values)
        return cls(z, z, jnp.zeros((), dtype=jnp.int64), b1, b2, eps)


def adam_step(state: AdamState, params: ParamVector, grad: ParamVector, lr):
    """Bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if not params.same_layout(grad):
        raise ConfigurationError("gradient layout does not match parameter layout")
    g = grad.values
    t = state.t + 1
    m = state.b1 * state.m + (1 - state.b1) * g
    v = state.b2 * state.v + (1 - state.b2) * g * g
    m_hat = m / (1 - state.b1**t)
    v_hat = v / (1 - state.b2**t)
    new = params.values - lr * m_hat / (jnp.sqrt(v_hat) + state.eps)
    return params.with_values(new), AdamState(m, v, t, state.b1, state.b2, state.eps)


# Segments


def valid_offsets(dataset: Dataset, horizon: int) -> np.ndarray:
    """(trajectory index, start offset) for every segment of ``horizon``
    transitions that stays inside one trajectory."""
    pairs = [
        (i, o)
        for i, tr in enumerate(dataset.trajectories)
        for o in range(len(tr) - horizon)
    ]
    if not pairs:
        raise ConfigurationError(f"no trajectory has the {horizon + 1} points needed for horizon {horizon}")
    return np.asarray(pairs, dtype=np.int64)


def gather_segments(dataset: Dataset, pairs: np.ndarray, horizon: int) -> Batch:
    xs = np.stack([dataset.trajectories[i].x[o : o + horizon + 1] for i, o in pairs])
    us = np.stack([dataset.trajectories[i].u[o : o + horizon] for i, o in pairs])
    return Batch(jnp.asarray(xs), jnp.asarray(us))


def sample_segments(dataset: Dataset, horizon: int, batch_size: int, seed, offsets=None) -> Batch:
    """Uniform draw (with replacement) over all valid (trajectory, offset)
    pairs. ``seed`` may be an int or a sequence of ints."""
    if offsets is None:
        offsets = valid_offsets(dataset, horizon)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(offsets), size=batch_size)
    return gather_segments(dataset, offsets[idx], horizon)


def split_dataset(dataset: Dataset, eval_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Whole-trajectory split. With ``eval_fraction == 0`` (or a single
    trajectory) the held-out set is the training set itself."""
    n = len(dataset.trajectories)
    if eval_fraction == 0 or n < 2:
        return dataset, dataset
    n_eval = min(n - 1, max(1, int(round(eval_fraction * n))))
    perm = np.random.default_rng([seed, 1]).permutation(n)
    held = sorted(perm[:n_eval].tolist())
    train = sorted(perm[n_eval:].tolist())
    return dataset.subset(train), dataset.subset(held)


# Training loop


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    best_step: Optional[int] = None
    best_eval: float = float("inf")
    stopped_early: bool = False
    divergences: list[int] = field(default_factory=list)

    HEADER = ("step", "lr", "data", "grad", "convex", "mu", "total", "heldout_data")

    def to_csv(self, path) -> None:
        _write_rows(path, self.HEADER, self.rows)

    def steps_to_csv(self, path) -> None:
        _write_rows(path, ("step", "data", "grad", "convex", "mu", "total"), self.steps)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[h] if isinstance(r[h], int) else repr(float(r[h])) for h in header])


def _make_step_fn(model: NeuralSdeModel, loss_cfg: LossConfig, scheme: str, dt: float):
    def objective(params, batch, key, s_diag):
        terms = loss_terms(model.with_params(params), batch, loss_cfg, scheme, dt, key, s_diag)
        return combine(terms, loss_cfg), terms

    @jax.jit
    def train_step(params, opt, batch, key, s_diag, lr):
        (total, terms), g = jax.value_and_grad(objective, has_aux=True)(params, batch, key, s_diag)
        ok = jnp.isfinite(total) & jnp.all(jnp.isfinite(g.values))
        new_params, new_opt = adam_step(opt, params, g, lr)
        return new_params, new_opt, total, terms, ok

    return train_step


def _make_eval_fn(model: NeuralSdeModel, loss_cfg: LossConfig, scheme: str, dt: float):
    """Held-out score per segment: the data loss, or the full objective when
    the data term is switched off (distance-field fitting)."""

    @jax.jit
    def evaluate(params, batch, key, s_diag):
        m = model.with_params(params)
        if loss_cfg.alpha:
            loss = batch_data_loss(m, batch, key, scheme, dt, s_diag)
        else:
            loss = combine(loss_terms(m, batch, loss_cfg, scheme, dt, key, s_diag), loss_cfg)
        return loss / batch.x.shape[0]

    return evaluate


def train(
    model: NeuralSdeModel,
    dataset: Dataset,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    solver_cfg: SolverConfig,
    step_log: bool = False,
):
    """Minimise the joint objective. Returns ``(best_model, history)`` where
    the best model has the lowest held-out data loss seen at an evaluation."""
    if not dataset.trajectories:
        raise ConfigurationError("dataset is empty")
    if dataset.state_dim != model.state_dim or dataset.control_dim != model.control_dim:
        raise ConfigurationError(
            f"dataset dims ({dataset.state_dim}, {dataset.control_dim}) do not match model "
            f"({model.state_dim}, {model.control_dim})"
        )
    history = History()
    if train_cfg.max_steps == 0:
        return model, history

    train_set, held_set = split_dataset(dataset, train_cfg.eval_fraction, train_cfg.seed)
    H = train_cfg.horizon
    offsets = valid_offsets(train_set, H)
    if loss_cfg.s_diag is not None:
        s_diag = jnp.asarray(loss_cfg.s_diag)
    else:
        s_diag = jnp.asarray(default_s_diag([tr.x for tr in train_set.trajectories]))
    held_offsets = valid_offsets(held_set, H)
    if len(held_offsets) > train_cfg.eval_segments:
        pick = np.random.default_rng([train_cfg.seed, 2]).choice(len(held_offsets), train_cfg.eval_segments, replace=False)
        held_offsets = held_offsets[np.sort(pick)]
    held_batch = gather_segments(held_set, held_offsets, H)
    eval_key = stream_key(train_cfg.seed, 3)

    scheme, dt = solver_cfg.scheme, float(solver_cfg.dt)
    train_step = _make_step_fn(model, loss_cfg, scheme, dt)
    evaluate = _make_eval_fn(model, loss_cfg, scheme, dt)

    params = model.params
    opt = AdamState.init(params)
    best_params = params
    lr_scale = 1.0
    consecutive_bad = 0
    since_best = 0
    acc = []

    def record(step, params):
        nonlocal best_params, since_best
        held = float(evaluate(params, held_batch, eval_key, s_diag))
        mean_terms = {k: float(np.mean([a[k] for a in acc])) if acc else float("nan") for k in ("data", "grad", "convex", "mu", "total")}
        history.rows.append({"step": step, "lr": lr_at(step, train_cfg) * lr_scale, **mean_terms, "heldout_data": held})
        acc.clear()
        if np.isfinite(held) and held < history.best_eval:
            history.best_eval = held
            history.best_step = step
            best_params = params
            since_best = 0
        else:
            since_best += 1
        log.info("step %d held-out data loss %.6g", step, held)

    for step in range(train_cfg.max_steps):
        if step % train_cfg.eval_every == 0:
            record(step, params)
            if since_best >= train_cfg.patience:
                history.stopped_early = True
                break
        batch = sample_segments(train_set, H, train_cfg.batch_size, [train_cfg.seed, step], offsets)
        key = stream_key(train_cfg.seed, 0, step)
        lr = lr_at(step, train_cfg) * lr_scale
        new_params, new_opt, total, terms, ok = train_step(params, opt, batch, key, s_diag, lr)
        if not bool(ok):
            history.divergences.append(step)
            consecutive_bad += 1
            log.warning("non-finite loss at step %d; batch skipped", step)
            if consecutive_bad >= 2:
                raise TrainingDiverged(step, {"total": float(total), "lr": lr, "divergences": list(history.divergences)})
            lr_scale *= 0.5
            continue
        consecutive_bad = 0
        params, opt = new_params, new_opt
        row = {k: float(v) for k, v in terms.items()}
        row["total"] = float(total)
        acc.append(row)
        if step_log:
            history.steps.append({"step": step, **row})
    else:
        record(train_cfg.max_steps, params)

    return model.with_params(best_params), history
