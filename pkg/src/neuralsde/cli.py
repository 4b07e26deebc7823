"""Command-line entry point: ``neuralsde <command> --config PATH --out DIR``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every command writes ``manifest.json`` next to its artifacts with the
resolved config, its hash, the seed and SHA-256 checksums of inputs and
outputs. Outputs depend only on the config, the input files and the seed.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import RunConfig, file_sha256, load_checkpoint, load_config, save_checkpoint
from .envs import (
    Dataset,
    cartpole_step,
    coverage_percentiles,
    shape_point_cloud,
    generate_dataset,
    point_cloud_dataset,
    reference_from_dict,
    wrap_angle,
)
from .errors import ConfigurationError, NeuralSdeError, TrainingDiverged
from .evaluator import dmap, near_far_split, openloop_report, reports_summary, reports_to_csv, uncertainty_grid
from .mpc import ReferenceTrack, run_episode
from .solvers import SolverConfig
from .trainer import train

log = logging.getLogger("neuralsde")

EXIT_USAGE = 1
EXIT_RUNTIME = 2


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _manifest(out: Path, command: str, cfg: RunConfig, inputs: dict, artifacts: list[str], extra=None) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "config": cfg.model_dump(),
        "inputs": {k: {"path": str(v), "sha256": file_sha256(v)} for k, v in sorted(inputs.items())},
        "artifacts": {name: file_sha256(out / name) for name in sorted(artifacts)},
    }
    if extra:
        doc.update(extra)
    _write_json(out / "manifest.json", doc)


def _prepare(config, seed, overrides, out) -> tuple[RunConfig, Path]:
    cfg = load_config(config, overrides, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"{what} {p} does not exist")
    return p


def common(fn):
    fn = click.option("--out", "out", required=True, type=click.Path(file_okay=False), help="Output directory.")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config leaf by dotted path.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Global seed (overrides the config).")(fn)
    fn = click.option("--config", "config", type=click.Path(dir_okay=False), default=None, help="YAML/JSON run config.")(fn)
    return fn


@click.group()
@click.version_option(__version__, prog_name="neuralsde")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Distance-aware neural SDEs: data generation, training, evaluation and MPC."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@common
def gen_data(config, seed, overrides, out):
    """Simulate the configured system (or point cloud) into dataset.json."""
    cfg, out = _prepare(config, seed, overrides, out)
    g = cfg.gen
    if g.system in ("circle", "figure_eight"):
        ds = point_cloud_dataset(shape_point_cloud(g.system, g.n_points, cfg.seed, g.jitter))
    else:
        ds = generate_dataset(g.system, cfg.gen_config(), cfg.physics())
    if not ds.trajectories:
        click.echo("warning: the dataset has no trajectories", err=True)
    ds.save(out / "dataset.json")
    stats = {"trajectories": len(ds.trajectories), "points": ds.n_points, **coverage_percentiles(ds)}
    _write_json(out / "summary.json", stats)
    _manifest(out, "gen-data", cfg, {}, ["dataset.json", "summary.json"])
    click.echo(json.dumps(stats, sort_keys=True))


@main.command("train")
@common
@click.option("--dataset", "dataset_path", required=True, type=click.Path(dir_okay=False))
def train_cmd(config, seed, overrides, out, dataset_path):
    """Fit a model; writes checkpoint.json, history.csv and losses.csv."""
    cfg, out = _prepare(config, seed, overrides, out)
    dataset_path = _existing(dataset_path, "dataset")
    ds = Dataset.load(dataset_path)
    model = cfg.build_model()
    try:
        trained, history = train(model, ds, cfg.train_config(), cfg.loss_config(), cfg.solver_config(), step_log=True)
    except TrainingDiverged as exc:
        _write_json(out / "divergence.json", {"step": exc.step, "diagnostics": exc.diagnostics})
        _manifest(out, "train", cfg, {"dataset": dataset_path}, ["divergence.json"], {"status": "diverged"})
        raise
    save_checkpoint(out / "checkpoint.json", trained, cfg.model)
    history.to_csv(out / "history.csv")
    history.steps_to_csv(out / "losses.csv")
    info = {
        "best_step": history.best_step,
        "best_heldout": history.best_eval,
        "stopped_early": history.stopped_early,
        "skipped_steps": history.divergences,
    }
    _write_json(out / "summary.json", info)
    _manifest(out, "train", cfg, {"dataset": dataset_path}, ["checkpoint.json", "history.csv", "losses.csv", "summary.json"])
    click.echo(json.dumps(info, sort_keys=True))


@main.command("eval-grid")
@common
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--dataset", "dataset_path", default=None, type=click.Path(dir_okay=False), help="Adds near/far statistics.")
def eval_grid(config, seed, overrides, out, checkpoint, dataset_path):
    """Distance field and terminal-variance maps over the configured grid."""
    cfg, out = _prepare(config, seed, overrides, out)
    checkpoint = _existing(checkpoint, "checkpoint")
    model, _ = load_checkpoint(checkpoint)
    inputs = {"checkpoint": checkpoint}
    artifacts = ["dmap.csv", "summary.json"]
    fld = dmap(model, cfg.grid(model.diffusion_spec.selector.dim))
    fld.to_csv(out / "dmap.csv")
    summary = {"dmap": _field_stats(fld.values)}
    var = None
    if _features_are_state(model):
        solver = SolverConfig(cfg.solver.scheme, cfg.solver.dt, 1, cfg.eval.n_particles, cfg.seed)
        var = uncertainty_grid(model, fld.grid, cfg.eval.horizon_s, cfg.eval.n_particles, solver, cfg.eval.control)
        var.to_csv(out / "uncertainty.csv")
        artifacts.append("uncertainty.csv")
        summary["uncertainty"] = _field_stats(var.values)
    else:
        log.info("distance features are not the raw state; uncertainty map skipped")
    if dataset_path is not None:
        dataset_path = _existing(dataset_path, "dataset")
        inputs["dataset"] = dataset_path
        ds = Dataset.load(dataset_path)
        near, far = near_far_split(fld, _feature_points(model, ds), cfg.loss.rho)
        summary["dmap"].update(_near_far(fld.values, near, far))
        if var is not None:
            summary["uncertainty"].update(_near_far(var.values, near, far, np.nanmedian, "median"))
    _write_json(out / "summary.json", summary)
    _manifest(out, "eval-grid", cfg, inputs, artifacts)
    click.echo(json.dumps(summary, sort_keys=True))


def _features_are_state(model) -> bool:
    sel = model.diffusion_spec.selector
    return not sel.trig and sel.indices == tuple(range(model.state_dim))


def _feature_points(model, ds: Dataset) -> np.ndarray:
    import jax
    import jax.numpy as jnp

    x, u = ds.states(), ds.controls()
    return np.asarray(jax.vmap(model.features)(jnp.asarray(x), jnp.asarray(u)))


def _field_stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    finite = v[np.isfinite(v)]
    if finite.size == 0:
        return {"cells": int(v.size), "finite": 0}
    return {"cells": int(v.size), "finite": int(finite.size), "min": float(finite.min()), "max": float(finite.max())}


def _near_far(values, near, far, reduce=np.nanmean, label="mean") -> dict:
    out = {"near_cells": int(near.sum()), "far_cells": int(far.sum())}
    out[f"near_{label}"] = float(reduce(values[near])) if near.any() else None
    out[f"far_{label}"] = float(reduce(values[far])) if far.any() else None
    return out


@main.command("eval-openloop")
@common
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--dataset", "dataset_path", required=True, type=click.Path(dir_okay=False))
def eval_openloop(config, seed, overrides, out, checkpoint, dataset_path):
    """Open-loop prediction windows along one recorded trajectory."""
    cfg, out = _prepare(config, seed, overrides, out)
    checkpoint = _existing(checkpoint, "checkpoint")
    dataset_path = _existing(dataset_path, "dataset")
    model, _ = load_checkpoint(checkpoint)
    ds = Dataset.load(dataset_path)
    k = cfg.eval.trajectory
    if not 0 <= k < len(ds.trajectories):
        raise ConfigurationError(f"eval.trajectory={k} but the dataset has {len(ds.trajectories)} trajectories")
    solver = SolverConfig(cfg.solver.scheme, ds.dt, 1, cfg.eval.openloop_particles, cfg.seed)
    reports = openloop_report(model, ds.trajectories[k], cfg.eval.window_s, solver, cfg.eval.k_sigma)
    reports_to_csv(reports, out / "openloop.csv")
    summary = reports_summary(reports)
    _write_json(out / "openloop.json", summary)
    _manifest(out, "eval-openloop", cfg, {"checkpoint": checkpoint, "dataset": dataset_path}, ["openloop.csv", "openloop.json"])
    click.echo(json.dumps({"mean_rmse": summary["mean_rmse"], "mean_coverage": summary["mean_coverage"]}))


@main.command("mpc")
@common
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--reference", required=True, type=click.Path(dir_okay=False), help='JSON {"t": [...], "x": [[...], ...]}.')
@click.option("--timing", is_flag=True, help="Add solve wall times to the log (not reproducible).")
def mpc_cmd(config, seed, overrides, out, checkpoint, reference, timing):
    """Closed-loop receding-horizon control of the simulated system."""
    cfg, out = _prepare(config, seed, overrides, out)
    checkpoint = _existing(checkpoint, "checkpoint")
    reference = _existing(reference, "reference")
    model, _ = load_checkpoint(checkpoint)
    try:
        doc = json.loads(reference.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"reference {reference} is not valid JSON: {exc}") from exc
    t, x = reference_from_dict(doc, model.state_dim)
    if model.control_dim == 0:
        raise ConfigurationError("the checkpoint models an uncontrolled system; there is nothing to optimise")
    env_step = _env_step(cfg, model)
    mcfg = cfg.mpc_config()
    if len(mcfg.lo) != model.control_dim:
        raise ConfigurationError(f"mpc bounds have {len(mcfg.lo)} entries, model takes {model.control_dim} controls")
    if len(cfg.mpc.x0) != model.state_dim:
        raise ConfigurationError(f"mpc.x0 has {len(cfg.mpc.x0)} entries, model state has {model.state_dim}")
    episode = run_episode(model, env_step, ReferenceTrack(t, x), mcfg, cfg.mpc.episode_s, cfg.mpc.x0)
    episode.to_csv(out / "episode.csv", include_wall_time=timing)
    summary = episode_summary(episode, ReferenceTrack(t, x), cfg)
    _write_json(out / "summary.json", summary)
    _manifest(out, "mpc", cfg, {"checkpoint": checkpoint, "reference": reference}, ["episode.csv", "summary.json"])
    click.echo(json.dumps(summary, sort_keys=True))


def _env_step(cfg: RunConfig, model):
    params = cfg.physics()
    if cfg.gen.system == "cartpole":
        return lambda x, u, dt: cartpole_step(params, x, u, dt)
    raise ConfigurationError(f"no simulator for system {cfg.gen.system!r}")


def episode_summary(episode, ref: ReferenceTrack, cfg: RunConfig) -> dict:
    """Tracking error over the final ``mpc.settle_s`` seconds (angles in
    ``mpc.wrap`` wrapped to [-pi, pi])."""
    xs = episode.states()
    ts = np.asarray(episode.t)
    target = np.stack([np.interp(ts, ref.t, ref.x[:, i]) for i in range(ref.x.shape[1])], axis=1)
    err = xs - target
    for i in cfg.mpc.wrap:
        err[:, i] = wrap_angle(err[:, i])
    tail = ts >= ts[-1] - cfg.mpc.settle_s - 1e-9
    return {
        "steps": int(len(episode.u)),
        "terminated": bool(episode.terminated),
        "final_state": [float(v) for v in xs[-1]],
        "tail_max_abs_error": [float(v) for v in np.abs(err[tail]).max(axis=0)],
    }


def run(argv=None) -> int:
    """Invoke the CLI and translate failures to exit codes."""
    try:
        main.main(args=argv, prog_name="neuralsde", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except ConfigurationError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except (NeuralSdeError, FloatingPointError) as exc:
        click.echo(f"runtime failure: {exc}", err=True)
        return EXIT_RUNTIME
    return 0


def entry() -> None:
    sys.exit(run())
