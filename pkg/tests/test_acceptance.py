"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed in the
terminal summary (and to stdout with ``-s``). Thresholds are asserted as
stated; a miss fails the test.
"""

import dataclasses
import subprocess
import sys
import time
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from conftest import ACCEPTANCE, linear_sde, perturbed, small_model
from neuralsde.config import load_config
from neuralsde.diffcore import ACTIVATIONS, stream_key
from neuralsde.envs import (
    CartpoleParams,
    Trajectory,
    cartpole_step,
    shape_point_cloud,
    generate_dataset,
    point_cloud_dataset,
    simulate,
    wrap_angle,
)
from neuralsde.evaluator import dmap, near_far_split, openloop_report, uncertainty_grid
from neuralsde.losses import Batch, LossConfig, loss_terms
from neuralsde.mpc import ReferenceTrack, run_episode
from neuralsde.solvers import SolverConfig, fit_order, sdesolve, strong_error
from neuralsde.trainer import train

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

pytestmark = pytest.mark.slow


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


@pytest.fixture(autouse=True)
def _record_errors(request):
    yield
    n = int(request.node.name.split("_")[2])
    ACCEPTANCE.setdefault(n, f"criterion {n}: FAIL  (raised before a verdict; see the traceback)")


def train_preset(name: str, seed: int, overrides=()):
    """Generate the preset's data and train its model; returns (cfg, dataset, points, model)."""
    cfg = load_config(CONFIGS / name, overrides, seed=seed)
    if cfg.gen.system in ("circle", "figure_eight"):
        pts = shape_point_cloud(cfg.gen.system, cfg.gen.n_points, cfg.seed, cfg.gen.jitter)
        ds = point_cloud_dataset(pts)
    else:
        ds = generate_dataset(cfg.gen.system, cfg.gen_config(), cfg.physics())
        pts = ds.states()
    model, _ = train(cfg.build_model(), ds, cfg.train_config(), cfg.loss_config(), cfg.solver_config())
    return cfg, ds, pts, model


# 1. Gradient oracle suite

TERMS = ("data", "grad", "convex", "mu")


def _rel_err(g, fd):
    return float(np.linalg.norm(g - fd) / np.linalg.norm(fd))


def _gradient_case(i: int):
    composers = ("blackbox", "velocity-passthrough", "cartpole-affine")
    composer = composers[i % 3]
    n, m = (4, 1) if composer == "cartpole-affine" else (2, i % 2)
    model = perturbed(
        small_model(
            state_dim=n,
            control_dim=m,
            composer=composer,
            activation=ACTIVATIONS[i % 4],
            d_act=ACTIVATIONS[(i + 1 + i // 4) % 4],
            seed=i,
        ),
        scale=0.3,
        seed=i,
    )
    rng = np.random.default_rng(100 + i)
    H = 10
    batch = Batch(jnp.asarray(rng.normal(size=(3, H + 1, n)) * 0.3), jnp.asarray(rng.normal(size=(3, H, m))))
    cfg = LossConfig(alpha=1.0, beta=1.0, gamma=1.0, lam=1.0, rho=0.3, n_convex_pairs=4)
    key = stream_key(i)
    s_diag = jnp.asarray(rng.uniform(0.5, 2.0, size=n))

    def terms(values):
        t = loss_terms(model.with_params(model.params.with_values(values)), batch, cfg, "euler_maruyama", 0.05, key, s_diag)
        return jnp.stack([t[k] for k in TERMS])

    # reverse-mode Jacobian and the central-difference evaluations (step 1e-5)
    # in one compiled call
    @jax.jit
    def both(v, shifted):
        return jax.jacrev(terms)(v), jax.vmap(terms)(shifted)

    v0 = np.asarray(model.params.values)
    h = 1e-5
    eye = np.eye(v0.size) * h
    jac, vals = both(jnp.asarray(v0), jnp.asarray(np.concatenate([v0 + eye, v0 - eye])))
    jac, vals = np.asarray(jac), np.asarray(vals)
    fd = ((vals[: v0.size] - vals[v0.size :]) / (2 * h)).T
    return {k: _rel_err(jac[r], fd[r]) for r, k in enumerate(TERMS)}


def test_criterion_1_gradient_oracle_suite():
    t0 = time.perf_counter()
    worst = {k: 0.0 for k in TERMS}
    for i in range(20):
        for k, v in _gradient_case(i).items():
            worst[k] = max(worst[k], v)
    elapsed = time.perf_counter() - t0
    ok = worst["data"] <= 1e-4 and max(worst["grad"], worst["convex"], worst["mu"]) <= 1e-5 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"worst rel err over 20 configs: {detail} (limits 1e-4 rollout / 1e-5 off-solver); {elapsed:.0f} s")


# 2. Strong order on GBM


def test_criterion_2_integrator_order():
    t0 = time.perf_counter()
    dts = (1 / 32, 1 / 64, 1 / 128, 1 / 256)
    em = fit_order(dts, strong_error("euler_maruyama", 1.0, 0.5, dts, n_paths=4000, seed=0))
    mil = fit_order(dts, strong_error("milstein_df", 1.0, 0.5, dts, n_paths=4000, seed=0))
    elapsed = time.perf_counter() - t0
    ok = 0.35 <= em <= 0.65 and 0.85 <= mil <= 1.15 and elapsed < 180
    verdict(2, ok, f"Euler-Maruyama slope {em:.3f} in [0.35, 0.65], Milstein slope {mil:.3f} in [0.85, 1.15]; {elapsed:.0f} s")


# 3. OU moments


def test_criterion_3_ou_moments():
    t0 = time.perf_counter()
    paths = sdesolve(linear_sde(-1.0, 0.5), [1.0], None, SolverConfig("euler_maruyama", 0.001, 1000, 20000, 0)).paths
    xT = paths[:, -1, 0]
    mean, var = float(xT.mean()), float(xT.var(ddof=1))
    se = np.sqrt(var / xT.size)
    target_var = 0.25 / 2 * (1 - np.exp(-2.0))
    elapsed = time.perf_counter() - t0
    ok = abs(mean - np.exp(-1)) <= 3 * se and abs(var - target_var) <= 0.05 * target_var and elapsed < 60
    verdict(
        3,
        ok,
        f"mean {mean:.5f} vs e^-1 {np.exp(-1):.5f} ({abs(mean - np.exp(-1)) / se:.2f} SE), "
        f"variance {var:.5f} vs {target_var:.4f} ({100 * abs(var / target_var - 1):.2f}%); {elapsed:.0f} s",
    )


# 4. Distance field on the 2-D point clouds


def test_criterion_4_distance_field_on_point_clouds():
    t0 = time.perf_counter()
    rows, ok = [], True
    for shape in ("circle", "figure_eight"):
        for seed in range(3):
            cfg, _, pts, model = train_preset(f"{shape}.yaml", seed)
            fld = dmap(model, cfg.grid(2))
            near, far = near_far_split(fld, pts, cfg.loss.rho)
            d_near, d_far = float(fld.values[near].mean()), float(fld.values[far].mean())
            ok &= d_near < 0.2 and d_far > 0.8
            rows.append(f"{shape}/{seed} near {d_near:.3f} far {d_far:.3f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 600
    verdict(4, ok, f"need near < 0.2 and far > 0.8: {'; '.join(rows)}; {elapsed:.0f} s")


# 5. Mass-spring open-loop prediction and uncertainty ordering


def test_criterion_5_mass_spring_prediction():
    t0 = time.perf_counter()
    cfg, ds, pts, model = train_preset("mass_spring.yaml", 0)
    steps, dt = 800, cfg.gen.dt
    truth = simulate("mass_spring", [0.15, -0.15], np.zeros((steps, 0)), dt, cfg.physics())
    tr = Trajectory(dt * np.arange(steps + 1), truth, np.zeros((steps, 0)))
    solver = SolverConfig(cfg.solver.scheme, dt, 1, cfg.eval.openloop_particles, cfg.seed)
    (rep,) = openloop_report(model, tr, 8.0, solver, 3.0)
    ug = uncertainty_grid(
        model, cfg.grid(2), cfg.eval.horizon_s, cfg.eval.n_particles, SolverConfig(cfg.solver.scheme, dt, 1, cfg.eval.n_particles, cfg.seed)
    )
    near, far = near_far_split(ug, pts, cfg.loss.rho)
    v_near, v_far = float(np.nanmedian(ug.values[near])), float(np.nanmedian(ug.values[far]))
    elapsed = time.perf_counter() - t0
    a, b, c = rep.rmse < 0.05, rep.coverage >= 0.9, v_near < v_far
    verdict(
        5,
        a and b and c and elapsed < 900,
        f"(a) RMSE {rep.rmse:.4f} < 0.05 {'ok' if a else 'MISS'}; "
        f"(b) 3-sigma coverage {rep.coverage:.3f} >= 0.90 {'ok' if b else 'MISS'} (per dim {np.round(rep.coverage_per_dim, 3).tolist()}); "
        f"(c) median variance near {v_near:.3g} < far {v_far:.3g} {'ok' if c else 'MISS'}; {elapsed:.0f} s",
    )


# 6. Cartpole swing-up with MPC on the learned model


def test_criterion_6_cartpole_closed_loop():
    t0 = time.perf_counter()
    cfg, _, _, model = train_preset("cartpole.yaml", 0)
    params = CartpoleParams(**cfg.gen.cartpole.model_dump())
    ref = ReferenceTrack.constant(np.zeros(4), cfg.mpc.episode_s)
    successes, tails = 0, []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x0 = np.array([0.0, 0.0, np.pi + rng.uniform(-0.2, 0.2), 0.0])
        mcfg = dataclasses.replace(cfg.mpc_config(), seed=seed)
        log = run_episode(model, lambda x, u, dt: cartpole_step(params, x, u, dt), ref, mcfg, cfg.mpc.episode_s, x0)
        t = np.asarray(log.t)
        theta = np.abs(wrap_angle(log.states()[:, 2]))
        tail = theta[t >= t[-1] - 2.0 - 1e-9]
        ok = not log.terminated and t[-1] >= cfg.mpc.episode_s - 1e-9 and bool(np.all(tail < 0.2))
        successes += ok
        tails.append(f"{tail.max():.3f}")
    elapsed = time.perf_counter() - t0
    verdict(
        6,
        successes >= 6 and elapsed < 1800,
        f"{successes}/10 episodes with |theta| < 0.2 over the last 2 s (need 6); max tail |theta| per seed {tails}; {elapsed:.0f} s",
    )


# 7. CLI determinism


def test_criterion_7_cli_determinism(tmp_path):
    from test_cli import CART, SPRING, pipeline

    t0 = time.perf_counter()
    mismatched, total = [], 0
    for label, base, seed, with_mpc in (("spring", SPRING, 3, False), ("cartpole", CART, 1, True)):
        a = pipeline(tmp_path / f"{label}_a", base, seed, with_mpc)
        b = pipeline(tmp_path / f"{label}_b", base, seed, with_mpc)
        total += len(a)
        mismatched += [f"{label}:{k}" for k in sorted(set(a) | set(b)) if a.get(k) != b.get(k)]
    elapsed = time.perf_counter() - t0
    verdict(
        7,
        not mismatched,
        f"{total - len(mismatched)}/{total} artifacts byte-identical across reruns of all five commands"
        + (f"; differing: {mismatched}" if mismatched else "")
        + f"; {elapsed:.0f} s",
    )


# 8. Invariant suite


def test_criterion_8_invariant_suite():
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-m", "invariant", "-q", "-p", "no:cacheprovider", str(ROOT / "tests")],
        cwd=ROOT,
        capture_output=True,
        text=True,
    )
    elapsed = time.perf_counter() - t0
    last = [line for line in proc.stdout.strip().splitlines() if line.strip()][-1]
    verdict(8, proc.returncode == 0 and elapsed < 300, f"property/invariant selection: {last}")
