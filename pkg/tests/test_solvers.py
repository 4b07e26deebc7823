import csv

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import linear_sde, perturbed, small_model
from neuralsde.diffcore import central_differences, stream_key
from neuralsde.errors import ConfigurationError, IntegrationDiverged
from neuralsde.model import AnalyticSde, as_ode
from neuralsde.solvers import SolverConfig, fit_order, rollout, sdesolve, strong_error, wiener_increments


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SolverConfig(dt=0)
    with pytest.raises(ConfigurationError):
        SolverConfig(horizon=0)
    with pytest.raises(ConfigurationError):
        SolverConfig(scheme="rk4")


def test_deterministic_exponential_decay():
    b = sdesolve(linear_sde(-1.0, 0.0), [1.0], None, SolverConfig("euler_maruyama", 0.01, 100, 4))
    assert abs(b.paths[0, -1, 0] - np.exp(-1)) < 2e-3
    assert np.all(b.paths == b.paths[0])
    assert b.paths.shape == (4, 101, 1)
    np.testing.assert_allclose(b.times[-1], 1.0)


def test_ou_moments():
    b = sdesolve(linear_sde(-1.0, 0.5), [1.0], None, SolverConfig("euler_maruyama", 0.005, 200, 20000, seed=1))
    xT = b.paths[:, -1, 0]
    se = xT.std(ddof=1) / np.sqrt(len(xT))
    assert abs(xT.mean() - np.exp(-1)) < 3 * se
    var_exact = 0.25 * (1 - np.exp(-2)) / 2
    assert abs(xT.var(ddof=1) / var_exact - 1) < 0.05


def test_same_inputs_identical_bundle():
    m = perturbed(small_model())
    cfg = SolverConfig("milstein_df", 0.01, 20, 3, seed=9)
    a = sdesolve(m, [0.1, 0.2], None, cfg)
    b = sdesolve(m, [0.1, 0.2], None, cfg)
    assert a.paths.tobytes() == b.paths.tobytes()


def test_initial_state_shared():
    m = perturbed(small_model())
    b = sdesolve(m, [0.1, -0.2], None, SolverConfig("euler_maruyama", 0.01, 5, 7))
    np.testing.assert_array_equal(b.paths[:, 0, :], np.tile([0.1, -0.2], (7, 1)))


def test_divergence_reports_step():
    blowup = AnalyticSde(lambda x, u: x * x * 1e3, lambda x, u: jnp.zeros_like(x), 1)
    with pytest.raises(IntegrationDiverged) as exc:
        sdesolve(blowup, [1.0], None, SolverConfig("euler_ode", 0.1, 20))
    assert exc.value.step >= 1


def test_controls_length_checked():
    m = small_model(control_dim=1)
    with pytest.raises(ConfigurationError):
        sdesolve(m, [0.0, 0.0], np.zeros((3, 1)), SolverConfig(horizon=4))


def test_zero_order_hold_controls():
    sys_ = AnalyticSde(lambda x, u: u, lambda x, u: jnp.zeros_like(x), 1, 1)
    b = sdesolve(sys_, [0.0], np.array([[1.0], [2.0], [3.0]]), SolverConfig("euler_ode", 0.5, 3))
    np.testing.assert_allclose(b.paths[0, :, 0], [0.0, 0.5, 1.5, 3.0])


@given(st.integers(0, 10**6), st.sampled_from(["euler_maruyama", "milstein_df"]))
def test_zero_diffusion_equals_ode_bit_exactly(seed, scheme):
    m = as_ode(perturbed(small_model(), seed=seed % 50))
    x0 = np.random.default_rng(seed).normal(scale=0.3, size=2)
    ode = sdesolve(m, x0, None, SolverConfig("euler_ode", 0.02, 15, 2, seed))
    sde = sdesolve(m, x0, None, SolverConfig(scheme, 0.02, 15, 2, seed))
    assert ode.paths.tobytes() == sde.paths.tobytes()


# the diffusion level enters as the held control so the solver is traced once
CONST_DIFFUSION = AnalyticSde(lambda x, u: jnp.sin(x), lambda x, u: u[0] * jnp.ones_like(x), 2, 1)


@given(st.integers(0, 10**6), st.floats(0.01, 1.0))
def test_constant_diffusion_milstein_equals_em(seed, s):
    cfg = dict(dt=0.01, horizon=30, n_particles=3, seed=seed)
    u = np.full((30, 1), s)
    em = sdesolve(CONST_DIFFUSION, [0.1, 0.5], u, SolverConfig("euler_maruyama", **cfg)).paths
    mil = sdesolve(CONST_DIFFUSION, [0.1, 0.5], u, SolverConfig("milstein_df", **cfg)).paths
    per_step = np.abs(np.diff(mil - em, axis=1)).max()
    assert per_step <= 1e-10


@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 4))
def test_particle_streams_are_prefix_stable(seed, p, extra):
    key = stream_key(seed)
    w_small = np.asarray(wiener_increments(key, p, 10, 2, 0.01))
    w_big = np.asarray(wiener_increments(key, p + extra, 10, 2, 0.01))
    assert w_small.tobytes() == w_big[:p].tobytes()
    m = perturbed(small_model())
    small = sdesolve(m, [0.0, 0.1], None, SolverConfig("euler_maruyama", 0.01, 10, p, seed)).paths
    big = sdesolve(m, [0.0, 0.1], None, SolverConfig("euler_maruyama", 0.01, 10, p + extra, seed)).paths
    # batched kernels may round differently for other particle counts
    np.testing.assert_allclose(small, big[:p], rtol=0, atol=1e-14)


@pytest.mark.parametrize("scheme", ["euler_maruyama", "milstein_df"])
def test_path_gradient_matches_finite_differences(scheme):
    m = perturbed(small_model(control_dim=1), seed=1)
    noise = wiener_increments(stream_key(4), 1, 10, 2, 0.05)[0]
    x0 = jnp.array([0.2, -0.1])
    controls = jnp.linspace(-0.5, 0.5, 10).reshape(10, 1)

    @jax.jit
    def f(values, x0, controls):
        mm = m.with_params(m.params.with_values(values))
        path = rollout(mm, x0, controls, noise, scheme, 0.05)
        return jnp.sum(jnp.sin(path))

    args = [m.params.values, x0, controls]
    for i in range(3):
        g = np.asarray(jax.grad(f, argnums=i)(*args)).reshape(-1)

        def fi(v, i=i):
            a = list(args)
            a[i] = jnp.asarray(v).reshape(np.shape(args[i]))
            return f(*a)

        fd = central_differences(fi, np.asarray(args[i]).reshape(-1))
        big = np.abs(g) > 1e-8
        np.testing.assert_allclose(g[big], fd[big], rtol=1e-4)


def test_gbm_strong_orders():
    dts = (1 / 64, 1 / 128, 1 / 256)
    em = fit_order(dts, strong_error("euler_maruyama", dt_list=dts, n_paths=2000))
    mil = fit_order(dts, strong_error("milstein_df", dt_list=dts, n_paths=2000))
    assert 0.35 <= em <= 0.65
    assert 0.85 <= mil <= 1.15


def test_gbm_without_noise_schemes_coincide():
    dts = (1 / 16, 1 / 32)
    e_ode = strong_error("euler_ode", b=0.0, dt_list=dts, n_paths=10)
    e_em = strong_error("euler_maruyama", b=0.0, dt_list=dts, n_paths=10)
    e_mil = strong_error("milstein_df", b=0.0, dt_list=dts, n_paths=10)
    np.testing.assert_array_equal(e_ode, e_em)
    np.testing.assert_array_equal(e_ode, e_mil)


def test_fit_order_exact_power_law():
    dts = np.array([0.1, 0.05, 0.025])
    assert fit_order(dts, 3 * dts**1.5) == pytest.approx(1.5)


def test_path_csv(tmp_path):
    b = sdesolve(linear_sde(-1.0, 0.1), [1.0], None, SolverConfig("euler_maruyama", 0.1, 3, 2))
    b.to_csv(tmp_path / "p.csv")
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["particle", "step", "t", "x_0"]
    assert len(rows) == 1 + 2 * 4
