import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from neuralsde.diffcore import MlpSpec
from neuralsde.model import AnalyticSde, DiffusionSpec, Selector, UnknownTerm, build_model

settings.register_profile(
    "default",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

# Deterministic invariant checks that are not hypothesis tests; together with
# every hypothesis test they form the "invariant" selection (-m invariant).
INVARIANT_TESTS = {
    "test_param_count_formula",
    "test_dmap_stays_inside_unit_interval_when_saturated",
    "test_segments_tile_the_array",
    "test_projection_gradients_per_activation",
    "test_sigmoid_strictly_inside_for_1000_inputs",
    "test_zero_sigma_max_annihilates_diffusion",
    "test_monotone_weights_at_least_one",
    "test_diffusion_bounded_on_ten_thousand_points",
    "test_as_ode_has_zero_diffusion_and_same_drift",
    "test_same_inputs_identical_bundle",
    "test_hinge_inactive_on_quadratic_below_curvature",
    "test_hinge_is_c1_at_zero",
    "test_zero_diffusion_ode_baseline",
    "test_adam_zero_gradient_keeps_params",
    "test_adam_first_step_closed_form",
    "test_adam_two_steps_recurrence",
    "test_same_seed_identical_history_and_no_dataset_mutation",
    "test_best_checkpoint_not_worse_than_final",
    "test_zero_diffusion_zero_variance",
    "test_deterministic_solve_reproducible",
    "test_checkpoint_round_trip_bit_exact",
}

# criterion number -> one-line verdict, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        fn = getattr(item, "function", None)
        if getattr(fn, "is_hypothesis_test", False) or getattr(fn, "__name__", "") in INVARIANT_TESTS:
            item.add_marker(pytest.mark.invariant)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


def small_model(
    state_dim=2,
    control_dim=0,
    composer="blackbox",
    sigma_max=None,
    activation="tanh",
    d_act="swish",
    seed=0,
    hidden=(5,),
    w_raw_init=0.0,
):
    """A small fully specified model; term nets see all of ``[x; u]``."""
    z = tuple(range(state_dim + control_dim))
    sel = Selector(z)
    if composer == "blackbox":
        terms = [UnknownTerm("g", MlpSpec(len(z), hidden, state_dim, activation), sel)]
    elif composer == "velocity-passthrough":
        terms = [UnknownTerm("g", MlpSpec(len(z), hidden, state_dim // 2, activation), sel)]
    else:
        # control-affine: the terms see the state only
        m = control_dim
        xs = Selector(tuple(range(state_dim)))
        terms = [
            UnknownTerm("g1", MlpSpec(state_dim, hidden, 1, activation), xs),
            UnknownTerm("g2", MlpSpec(state_dim, hidden, m, activation), xs),
            UnknownTerm("g3", MlpSpec(state_dim, hidden, 1, activation), xs),
            UnknownTerm("g4", MlpSpec(state_dim, hidden, m, activation), xs),
        ]
    if sigma_max is None:
        sigma_max = tuple(0.1 * (i + 1) for i in range(state_dim))
    diff = DiffusionSpec(
        tuple(sigma_max),
        MlpSpec(len(z), (6,), 1, d_act),
        MlpSpec(len(z), (4,), 1, "tanh"),
        sel,
    )
    return build_model(state_dim, control_dim, composer, terms, diff, seed=seed, w_raw_init=w_raw_init)


def perturbed(model, scale=0.3, seed=0):
    """Same model with nonzero biases everywhere (init leaves them at 0)."""
    rng = np.random.default_rng(seed)
    v = np.asarray(model.params.values) + scale * rng.normal(size=model.params.size)
    return model.with_params(model.params.with_values(jnp.asarray(v)))


def linear_sde(a=-1.0, s=0.0, dim=1):
    return AnalyticSde(lambda x, u: a * x, lambda x, u: s * jnp.ones_like(x), state_dim=dim)


@pytest.fixture
def tiny_model():
    return perturbed(small_model())
