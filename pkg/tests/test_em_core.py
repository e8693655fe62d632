import warnings

import numpy as np
import pytest

from emdynamics.em_core import (
    InnerAscentConfig,
    SolverConfig,
    TerminalStatus,
    Trajectory,
    constrained_q_maximize,
    delta_em_step,
    em_step,
    initialize,
    run,
)
from emdynamics.errors import InvalidParameterError, NumericalError
from emdynamics.models import (
    Dataset,
    MixtureParams,
    ModelSpec,
    log_likelihood,
    m_step,
    posterior_kl,
    q_function,
)
from emdynamics.stability import numeric_gradient
from emdynamics.utils import make_rng

from .create_mixture_data import (
    collapsed_point,
    means_only_spec,
    random_params,
    symmetric_bimodal_data,
    two_cluster_data,
)


def loglik_gradient_norm(spec, theta, data):
    basis = spec.tangent_basis()
    center = theta.flatten()

    def chart(z):
        return log_likelihood(spec, spec.unflatten(center + basis @ z), data)

    return np.linalg.norm(numeric_gradient(chart, np.zeros(basis.shape[1])))


def ball_grid_argmax(spec, theta_k, data, delta, resolution=1e-3):
    """Brute force maximizer of Q(., theta_k) over the ball, for means-only models."""
    center = theta_k.means[:, 0]
    offsets = np.arange(-delta, delta + resolution / 2, resolution)
    best, best_q = None, -np.inf
    for dx in offsets:
        for dy in offsets:
            if dx * dx + dy * dy > delta * delta:
                continue
            means = (center + np.array([dx, dy]))[:, None]
            candidate = MixtureParams(
                weights=theta_k.weights, means=means, log_variances=theta_k.log_variances
            )
            q = q_function(spec, candidate, theta_k, data)
            if q > best_q:
                best, best_q = candidate, q
    return best, best_q


def test_em_step_is_m_step():
    spec, truth, data = two_cluster_data(n=50)
    theta = initialize(spec, data, seed=1)
    assert np.array_equal(em_step(spec, theta, data).flatten(), m_step(spec, theta, data).flatten())


def test_symmetric_fixed_point_is_preserved():
    data = symmetric_bimodal_data()
    spec = ModelSpec("gaussian-diag", 2, 1)
    theta = collapsed_point(data)
    out = em_step(spec, theta, data)
    assert np.linalg.norm(out.flatten() - theta.flatten()) <= 1e-10


def test_single_component_reaches_mle_in_one_step():
    spec = ModelSpec("gaussian-diag", 1, 1)
    data = Dataset(make_rng(9).normal(2.0, 3.0, size=60))
    start = MixtureParams.gaussian([1.0], [[-5.0]], [[0.1]])
    out = em_step(spec, start, data)
    assert out.means[0, 0] == pytest.approx(data.observations.mean(), rel=1e-13)
    assert out.variances[0, 0] == pytest.approx(data.observations.var(), rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_ascent_with_kl_along_em_runs(seed):
    spec, _, data = two_cluster_data(n=60, seed=seed)
    trajectory = run(spec, initialize(spec, data, seed), data, SolverConfig(max_iters=200))
    assert np.all(trajectory.ascent_slack[:-1] >= -1e-9)
    lls = trajectory.logliks
    assert np.all(lls[1:] >= lls[:-1] - 1e-12 * (1 + np.abs(lls[:-1])))


def test_ascent_inequality_for_random_points():
    spec = ModelSpec("gaussian-diag", 3, 2)
    rng = make_rng(12)
    data = Dataset(rng.normal(size=(40, 2)))
    for _ in range(50):
        theta = random_params(spec, rng)
        nxt = em_step(spec, theta, data)
        slack = (
            log_likelihood(spec, nxt, data)
            - log_likelihood(spec, theta, data)
            - posterior_kl(spec, theta, nxt, data)
        )
        assert slack >= -1e-9


def test_inactive_constraint_reproduces_em_step_exactly():
    spec, _, data = two_cluster_data(n=80)
    theta = initialize(spec, data, seed=3)
    plain = em_step(spec, theta, data)
    constrained = delta_em_step(spec, theta, data, delta=1e6)
    assert np.array_equal(plain.flatten(), constrained.flatten())


@pytest.mark.parametrize("delta", [0.3, 0.1, 0.02])
def test_delta_step_matches_ball_grid_search(delta):
    spec = means_only_spec()
    data = Dataset([-2.0, -1.5, 1.0, 2.5])
    theta_k = MixtureParams.gaussian([0.5, 0.5], [[-0.5], [0.5]], [[1.0], [1.0]])
    out = delta_em_step(spec, theta_k, data, delta)
    assert np.linalg.norm(out.flatten() - theta_k.flatten()) <= delta + 1e-12
    q_center = q_function(spec, theta_k, theta_k, data)
    q_out = q_function(spec, out, theta_k, data)
    assert q_out > q_center
    _, best_q = ball_grid_argmax(spec, theta_k, data, delta, resolution=delta / 50)
    assert q_out >= best_q - 1e-6


def test_one_parameter_model_moves_to_ball_boundary():
    spec = ModelSpec("gaussian-diag", 1, 1, frozen=("variances",))
    data = Dataset([4.0, 5.0, 6.0])
    theta_k = MixtureParams.gaussian([1.0], [[0.0]], [[1.0]])
    out = constrained_q_maximize(spec, theta_k, data, 0.25, InnerAscentConfig())
    assert out.means[0, 0] == pytest.approx(0.25, abs=1e-12)
    assert out.variances[0, 0] == 1.0


def test_local_maximizer_is_a_delta_em_equilibrium():
    spec, truth, data = two_cluster_data(n=200)
    trajectory = run(spec, truth, data, SolverConfig(step_tol=1e-12, max_iters=5000))
    theta_star = trajectory.final
    out = delta_em_step(spec, theta_star, data, 1e-3)
    assert np.linalg.norm(out.flatten() - theta_star.flatten()) <= 1e-10
    assert np.linalg.norm(em_step(spec, theta_star, data).flatten() - theta_star.flatten()) <= 1e-10


def test_radial_projection_is_accepted_without_inner_steps():
    spec = means_only_spec()
    data = Dataset([-1.0, 1.0])
    theta_k = MixtureParams.gaussian([0.5, 0.5], [[-0.5], [0.5]], [[1.0], [1.0]])
    out = constrained_q_maximize(
        spec, theta_k, data, 1e-3, InnerAscentConfig(max_steps=0, init_step=1e-3)
    )
    assert not out.stalled
    assert np.linalg.norm(out.flatten() - theta_k.flatten()) == pytest.approx(1e-3, rel=1e-9)
    assert q_function(spec, out, theta_k, data) > q_function(spec, theta_k, theta_k, data)


def test_fixed_point_start_converges_at_first_step():
    data = symmetric_bimodal_data()
    spec = ModelSpec("gaussian-diag", 2, 1)
    trajectory = run(spec, collapsed_point(data), data, SolverConfig(step_tol=1e-10))
    assert trajectory.status == TerminalStatus.CONVERGED
    assert trajectory.n_iters == 1
    assert trajectory.step_norms[1] < 1e-10


def test_well_separated_run_converges_to_stationary_point():
    spec, truth, data = two_cluster_data(n=200)
    start = MixtureParams.gaussian([0.4, 0.6], [[-2.5], [2.5]], [[1.5], [0.8]])
    trajectory = run(spec, start, data, SolverConfig(step_tol=1e-10))
    assert trajectory.status == TerminalStatus.CONVERGED
    assert not spec.floors_active(trajectory.final)
    assert loglik_gradient_norm(spec, trajectory.final, data) <= 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_converged_runs_are_stationary(seed):
    spec, _, data = two_cluster_data(n=200, seed=seed)
    config = SolverConfig(step_tol=1e-10, max_iters=5000)
    trajectory = run(spec, initialize(spec, data, seed), data, config)
    if trajectory.status != TerminalStatus.CONVERGED or spec.floors_active(trajectory.final):
        pytest.skip("run did not converge to an interior point")
    assert loglik_gradient_norm(spec, trajectory.final, data) <= 1e-5


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("delta", [1e-1, 1e-2, 1e-3])
def test_delta_em_feasibility_and_gem_ascent(seed, delta):
    spec, _, data = two_cluster_data(n=60, seed=seed)
    config = SolverConfig(max_iters=30, delta=delta)
    trajectory = run(spec, initialize(spec, data, seed), data, config)
    assert np.all(trajectory.step_norms <= delta + 1e-12)
    assert np.all(trajectory.q_gain[:-1] >= -1e-12)
    lls = trajectory.logliks
    assert np.all(lls[1:] >= lls[:-1] - 1e-12 * (1 + np.abs(lls[:-1])))


def test_runs_are_deterministic():
    spec, _, data = two_cluster_data(n=100)
    first = run(spec, initialize(spec, data, 5), data, SolverConfig(delta=0.05, max_iters=40))
    second = run(spec, initialize(spec, data, 5), data, SolverConfig(delta=0.05, max_iters=40))
    assert first.to_frame().equals(second.to_frame())


def test_trajectory_frame_roundtrip():
    spec, _, data = two_cluster_data(n=50)
    trajectory = run(spec, initialize(spec, data, 0), data, SolverConfig(max_iters=5))
    frame = trajectory.to_frame()
    assert list(frame.columns[:6]) == ["k", "loglik", "step_norm", "ascent_slack", "kl_to_next", "q_gain"]
    assert np.isnan(frame["kl_to_next"].iloc[-1])
    again = Trajectory.from_frame(frame, spec, trajectory.status)
    assert np.array_equal(again.thetas, trajectory.thetas)


def test_non_finite_likelihood_aborts_with_iterate():
    spec = ModelSpec("gaussian-diag", 1, 1)
    data = Dataset([0.0, 1e200])
    theta = MixtureParams.gaussian([1.0], [[0.0]], [[1.0]])
    with pytest.raises(NumericalError, match="iterate 0"):
        run(spec, theta, data)


@pytest.mark.parametrize(
    "kwargs",
    [dict(max_iters=0), dict(step_tol=0.0), dict(delta=-1.0)],
)
def test_invalid_solver_configs(kwargs):
    with pytest.raises(InvalidParameterError):
        SolverConfig(**kwargs)


def test_solver_config_from_defaults():
    from emdynamics.configs import DEFAULT_SOLVER_CONFIG

    config = SolverConfig.from_config(DEFAULT_SOLVER_CONFIG)
    assert config.max_iters == 1000
    assert config.step_tol == 1e-10
    assert config.delta is None
    assert config.inner_ascent == InnerAscentConfig(200, None, 0.5, 1e-10)


def test_monotone_runs_emit_no_warnings():
    spec, _, data = two_cluster_data(n=80, seed=2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        run(spec, initialize(spec, data, 2), data, SolverConfig(max_iters=100))
