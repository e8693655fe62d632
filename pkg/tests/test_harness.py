import numpy as np
import pytest
from omegaconf import OmegaConf

from emdynamics.configs import DEFAULT_BASIN_CONFIG
from emdynamics.em_core import SolverConfig, run
from emdynamics.errors import InvalidParameterError, InvalidStateError
from emdynamics.harness import (
    DIVERGED,
    MapSystem,
    basin_sample,
    build_system,
    em_map_system,
    find_limit_points,
    iterate_map,
)
from emdynamics.models import Dataset, MixtureParams, ModelSpec
from emdynamics.utils import make_rng

from .create_mixture_data import two_cluster_data


@pytest.fixture(scope="module")
def fitted():
    spec, truth, data = two_cluster_data(n=200)
    trajectory = run(spec, truth, data, SolverConfig(step_tol=1e-12, max_iters=5000))
    return spec, trajectory.final, data


def halving_system(dimension=2):
    return MapSystem(dimension=dimension, step=lambda x: 0.5 * x, label="halving")


def tanh_system():
    return MapSystem(dimension=1, step=lambda x: np.tanh(2.0 * x), label="tanh")


def test_identity_map_stops_after_one_step():
    system = MapSystem(dimension=2, step=lambda x: x)
    states = iterate_map(system, np.array([1.0, 2.0]), n=100, stop_tol=1e-10)
    assert len(states) == 2
    assert np.array_equal(states[1], states[0])


def test_halving_map_reaches_the_origin():
    states = iterate_map(halving_system(), np.array([1.0, -1.0]), n=1000, stop_tol=1e-10)
    assert np.linalg.norm(states[-1]) < 1e-10
    np.testing.assert_allclose(states[3], np.array([1.0, -1.0]) / 8)


def test_iteration_budget_is_respected():
    states = iterate_map(halving_system(), np.ones(2), n=5, stop_tol=1e-10)
    assert len(states) == 6


def test_invalid_state_is_reported_with_its_index():
    def step(x):
        return x + 1.0 if x[0] < 3.0 else np.full_like(x, np.nan)

    system = MapSystem(dimension=1, step=step)
    with pytest.raises(InvalidStateError) as info:
        iterate_map(system, np.zeros(1), n=10, stop_tol=1e-10)
    assert info.value.index == 4
    report = find_limit_points(system, [np.zeros(1)], n=10)
    assert report.assignments == [DIVERGED]
    assert report.limit_points == []


def test_em_map_matches_the_solver():
    spec, _, data = two_cluster_data(n=100, seed=4)
    theta0 = MixtureParams.gaussian([0.3, 0.7], [[-1.0], [1.0]], [[2.0], [2.0]])
    trajectory = run(spec, theta0, data, SolverConfig(step_tol=1e-10, max_iters=500))
    states = iterate_map(em_map_system(spec, data), theta0.flatten(), n=500, stop_tol=1e-10)
    assert np.array_equal(np.vstack(states), trajectory.thetas)


def test_mirrored_initializations(fitted):
    spec, _, data = fitted
    system = em_map_system(spec, data)
    start = MixtureParams.gaussian([0.5, 0.5], [[-2.0], [2.0]], [[1.0], [1.0]])
    inits = [start.flatten(), start.permuted([1, 0]).flatten()]

    raw = find_limit_points(system, inits, canonicalize=False)
    assert len(raw.limit_points) == 2
    assert raw.counts == [1, 1]
    assert raw.assignments == [0, 1]

    merged = find_limit_points(system, inits, canonicalize=True)
    assert len(merged.limit_points) == 1
    assert merged.counts == [2]


def test_fixed_point_initialization(fitted):
    spec, theta_star, data = fitted
    report = find_limit_points(em_map_system(spec, data), [theta_star.flatten()])
    assert report.counts == [1]
    assert report.n_iters == [1]
    assert report.grad_norms[0] <= 1e-5
    assert np.linalg.norm(report.limit_points[0] - theta_star.flatten()) <= 1e-10


def test_single_gaussian_grid_reaches_the_mle():
    spec = ModelSpec("gaussian-diag", 1, 1)
    data = Dataset(make_rng(1).normal(1.0, 2.0, size=50))
    y = data.observations[:, 0]
    inits = [
        MixtureParams.gaussian([1.0], [[m]], [[v]]).flatten()
        for m in np.linspace(-5.0, 5.0, 5)
        for v in (0.1, 1.0, 10.0)
    ]
    report = find_limit_points(em_map_system(spec, data), inits)
    assert len(report.limit_points) == 1
    assert report.counts == [len(inits)]
    mle = MixtureParams.gaussian([1.0], [[y.mean()]], [[y.var()]]).flatten()
    np.testing.assert_allclose(report.limit_points[0], mle, atol=1e-10)


def test_no_initializations_is_an_error():
    with pytest.raises(InvalidParameterError):
        find_limit_points(halving_system(), [])


@pytest.mark.parametrize("radius", [1e-6, 1e-3])
def test_small_balls_around_a_maximum_return(fitted, radius):
    spec, theta_star, data = fitted
    report = basin_sample(
        em_map_system(spec, data), theta_star.flatten(), radius, n_samples=200, seed=0
    )
    assert report.return_fraction == 1.0
    assert report.return_index == 0
    assert report.n_inits == 200


def test_ball_spanning_two_basins():
    system = tanh_system()
    fixed = iterate_map(system, np.array([1.0]), n=1000, stop_tol=1e-14)[-1]
    assert fixed[0] == pytest.approx(np.tanh(2.0 * fixed[0]), abs=1e-12)
    report = basin_sample(system, fixed, radius=1.5, n_samples=100, seed=3)
    assert 0.0 < report.return_fraction < 1.0
    assert len(report.limit_points) == 2
    assert sum(report.counts) == 100


def test_empty_basin_sample():
    report = basin_sample(halving_system(), np.zeros(2), radius=1.0, n_samples=0, seed=0)
    assert report.return_fraction == 0.0
    assert report.limit_points == []


def test_basin_samples_are_reproducible(fitted):
    spec, theta_star, data = fitted
    system = em_map_system(spec, data)
    first = basin_sample(system, theta_star.flatten(), 1e-3, n_samples=20, seed=5)
    second = basin_sample(system, theta_star.flatten(), 1e-3, n_samples=20, seed=5, n_workers=4)
    assert first.to_dict() == second.to_dict()
    frame = first.to_frame()
    assert list(frame.columns) == ["init", "limit_point", "iterations", "final_grad_norm"]
    assert len(frame) == 20


def test_build_system_from_config():
    spec, _, data = two_cluster_data(n=20)
    system = build_system(DEFAULT_BASIN_CONFIG.system, spec, data)
    assert system.label == "EM"
    assert system.dimension == spec.n_params
    delta_system = build_system(DEFAULT_BASIN_CONFIG.system, spec, data, delta=0.1)
    assert delta_system.label == "delta-EM(delta=0.1)"


def test_build_system_rejects_other_targets():
    spec, _, data = two_cluster_data(n=20)
    node = OmegaConf.create({"_target_": "builtins.slice", "_partial_": True})
    with pytest.raises(InvalidParameterError, match="expected MapSystem"):
        build_system(node, spec, data)


def test_build_system_rejects_unknown_targets():
    spec, _, data = two_cluster_data(n=20)
    node = OmegaConf.create(
        {"_target_": "emdynamics.harness.no_such_factory", "_partial_": True}
    )
    with pytest.raises(InvalidParameterError, match="cannot instantiate"):
        build_system(node, spec, data)
