import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emdynamics.balls import Ball, sample_in_ball, uniquefy_points
from emdynamics.utils import probe_rng


def test_contains_includes_the_boundary():
    ball = Ball(np.zeros(2), 1.0)
    assert np.array([0.6, 0.8]) in ball
    assert np.array([0.0, 0.0]) in ball
    assert np.array([1.0, 1.0]) not in ball


def test_project_keeps_inside_points():
    ball = Ball(np.array([1.0, 1.0]), 2.0)
    point = np.array([2.0, 0.5])
    assert np.array_equal(ball.project(point), point)


def test_project_moves_outside_points_to_the_boundary():
    ball = Ball(np.zeros(2), 1.0)
    np.testing.assert_allclose(ball.project(np.array([3.0, 4.0])), [0.6, 0.8])


def test_project_preserves_the_weight_sum():
    ball = Ball(np.array([0.5, 0.5, 0.0]), 0.1)
    projected = ball.project(np.array([0.9, 0.1, 2.0]))
    assert projected[:2].sum() == pytest.approx(1.0, abs=1e-15)
    assert ball.distance(projected) == pytest.approx(0.1, rel=1e-12)


@settings(deadline=None)
@given(
    dim=st.integers(1, 8),
    radius=st.floats(1e-6, 10.0),
    seed=st.integers(0, 2**16),
)
def test_samples_lie_in_the_ball(dim, radius, seed):
    rng = probe_rng(seed, 0)
    inside = sample_in_ball(rng, dim, radius)
    assert np.linalg.norm(inside) <= radius * (1 + 1e-12)
    surface = sample_in_ball(rng, dim, radius, on_sphere=True)
    assert np.linalg.norm(surface) == pytest.approx(radius, rel=1e-12)


def test_sampling_through_a_basis_keeps_the_distance():
    basis = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 3)))[0]
    ball = Ball(np.arange(5.0), 0.25)
    point = ball.sample(probe_rng(1, 2), basis=basis, on_sphere=True)
    assert ball.distance(point) == pytest.approx(0.25, rel=1e-12)
    offset = point - ball.center
    np.testing.assert_allclose(basis @ (basis.T @ offset), offset, atol=1e-14)


def test_sampling_is_keyed_by_seed():
    ball = Ball(np.zeros(3), 1.0)
    assert np.array_equal(ball.sample(probe_rng(4, 7)), ball.sample(probe_rng(4, 7)))
    assert not np.array_equal(ball.sample(probe_rng(4, 7)), ball.sample(probe_rng(4, 8)))


def test_zero_dimensional_sample():
    assert sample_in_ball(probe_rng(0), 0, 1.0).shape == (0,)


def test_uniquefy_merges_close_points():
    points = [np.array([0.0]), np.array([1e-7]), np.array([1.0]), np.array([1.0 + 1e-6])]
    representatives, assignment = uniquefy_points(points, merge_radius=1e-5)
    assert len(representatives) == 2
    assert assignment == [0, 0, 1, 1]
    assert np.array_equal(representatives[1], points[2])


def test_uniquefy_keeps_distinct_points():
    points = [np.array([float(i)]) for i in range(4)]
    representatives, assignment = uniquefy_points(points, merge_radius=0.5)
    assert assignment == [0, 1, 2, 3]
    assert len(representatives) == 4
