import typing
from typing import List, Optional, Sequence, Tuple

import numpy as np


class Ball(typing.NamedTuple):
    """A closed Euclidean ball in flattened parameter coordinates.

    Parameters
    ----------
    center : numpy.ndarray
        Center of the ball, shape ``(p,)``.
    radius : float
        Radius, non-negative.

    Examples
    --------
    >>> ball = Ball(np.zeros(2), 1.0)
    >>> np.array([0.5, 0.5]) in ball
    True
    >>> ball.project(np.array([3.0, 4.0]))
    array([0.6, 0.8])
    """

    center: np.ndarray
    radius: float

    def __contains__(self, point):
        return self.distance(point) <= self.radius

    def __repr__(self) -> str:
        return f"Ball(center={np.asarray(self.center).tolist()}, radius={self.radius})"

    def distance(self, point: np.ndarray) -> float:
        return float(np.linalg.norm(np.asarray(point) - self.center))

    def project(self, point: np.ndarray) -> np.ndarray:
        """Radial projection onto the closed ball.

        Points inside are returned unchanged; points outside are moved along
        the ray from the center to the boundary. Affine constraints shared by
        the center and ``point`` (e.g. mixture weights summing to one) are
        preserved because the result is a convex combination of the two.
        """
        point = np.asarray(point, dtype=np.float64)
        offset = point - self.center
        dist = float(np.linalg.norm(offset))
        if dist <= self.radius:
            return point
        return self.center + offset * (self.radius / dist)

    def sample(
        self,
        rng: np.random.Generator,
        basis: Optional[np.ndarray] = None,
        on_sphere: bool = False,
    ) -> np.ndarray:
        """Draw one point uniformly from the ball (or its boundary sphere).

        Parameters
        ----------
        rng : numpy.random.Generator
            Source of randomness.
        basis : numpy.ndarray, optional
            Orthonormal columns ``(p, m)`` spanning the admissible directions.
            Sampling happens in the ``m``-dimensional chart and is mapped back,
            so the Euclidean distance to the center is preserved.
        on_sphere : bool, default=False
            If True, the sample lies exactly at distance ``radius``.
        """
        dim = len(self.center) if basis is None else basis.shape[1]
        offset = sample_in_ball(rng, dim, self.radius, on_sphere=on_sphere)
        if basis is not None:
            offset = basis @ offset
        return self.center + offset


def sample_in_ball(
    rng: np.random.Generator, dim: int, radius: float, on_sphere: bool = False
) -> np.ndarray:
    """Uniform sample from the ``dim``-ball of the given radius."""
    if dim == 0:
        return np.zeros(0)
    direction = rng.standard_normal(dim)
    norm = np.linalg.norm(direction)
    while norm == 0.0:
        direction = rng.standard_normal(dim)
        norm = np.linalg.norm(direction)
    direction /= norm
    if on_sphere:
        return radius * direction
    return radius * rng.uniform() ** (1.0 / dim) * direction


def uniquefy_points(
    points: Sequence[np.ndarray], merge_radius: float
) -> Tuple[List[np.ndarray], List[int]]:
    """Greedily merge points that lie within ``merge_radius`` of a representative.

    Points are visited in order; each joins the first representative within
    ``merge_radius`` or becomes a new representative. Representatives are
    therefore pairwise farther apart than ``merge_radius``.

    Parameters
    ----------
    points : sequence of numpy.ndarray
        Points of equal dimension.
    merge_radius : float
        Merge distance.

    Returns
    -------
    representatives : list of numpy.ndarray
        One point per cluster, the first member encountered.
    assignment : list of int
        Cluster index of every input point.
    """
    representatives: List[np.ndarray] = []
    assignment: List[int] = []
    for point in points:
        for idx, rep in enumerate(representatives):
            if np.linalg.norm(point - rep) <= merge_radius:
                assignment.append(idx)
                break
        else:
            representatives.append(np.asarray(point))
            assignment.append(len(representatives) - 1)
    return representatives, assignment
