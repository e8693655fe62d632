from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from hydra.errors import InstantiationException
from hydra.utils import instantiate

from .balls import Ball, uniquefy_points
from .em_core import InnerAscentConfig, step_function
from .errors import InvalidParameterError, InvalidStateError, NumericalError
from .models import Dataset, ModelSpec, log_likelihood
from .stability import numeric_gradient
from .utils import parallel_map, probe_rng

logger = logging.getLogger(__name__)

DIVERGED = "diverged"
MAX_ITERS = "max-iters"
# a limit point must satisfy ||F(x) - x|| <= FIXED_POINT_FACTOR * stop_tol
FIXED_POINT_FACTOR = 10.0
# resampling budget for ball draws that leave the parameter space
MAX_REDRAWS = 100

Assignment = Union[int, str]


def _always_valid(vector: np.ndarray) -> bool:
    return True


def _identity(vector: np.ndarray) -> np.ndarray:
    return vector


@dataclass(frozen=True, eq=False)
class MapSystem:
    """A discrete-time system ``x[k+1] = F(x[k])`` on ``R^p``.

    Parameters
    ----------
    dimension : int
        State dimension ``p``.
    step : callable
        The map ``F``; must return valid states for valid inputs.
    label : str
        Human readable name used in reports.
    is_valid : callable, optional
        Membership test of the state space.
    canonicalize : callable, optional
        Representative of a state's symmetry class (e.g. sorted components).
    basis : numpy.ndarray, optional
        Orthonormal chart of admissible directions; used for ball sampling
        and for the final gradient norm.
    objective : callable, optional
        Scalar objective whose gradient norm is reported at each limit.
    """

    dimension: int
    step: Callable[[np.ndarray], np.ndarray]
    label: str = "map"
    is_valid: Callable[[np.ndarray], bool] = _always_valid
    canonicalize: Callable[[np.ndarray], np.ndarray] = _identity
    basis: Optional[np.ndarray] = None
    objective: Optional[Callable[[np.ndarray], float]] = None

    def gradient_norm(self, x: np.ndarray) -> Optional[float]:
        if self.objective is None:
            return None
        basis = np.eye(self.dimension) if self.basis is None else self.basis
        if basis.shape[1] == 0:
            return 0.0
        objective = self.objective
        try:
            grad = numeric_gradient(
                lambda z: objective(x + basis @ z), np.zeros(basis.shape[1])
            )
        except NumericalError:
            return None
        return float(np.linalg.norm(grad))


def em_map_system(
    spec: ModelSpec,
    data: Dataset,
    delta: Optional[float] = None,
    inner: Optional[InnerAscentConfig] = None,
) -> MapSystem:
    """The EM map (``delta=None``) or delta-EM map as a :class:`MapSystem`.

    This is the default ``basin.system._target_`` of the configuration.
    """
    step_fn = step_function(spec, data, delta, inner)

    def step(vector: np.ndarray) -> np.ndarray:
        return step_fn(spec.unflatten(vector)).flatten()

    def objective(vector: np.ndarray) -> float:
        return log_likelihood(spec, spec.unflatten(vector), data)

    return MapSystem(
        dimension=spec.n_params,
        step=step,
        label="EM" if delta is None else f"delta-EM(delta={delta})",
        is_valid=spec.is_valid_vector,
        canonicalize=spec.canonicalize_vector,
        basis=spec.tangent_basis(),
        objective=objective,
    )


def build_system(
    system_cfg: Mapping[str, Any], spec: ModelSpec, data: Dataset, **kwargs
) -> MapSystem:
    """Instantiate the map factory named by ``system_cfg._target_``.

    The node must be a partial (``_partial_: True``); the resulting factory
    is called with ``spec``, ``data`` and ``kwargs``. A target that cannot be
    imported or built raises :class:`InvalidParameterError`.
    """
    try:
        factory = instantiate(system_cfg)
    except InstantiationException as e:
        raise InvalidParameterError(f"cannot instantiate map factory: {e}") from e
    if not callable(factory):
        raise InvalidParameterError(f"{system_cfg} does not describe a map factory")
    system = factory(spec, data, **kwargs)
    if not isinstance(system, MapSystem):
        raise InvalidParameterError(
            f"map factory returned {type(system).__name__}, expected MapSystem"
        )
    return system


def iterate_map(
    system: MapSystem,
    x0: np.ndarray,
    n: int,
    stop_tol: float,
    divergence_norm: Optional[float] = None,
) -> List[np.ndarray]:
    """Apply ``system.step`` up to ``n`` times, stopping once a step is below ``stop_tol``.

    Parameters
    ----------
    system : MapSystem
        The map.
    x0 : numpy.ndarray
        Valid initial state.
    n : int
        Maximum number of map applications.
    stop_tol : float
        Early stop once ``||x_{k+1} - x_k|| < stop_tol``.
    divergence_norm : float, optional
        States with a larger norm count as divergent.

    Returns
    -------
    list of numpy.ndarray
        ``[x_0, x_1, ...]`` with at most ``n + 1`` entries.

    Raises
    ------
    InvalidStateError
        If a state is invalid, not finite or divergent; ``.index`` names it.
    """
    x = np.asarray(x0, dtype=np.float64)
    if not system.is_valid(x):
        raise InvalidStateError(0, "initial state is not valid")
    states = [x]
    for k in range(1, n + 1):
        nxt = np.asarray(system.step(x), dtype=np.float64)
        if not np.all(np.isfinite(nxt)) or not system.is_valid(nxt):
            raise InvalidStateError(k, f"map produced an invalid state {nxt.tolist()}")
        if divergence_norm is not None and np.linalg.norm(nxt) > divergence_norm:
            raise InvalidStateError(k, f"state norm exceeds {divergence_norm}")
        states.append(nxt)
        if np.linalg.norm(nxt - x) < stop_tol:
            break
        x = nxt
    return states


@dataclass(frozen=True)
class _Outcome:
    index: int
    final: Optional[np.ndarray]
    n_iters: int
    status: str
    grad_norm: Optional[float]


@dataclass(eq=False)
class BasinReport:
    """Limit points reached from a set of initial states.

    Attributes
    ----------
    limit_points : list of numpy.ndarray
        Deduplicated limit points, pairwise farther apart than ``merge_radius``.
    counts : list of int
        Number of initial states per limit point.
    assignments : list of int or str
        Per initial state: limit-point index, ``"diverged"`` or ``"max-iters"``.
    n_iters : list of int
        Map applications per initial state.
    grad_norms : list of float or None
        Objective gradient norm at each final state, when available.
    merge_radius : float
        Merge distance.
    return_index : int, optional
        Limit point identified with the sampling center.
    return_fraction : float, optional
        Fraction of samples converging back to the center.
    """

    limit_points: List[np.ndarray]
    counts: List[int]
    assignments: List[Assignment]
    n_iters: List[int]
    grad_norms: List[Optional[float]]
    merge_radius: float
    label: str = "map"
    center: Optional[np.ndarray] = None
    radius: Optional[float] = None
    seed: Optional[int] = None
    return_index: Optional[int] = None
    return_fraction: Optional[float] = None
    settings: dict = field(default_factory=dict)

    @property
    def n_inits(self) -> int:
        return len(self.assignments)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "merge_radius": self.merge_radius,
            "limit_points": [
                {"point": p.tolist(), "count": c}
                for p, c in zip(self.limit_points, self.counts)
            ],
            "assignments": list(self.assignments),
            "n_diverged": sum(a == DIVERGED for a in self.assignments),
            "n_max_iters": sum(a == MAX_ITERS for a in self.assignments),
            "center": None if self.center is None else self.center.tolist(),
            "radius": self.radius,
            "seed": self.seed,
            "return_index": self.return_index,
            "return_fraction": self.return_fraction,
            "settings": dict(self.settings),
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "init": np.arange(self.n_inits),
                "limit_point": [str(a) for a in self.assignments],
                "iterations": self.n_iters,
                "final_grad_norm": [
                    np.nan if g is None else g for g in self.grad_norms
                ],
            }
        )


def find_limit_points(
    system: MapSystem,
    initializations: Sequence[np.ndarray],
    n: int = 1000,
    stop_tol: float = 1e-10,
    merge_radius: float = 1e-5,
    canonicalize: bool = True,
    divergence_norm: Optional[float] = 1e6,
    n_workers: int = 1,
) -> BasinReport:
    """Run the map from every initialization and merge the limits.

    Final states are canonicalized (when requested), checked to be fixed
    points with ``||F(x) - x|| <= 10 * stop_tol`` and merged greedily in
    initialization order. Runs that do not pass the check are labelled
    ``max-iters``; runs that leave the state space ``diverged``.

    Parameters
    ----------
    system : MapSystem
        The map.
    initializations : sequence of numpy.ndarray
        At least one valid initial state.
    n : int, default=1000
        Iteration budget per run.
    stop_tol : float, default=1e-10
        Step-length stopping tolerance.
    merge_radius : float, default=1e-5
        Limits closer than this are merged.
    canonicalize : bool, default=True
        Apply ``system.canonicalize`` before merging.
    divergence_norm : float, optional
        Norm beyond which a run counts as divergent.
    n_workers : int, default=1
        Threads; results do not depend on it.
    """
    if len(initializations) == 0:
        raise InvalidParameterError("find_limit_points needs at least one initialization")

    def trace(index: int) -> _Outcome:
        try:
            states = iterate_map(
                system, initializations[index], n, stop_tol, divergence_norm
            )
        except InvalidStateError as e:
            logger.debug("initialization %d diverged: %s", index, e)
            return _Outcome(index, None, e.index, DIVERGED, None)
        final = states[-1]
        if canonicalize:
            final = system.canonicalize(final)
        residual = float(np.linalg.norm(system.step(final) - final))
        status = "converged" if residual <= FIXED_POINT_FACTOR * stop_tol else MAX_ITERS
        return _Outcome(index, final, len(states) - 1, status, system.gradient_norm(final))

    outcomes = parallel_map(trace, list(range(len(initializations))), n_workers)
    converged = [o for o in outcomes if o.status == "converged"]
    points, members = uniquefy_points([o.final for o in converged], merge_radius)
    assignments: List[Assignment] = [o.status for o in outcomes]
    counts = [0] * len(points)
    for outcome, cluster in zip(converged, members):
        assignments[outcome.index] = cluster
        counts[cluster] += 1
    logger.info(
        "%s: %d initializations reached %d limit points (%d diverged, %d max-iters)",
        system.label,
        len(outcomes),
        len(points),
        assignments.count(DIVERGED),
        assignments.count(MAX_ITERS),
    )
    return BasinReport(
        limit_points=points,
        counts=counts,
        assignments=assignments,
        n_iters=[o.n_iters for o in outcomes],
        grad_norms=[o.grad_norm for o in outcomes],
        merge_radius=merge_radius,
        label=system.label,
        settings={
            "n": n,
            "stop_tol": stop_tol,
            "canonicalize": canonicalize,
            "divergence_norm": divergence_norm,
        },
    )


def sample_ball_inits(
    system: MapSystem, center: np.ndarray, radius: float, n_samples: int, seed: int
) -> List[np.ndarray]:
    """``n_samples`` valid states drawn uniformly from ``B_radius(center)``.

    Sample ``i`` uses ``probe_rng(seed, i, attempt)``, redrawn while it falls
    outside the state space.
    """
    ball = Ball(np.asarray(center, dtype=np.float64), float(radius))
    inits = []
    for i in range(n_samples):
        for attempt in range(MAX_REDRAWS):
            x = ball.sample(probe_rng(seed, i, attempt), basis=system.basis)
            if system.is_valid(x):
                inits.append(x)
                break
        else:
            raise InvalidParameterError(
                f"no valid state among {MAX_REDRAWS} draws for sample {i}; "
                f"radius {radius} is too large"
            )
    return inits


def basin_sample(
    system: MapSystem,
    center: np.ndarray,
    radius: float,
    n_samples: int,
    seed: int,
    n: int = 1000,
    stop_tol: float = 1e-10,
    merge_radius: float = 1e-5,
    canonicalize: bool = True,
    divergence_norm: Optional[float] = 1e6,
    n_workers: int = 1,
) -> BasinReport:
    """Fraction of initializations in ``B_radius(center)`` that return to ``center``.

    Returns
    -------
    BasinReport
        With ``return_fraction`` in ``[0, 1]``; ``0.0`` and no limit points
        when ``n_samples == 0``.
    """
    center = np.asarray(center, dtype=np.float64)
    if n_samples == 0:
        return BasinReport(
            limit_points=[],
            counts=[],
            assignments=[],
            n_iters=[],
            grad_norms=[],
            merge_radius=merge_radius,
            label=system.label,
            center=center,
            radius=float(radius),
            seed=seed,
            return_fraction=0.0,
        )
    inits = sample_ball_inits(system, center, radius, n_samples, seed)
    report = find_limit_points(
        system,
        inits,
        n=n,
        stop_tol=stop_tol,
        merge_radius=merge_radius,
        canonicalize=canonicalize,
        divergence_norm=divergence_norm,
        n_workers=n_workers,
    )
    reference = system.canonicalize(center) if canonicalize else center
    report.center = center
    report.radius = float(radius)
    report.seed = seed
    report.return_fraction = 0.0
    for index, point in enumerate(report.limit_points):
        if np.linalg.norm(point - reference) <= merge_radius:
            report.return_index = index
            report.return_fraction = report.counts[index] / n_samples
            break
    return report
