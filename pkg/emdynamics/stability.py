"""Equilibrium classification, convergence rates and exponential-stability constants.

Derivatives of the log-likelihood are taken by central differences in the
tangent chart of the free parameters (see :meth:`ModelSpec.tangent_basis`),
so the simplex constraint on the weights never shows up as a zero
eigenvalue. All sampling is keyed by ``(seed, stream, index)``.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from scipy.linalg import eigh

from .balls import Ball, sample_in_ball
from .em_core import (
    InnerAscentConfig,
    SolverConfig,
    StepFn,
    Trajectory,
    run,
    step_function,
)
from .errors import (
    InsufficientDataError,
    InvalidParameterError,
    NotLocalMaxError,
    NumericalError,
)
from .lyapunov import UNITS, likelihood_difference
from .models import Dataset, MixtureParams, ModelSpec, log_likelihood, posterior_kl
from .utils import parallel_map, probe_rng

logger = logging.getLogger(__name__)

CLASSIFICATIONS = (
    "mle-candidate",
    "local-max",
    "saddle",
    "indeterminate",
    "non-stationary",
    "boundary",
)
LOCAL_MAX_LABELS = ("mle-candidate", "local-max")
# ratios above this are reported as sublinear convergence
SUBLINEAR_THRESHOLD = 1.0 - 1e-3
# relative slack before a sampled likelihood counts as beating the center
LOCAL_MAX_RTOL = 1e-12

# independent random streams of a single certification
_HESSIAN_STREAM, _BALL_STREAM, _START_STREAM, _SHELL_STREAM = 0, 1, 2, 3


def _probe(f: Callable[[np.ndarray], float], point: np.ndarray) -> float:
    try:
        value = float(f(point))
    except (ValueError, ArithmeticError) as e:
        raise NumericalError(
            f"objective failed at probe point {point.tolist()}: {e}"
        ) from e
    if not np.isfinite(value):
        raise NumericalError(
            f"non-finite value {value!r} at probe point {point.tolist()}"
        )
    return value


def _relative_steps(x: np.ndarray, h: float) -> np.ndarray:
    return h * np.maximum(1.0, np.abs(x))


def numeric_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient with relative steps ``h * max(1, |x_i|)``.

    Parameters
    ----------
    f : callable
        Scalar function of a vector.
    x : numpy.ndarray
        Evaluation point, shape ``(m,)``.
    h : float, default=1e-5
        Relative step.

    Returns
    -------
    numpy.ndarray
        Gradient estimate, shape ``(m,)``; error ``O(h**2)`` for smooth ``f``.

    Raises
    ------
    NumericalError
        If ``f`` is not finite at some probe point; the point is named.
    """
    if not h > 0:
        raise InvalidParameterError(f"step must be > 0, got {h}")
    x = np.asarray(x, dtype=np.float64)
    steps = _relative_steps(x, h)
    grad = np.empty_like(x)
    for i in range(len(x)):
        hi, lo = x.copy(), x.copy()
        hi[i] += steps[i]
        lo[i] -= steps[i]
        grad[i] = (_probe(f, hi) - _probe(f, lo)) / (hi[i] - lo[i])
    return grad


def numeric_hessian(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4
) -> np.ndarray:
    """Central-difference Hessian, symmetrized as ``(H + H.T) / 2``.

    Every entry uses the four-point stencil
    ``f(x + h_i e_i + h_j e_j) - f(x + h_i e_i - h_j e_j) - f(x - h_i e_i + h_j e_j)
    + f(x - h_i e_i - h_j e_j)`` over ``4 h_i h_j``, which on the diagonal is
    the second difference with step ``2 h_i``.
    """
    if not h > 0:
        raise InvalidParameterError(f"step must be > 0, got {h}")
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    steps = _relative_steps(x, h)
    hess = np.zeros((n, n))

    def shifted(i: int, j: int, si: float, sj: float) -> float:
        point = x.copy()
        point[i] += si * steps[i]
        point[j] += sj * steps[j]
        return _probe(f, point)

    for i, j in itertools.product(range(n), repeat=2):
        if i > j:
            continue
        hess[i, j] = (
            shifted(i, j, 1, 1)
            - shifted(i, j, 1, -1)
            - shifted(i, j, -1, 1)
            + shifted(i, j, -1, -1)
        ) / (4.0 * steps[i] * steps[j])
        hess[j, i] = hess[i, j]
    return 0.5 * (hess + hess.T)


def _always_valid(vector: np.ndarray) -> bool:
    return True


@dataclass(frozen=True, eq=False)
class LocalProblem:
    """A smooth objective around a reference point, seen through a chart.

    Parameters
    ----------
    center : numpy.ndarray
        Reference point ``theta*`` in ambient coordinates, shape ``(p,)``.
    log_objective : callable
        ``vector -> log L(vector)``.
    basis : numpy.ndarray
        Orthonormal chart columns, shape ``(p, m)``.
    step : callable, optional
        The map ``F`` on ambient vectors; needed for the constant ``b``.
    divergence : callable, optional
        ``(vector, F(vector)) -> D_KL``; needed for ``b`` in log units.
    is_valid : callable, optional
        Membership test of the parameter space; invalid probes are skipped.

    Examples
    --------
    A plain Gaussian bump, whose Hessian at the center has ``lambda_min = -2``:

    >>> problem = LocalProblem(
    ...     center=np.zeros(2),
    ...     log_objective=lambda v: -float(v @ v),
    ...     basis=np.eye(2),
    ... )
    """

    center: np.ndarray
    log_objective: Callable[[np.ndarray], float]
    basis: np.ndarray
    step: Optional[Callable[[np.ndarray], np.ndarray]] = None
    divergence: Optional[Callable[[np.ndarray, np.ndarray], float]] = None
    is_valid: Callable[[np.ndarray], bool] = _always_valid

    @classmethod
    def from_mixture(
        cls,
        spec: ModelSpec,
        theta_star: MixtureParams,
        data: Dataset,
        step_fn: Optional[StepFn] = None,
    ) -> "LocalProblem":
        step_fn = step_fn or step_function(spec, data)

        def log_objective(vector: np.ndarray) -> float:
            return log_likelihood(spec, spec.unflatten(vector), data)

        def step(vector: np.ndarray) -> np.ndarray:
            return step_fn(spec.unflatten(vector)).flatten()

        def divergence(vector: np.ndarray, image: np.ndarray) -> float:
            return posterior_kl(spec, spec.unflatten(vector), spec.unflatten(image), data)

        return cls(
            center=theta_star.flatten(),
            log_objective=log_objective,
            basis=spec.tangent_basis(),
            step=step,
            divergence=divergence,
            is_valid=spec.is_valid_vector,
        )

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def point(self, z: np.ndarray) -> np.ndarray:
        return self.center + self.basis @ z

    def chart_objective(self) -> Callable[[np.ndarray], float]:
        return lambda z: self.log_objective(self.point(z))


@dataclass(frozen=True)
class ExponentialConstants:
    """Sampled constants of the exponential-stability certificate.

    ``a`` bounds the curvature of ``V`` from above, ``b`` the decrease of
    ``V`` per step from below, both against ``||theta - theta*||**2``; ``d``
    is the sampled supremum of ``V / ||theta - theta*||``. Then
    ``gamma = log a - log(a - b)`` when ``a > b > 0`` and ``c = d / a``.
    Likelihood-unit values are relative to ``L(theta*) = exp(log_scale)``,
    which leaves ``gamma``, ``c`` and ``mu_bound`` unchanged.
    """

    a: float
    b: Optional[float]
    d: float
    gamma: Optional[float]
    c: Optional[float]
    mu_bound: Optional[float]
    gamma_reason: Optional[str]
    a_center: float
    units: str
    log_scale: float
    radius: float
    n_samples: int
    n_invalid: int
    seed: int
    n_hessian_samples: int
    shell_radii: List[float] = field(default_factory=list)
    shell_max: List[float] = field(default_factory=list)
    shell_trend: str = "flat"

    def to_dict(self) -> dict:
        return asdict(self)


def gamma_constant(a: float, b: float) -> Optional[float]:
    """``log a - log(a - b)`` when ``a > b > 0``, else None."""
    if a > b > 0:
        return float(np.log(a) - np.log(a - b))
    return None


def local_constants(
    problem: LocalProblem,
    radius: float,
    n_samples: int,
    seed: int,
    units: str = "log",
    n_shells: int = 8,
    shell_ratio: float = 256.0,
    n_hessian_samples: int = 16,
    hessian_step: float = 1e-4,
    n_workers: int = 1,
) -> ExponentialConstants:
    """Estimate ``a``, ``b``, ``d``, ``gamma`` and ``c`` for a :class:`LocalProblem`.

    * ``a = max(-lambda_min(H) / 2)`` over the center and ``n_hessian_samples``
      points of the ball, with ``H`` the Hessian of ``V``'s negative, i.e. of
      ``log L`` (log units) or ``L / L*`` (likelihood units, via
      ``exp(l - l*) (hess l + grad l grad l^T)``).
    * ``b = max(0, min ratio)`` over ``n_samples`` ball points, the ratio being
      ``(L(F) - L) / L* / rho**2`` or ``D_KL(theta || F(theta)) / rho**2``.
    * ``d`` is the maximum of ``V / rho`` over ``n_shells`` spheres with radii
      ``geomspace(radius, radius / shell_ratio)``, ``n_samples`` points each.

    Raises
    ------
    NotLocalMaxError
        If a sampled point has a higher objective than the center.
    """
    if units not in UNITS:
        raise InvalidParameterError(f"units must be one of {UNITS}, got '{units}'")
    if not radius > 0 or n_samples < 1:
        raise InvalidParameterError("radius must be > 0 and n_samples >= 1")
    m = problem.dim
    chart = problem.chart_objective()
    loglik_star = problem.log_objective(problem.center)
    higher_tol = LOCAL_MAX_RTOL * (1.0 + abs(loglik_star))

    def gap(loglik: float) -> float:
        if units == "log":
            return loglik_star - loglik
        return likelihood_difference(loglik_star, loglik, log_scale=loglik_star)

    def curvature(z: np.ndarray) -> float:
        hess = numeric_hessian(chart, z, hessian_step)
        if units == "likelihood":
            grad = numeric_gradient(chart, z)
            hess = np.exp(chart(z) - loglik_star) * (hess + np.outer(grad, grad))
        return -0.5 * float(eigh(hess, eigvals_only=True)[0])

    hessian_points = [np.zeros(m)]
    for i in range(n_hessian_samples):
        z = sample_in_ball(probe_rng(seed, _HESSIAN_STREAM, i), m, radius)
        if problem.is_valid(problem.point(z)):
            hessian_points.append(z)
    curvatures = parallel_map(curvature, hessian_points, n_workers=n_workers)
    a = max(curvatures)

    def ball_probe(index: int):
        z = sample_in_ball(probe_rng(seed, _BALL_STREAM, index), m, radius)
        vector = problem.point(z)
        if not problem.is_valid(vector):
            return None
        loglik = problem.log_objective(vector)
        rho = float(np.linalg.norm(z))
        ratio = None
        if problem.step is not None and rho > 0 and loglik <= loglik_star + higher_tol:
            image = problem.step(vector)
            if units == "log":
                if problem.divergence is not None:
                    ratio = problem.divergence(vector, image) / rho**2
            else:
                gain = likelihood_difference(
                    problem.log_objective(image), loglik, log_scale=loglik_star
                )
                ratio = gain / rho**2
        return vector, loglik, ratio

    def shell_probe(key):
        shell, index = key
        z = sample_in_ball(
            probe_rng(seed, _SHELL_STREAM, shell, index), m, radii[shell], on_sphere=True
        )
        vector = problem.point(z)
        if not problem.is_valid(vector):
            return None
        loglik = problem.log_objective(vector)
        return vector, loglik, gap(loglik) / radii[shell]

    radii = np.geomspace(radius, radius / shell_ratio, n_shells)
    ball_results = parallel_map(ball_probe, list(range(n_samples)), n_workers)
    shell_keys = [(s, i) for s in range(n_shells) for i in range(n_samples)]
    shell_results = parallel_map(shell_probe, shell_keys, n_workers)

    n_invalid = 0
    for result in [*ball_results, *shell_results]:
        if result is None:
            n_invalid += 1
            continue
        vector, loglik, _ = result
        if loglik > loglik_star + higher_tol:
            raise NotLocalMaxError(
                f"not-local-max-in-ball: log L = {loglik!r} at {vector.tolist()} exceeds "
                f"log L* = {loglik_star!r}; reduce the radius ({radius})"
            )

    ratios = [r[2] for r in ball_results if r is not None and r[2] is not None]
    b = max(0.0, float(min(ratios))) if ratios else None

    shell_max = []
    for s in range(n_shells):
        values = [
            r[2] for (shell, _), r in zip(shell_keys, shell_results) if shell == s and r
        ]
        shell_max.append(float(max(values)) if values else float("nan"))
    finite_max = [v for v in shell_max if np.isfinite(v)]
    d = max(0.0, max(finite_max)) if finite_max else float("nan")
    if len(finite_max) < 2 or np.isclose(finite_max[0], finite_max[-1], rtol=1e-3):
        trend = "flat"
    else:
        trend = "decreasing" if finite_max[-1] < finite_max[0] else "increasing"

    gamma = None if b is None else gamma_constant(a, b)
    if b is None:
        reason = "b unavailable: no map or divergence supplied"
    elif a <= 0:
        reason = f"a = {a!r} <= 0: objective is not strictly concave in the ball"
    elif b == 0:
        reason = "b = 0: no strict decrease certified in the ball"
    elif b >= a:
        reason = f"b = {b!r} >= a = {a!r}"
    else:
        reason = None
    c = d / a if a > 0 else None
    if trend == "increasing":
        logger.warning("sup V / ||theta - theta*|| grows toward the center; d is unreliable")
    return ExponentialConstants(
        a=float(a),
        b=b,
        d=float(d),
        gamma=gamma,
        c=c,
        mu_bound=c,
        gamma_reason=reason,
        a_center=float(curvatures[0]),
        units=units,
        log_scale=float(loglik_star),
        radius=float(radius),
        n_samples=int(n_samples),
        n_invalid=n_invalid,
        seed=int(seed),
        n_hessian_samples=len(hessian_points) - 1,
        shell_radii=radii.tolist(),
        shell_max=shell_max,
        shell_trend=trend,
    )


def exponential_constants(
    spec: ModelSpec,
    theta_star: MixtureParams,
    data: Dataset,
    radius: float,
    n_samples: int,
    seed: int,
    *,
    units: str = "log",
    step_fn: Optional[StepFn] = None,
    n_shells: int = 8,
    shell_ratio: float = 256.0,
    n_hessian_samples: int = 16,
    hessian_step: float = 1e-4,
    n_workers: int = 1,
) -> ExponentialConstants:
    """Exponential-stability constants of the EM map around ``theta_star``.

    Parameters
    ----------
    spec : ModelSpec
        Model description.
    theta_star : MixtureParams
        A classified local maximizer.
    data : Dataset
        Observed data.
    radius : float
        Radius of the sampled ball; small enough that no other stationary
        point lies inside.
    n_samples : int
        Ball probes, and probes per shell.
    seed : int
        Root seed of every probe.
    units : {"log", "likelihood"}, default="log"
        Which of the two condition sets to evaluate.
    step_fn : callable, optional
        The map; plain EM by default.

    See Also
    --------
    local_constants : Works on any :class:`LocalProblem`.
    """
    problem = LocalProblem.from_mixture(spec, theta_star, data, step_fn)
    return local_constants(
        problem,
        radius,
        n_samples,
        seed,
        units=units,
        n_shells=n_shells,
        shell_ratio=shell_ratio,
        n_hessian_samples=n_hessian_samples,
        hessian_step=hessian_step,
        n_workers=n_workers,
    )


@dataclass(frozen=True)
class StabilityCertificate:
    """Everything known about a candidate equilibrium ``theta*``.

    ``is_fixed_point`` compares ``||F(theta*) - theta*||`` with the fixed-point
    tolerance; gradient and Hessian are those of ``log L`` in the tangent
    chart and are None for ``boundary`` points.
    """

    theta_star: MixtureParams
    loglik: float
    is_fixed_point: bool
    fixed_point_residual: float
    grad_norm: Optional[float]
    hessian_max_eigenvalue: Optional[float]
    hessian_min_eigenvalue: Optional[float]
    classification: str
    delta: Optional[float] = None
    tolerances: dict = field(default_factory=dict)
    constants: Optional[ExponentialConstants] = None
    empirical_rate: Optional[float] = None
    rate_note: Optional[str] = None
    bound_satisfied: Optional[bool] = None
    trace_holds: Optional[bool] = None
    trace_first_violation: Optional[int] = None
    bare_trace_holds: Optional[bool] = None
    bare_trace_first_violation: Optional[int] = None

    def to_dict(self) -> dict:
        payload = {
            k: v for k, v in asdict(self).items() if k not in ("theta_star", "constants")
        }
        payload["theta_star"] = self.theta_star.to_dict()
        payload["constants"] = None if self.constants is None else self.constants.to_dict()
        return payload


def classify_equilibrium(
    spec: ModelSpec,
    theta_star: MixtureParams,
    data: Dataset,
    *,
    delta: Optional[float] = None,
    inner: Optional[InnerAscentConfig] = None,
    known_optima: Sequence[MixtureParams] = (),
    grad_tol: float = 1e-5,
    fixed_point_tol: float = 1e-8,
    eigen_margin: float = 1e-10,
    gradient_step: float = 1e-5,
    hessian_step: float = 1e-4,
) -> StabilityCertificate:
    """Fixed-point residual, stationarity and curvature of ``theta_star``.

    Components are put in canonical order first, so permuted inputs give
    identical certificates.

    Parameters
    ----------
    spec : ModelSpec
        Model description.
    theta_star : MixtureParams
        Candidate equilibrium.
    data : Dataset
        Observed data.
    delta : float, optional
        Measure the residual of the delta-EM map instead of the EM map.
    inner : InnerAscentConfig, optional
        Inner ascent settings of delta-EM.
    known_optima : sequence of MixtureParams, optional
        Competing local maxima. A local max at least as likely as all of them
        is labelled ``mle-candidate``.
    grad_tol, fixed_point_tol, eigen_margin : float
        Stationarity, fixed-point and negativity tolerances.
    gradient_step, hessian_step : float
        Relative finite-difference steps.

    Returns
    -------
    StabilityCertificate
        Without constants; see :func:`certify` for the full certificate.
    """
    theta = spec.canonicalize(theta_star)
    spec.validate(theta)
    data.check(spec)
    step = step_function(spec, data, delta, inner)
    residual = float(np.linalg.norm(step(theta).flatten() - theta.flatten()))
    loglik = log_likelihood(spec, theta, data)
    tolerances = {
        "grad_tol": grad_tol,
        "fixed_point_tol": fixed_point_tol,
        "eigen_margin": eigen_margin,
        "gradient_step": gradient_step,
        "hessian_step": hessian_step,
    }
    common = dict(
        theta_star=theta,
        loglik=loglik,
        is_fixed_point=residual <= fixed_point_tol,
        fixed_point_residual=residual,
        delta=delta,
        tolerances=tolerances,
    )
    if spec.floors_active(theta):
        logger.warning("floors are active at theta*; no derivative claims are made")
        return StabilityCertificate(
            grad_norm=None,
            hessian_max_eigenvalue=None,
            hessian_min_eigenvalue=None,
            classification="boundary",
            **common,
        )

    problem = LocalProblem.from_mixture(spec, theta, data)
    if problem.dim == 0:
        raise InvalidParameterError("every parameter group is frozen")
    chart = problem.chart_objective()
    origin = np.zeros(problem.dim)
    grad_norm = float(np.linalg.norm(numeric_gradient(chart, origin, gradient_step)))
    eigenvalues = eigh(numeric_hessian(chart, origin, hessian_step), eigvals_only=True)
    top, bottom = float(eigenvalues[-1]), float(eigenvalues[0])

    if grad_norm > grad_tol:
        label = "non-stationary"
    elif top < -eigen_margin:
        label = "local-max"
        if known_optima:
            best = max(log_likelihood(spec, o, data) for o in known_optima)
            if loglik >= best - 1e-9 * (1.0 + abs(loglik)):
                label = "mle-candidate"
    elif top > eigen_margin:
        label = "saddle"
    else:
        label = "indeterminate"
    return StabilityCertificate(
        grad_norm=grad_norm,
        hessian_max_eigenvalue=top,
        hessian_min_eigenvalue=bottom,
        classification=label,
        **common,
    )


def _states(source: Union[Trajectory, np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    if isinstance(source, Trajectory):
        return source.thetas
    return np.atleast_2d(np.asarray(source, dtype=np.float64))


def _as_vector(theta: Union[MixtureParams, np.ndarray]) -> np.ndarray:
    if isinstance(theta, MixtureParams):
        return theta.flatten()
    return np.asarray(theta, dtype=np.float64)


def estimate_rate(
    trajectory: Union[Trajectory, np.ndarray, Sequence[np.ndarray]],
    theta_star: Union[MixtureParams, np.ndarray],
    window: int = 10,
    min_distance: float = 1e-13,
) -> float:
    """Median of the last ``window`` ratios ``||x_{k+1} - x*|| / ||x_k - x*||``.

    Ratios whose denominator is below ``min_distance`` are discarded.

    Raises
    ------
    InsufficientDataError
        If fewer than three valid ratios remain.

    Warns
    -----
    RuntimeWarning
        If the estimate is at least ``1 - 1e-3`` (sublinear convergence).

    Examples
    --------
    >>> states = [np.array([1.0]) * 2.0**-k for k in range(20)]
    >>> estimate_rate(states, np.zeros(1))
    0.5
    """
    states = _states(trajectory)
    distances = np.linalg.norm(states - _as_vector(theta_star), axis=1)
    ratios = [
        distances[k + 1] / distances[k]
        for k in range(len(distances) - 1)
        if distances[k] >= min_distance
    ]
    if len(ratios) < 3:
        raise InsufficientDataError(
            f"only {len(ratios)} ratios with denominator >= {min_distance}; need 3"
        )
    rate = float(np.median(ratios[-window:]))
    if rate >= SUBLINEAR_THRESHOLD:
        warnings.warn(f"rate estimate {rate:.6f} indicates sublinear convergence", RuntimeWarning)
    return rate


@dataclass(frozen=True)
class ExponentialTraceReport:
    holds: bool
    first_violation: Optional[int]
    worst_ratio: float


def verify_exponential_trace(
    trajectory: Union[Trajectory, np.ndarray, Sequence[np.ndarray]],
    theta_star: Union[MixtureParams, np.ndarray],
    c: float,
    gamma: float,
    rtol: float = 1e-9,
    initial_distance: Optional[float] = None,
) -> ExponentialTraceReport:
    """Check ``||x_k - x*|| <= c exp(-gamma k) R`` for every ``k``.

    ``R`` is ``||x_0 - x*||`` unless ``initial_distance`` is given; with
    ``initial_distance=1`` the envelope is the bare ``c exp(-gamma k)``.
    ``worst_ratio`` is the largest distance-to-envelope ratio; values above
    one mark violations.
    """
    states = _states(trajectory)
    distances = np.linalg.norm(states - _as_vector(theta_star), axis=1)
    scale = distances[0] if initial_distance is None else float(initial_distance)
    envelope = c * np.exp(-gamma * np.arange(len(distances))) * scale
    violated = distances > envelope * (1.0 + rtol)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(envelope > 0, distances / envelope, np.where(distances > 0, np.inf, 0.0))
    first = int(np.argmax(violated)) if violated.any() else None
    return ExponentialTraceReport(
        holds=first is None, first_violation=first, worst_ratio=float(np.max(ratios))
    )


def certify(
    spec: ModelSpec,
    theta_star: MixtureParams,
    data: Dataset,
    *,
    solver: Optional[SolverConfig] = None,
    radius: float = 0.3,
    n_samples: int = 200,
    seed: int = 0,
    units: str = "log",
    n_shells: int = 8,
    shell_ratio: float = 256.0,
    n_hessian_samples: int = 16,
    grad_tol: float = 1e-5,
    fixed_point_tol: float = 1e-8,
    eigen_margin: float = 1e-10,
    gradient_step: float = 1e-5,
    hessian_step: float = 1e-4,
    rate_window: int = 10,
    rate_min_distance: float = 1e-9,
    known_optima: Sequence[MixtureParams] = (),
    n_workers: int = 1,
) -> StabilityCertificate:
    """Classify ``theta_star`` and, for local maxima, compute the full certificate.

    The empirical rate is measured on a run of the solver started at a seeded
    point at distance ``radius / 2`` from ``theta_star``; the distances are
    taken to the limit of that run. ``bound_satisfied`` compares the rate
    with ``d / a``. When ``gamma`` is defined the run is checked against two
    envelopes: ``c exp(-gamma k) ||x_0 - x*||`` (``trace_*``), which fails
    at ``k = 0`` whenever ``c < 1``, and the bare ``c exp(-gamma k)``
    (``bare_trace_*``).
    """
    solver = solver or SolverConfig()
    cert = classify_equilibrium(
        spec,
        theta_star,
        data,
        delta=solver.delta,
        inner=solver.inner_ascent,
        known_optima=known_optima,
        grad_tol=grad_tol,
        fixed_point_tol=fixed_point_tol,
        eigen_margin=eigen_margin,
        gradient_step=gradient_step,
        hessian_step=hessian_step,
    )
    if cert.classification not in LOCAL_MAX_LABELS:
        return replace(cert, rate_note=f"no constants for a {cert.classification} point")

    theta = cert.theta_star
    step_fn = step_function(spec, data, solver.delta, solver.inner_ascent)
    constants = exponential_constants(
        spec,
        theta,
        data,
        radius,
        n_samples,
        seed,
        units=units,
        step_fn=step_fn,
        n_shells=n_shells,
        shell_ratio=shell_ratio,
        n_hessian_samples=n_hessian_samples,
        hessian_step=hessian_step,
        n_workers=n_workers,
    )

    ball = Ball(theta.flatten(), 0.5 * radius)
    basis = spec.tangent_basis()
    start = None
    for attempt in range(100):
        candidate = ball.sample(probe_rng(seed, _START_STREAM, attempt), basis, on_sphere=True)
        if spec.is_valid_vector(candidate):
            start = spec.unflatten(candidate)
            break
    if start is None:
        return replace(cert, constants=constants, rate_note="no valid perturbed start")

    trajectory = run(spec, start, data, solver)
    limit = trajectory.thetas[-1]
    if np.linalg.norm(spec.canonicalize_vector(limit) - theta.flatten()) > radius:
        logger.warning("perturbed run left the ball and converged elsewhere")
    try:
        rate = estimate_rate(trajectory, limit, rate_window, rate_min_distance)
    except InsufficientDataError as e:
        return replace(cert, constants=constants, rate_note=str(e))

    bound = None if constants.mu_bound is None else rate <= constants.mu_bound
    traces = {}
    if constants.gamma is not None and constants.c is not None:
        for name, initial_distance in (("scaled", None), ("bare", 1.0)):
            report = verify_exponential_trace(
                trajectory,
                limit,
                constants.c,
                constants.gamma,
                initial_distance=initial_distance,
            )
            traces[name] = report.holds, report.first_violation
    trace_holds, first_violation = traces.get("scaled", (None, None))
    bare_holds, bare_first_violation = traces.get("bare", (None, None))
    logger.info(
        "certified %s: rate %.4g, d/a %s, gamma %s",
        cert.classification,
        rate,
        constants.mu_bound,
        constants.gamma,
    )
    return replace(
        cert,
        constants=constants,
        empirical_rate=rate,
        bound_satisfied=bound,
        trace_holds=trace_holds,
        trace_first_violation=first_violation,
        bare_trace_holds=bare_holds,
        bare_trace_first_violation=bare_first_violation,
    )
