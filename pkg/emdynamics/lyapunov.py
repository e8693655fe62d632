"""Lyapunov function of the EM map and its certificates.

The candidate is ``V(theta) = L(theta*) - L(theta)``, the likelihood gap to
a reference point. Along any map with the ascent property its decrement
``V(F(theta)) - V(theta) = L(theta) - L(F(theta))`` is non-positive, which
is what the functions below measure.

Two unit systems are supported:

``"likelihood"``
    Differences of likelihoods divided by ``L(theta*)``, evaluated as
    ``-expm1(l - l*)`` so that no ``exp(l)`` is ever formed.
``"log"``
    Differences of log-likelihoods.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .balls import Ball
from .em_core import StepFn, Trajectory
from .errors import InvalidParameterError
from .models import (
    Dataset,
    MixtureParams,
    ModelSpec,
    log_likelihood,
    posterior_entropy,
    posterior_kl,
    q_function,
)
from .utils import parallel_map, probe_rng

logger = logging.getLogger(__name__)

UNITS = ("likelihood", "log")

KLFn = Callable[[ModelSpec, MixtureParams, MixtureParams, Dataset], float]


def _check_units(units: str) -> None:
    if units not in UNITS:
        raise InvalidParameterError(f"units must be one of {UNITS}, got '{units}'")


def likelihood_difference(
    loglik_a: float, loglik_b: float, log_scale: Optional[float] = None
) -> float:
    """``(exp(loglik_a) - exp(loglik_b)) / exp(log_scale)`` without underflow.

    With ``log_scale=None`` the absolute difference is returned, which
    underflows to zero once both log-likelihoods are far below ``-745``.
    """
    # exp(a - s) - exp(b - s) = exp(a - s) * (1 - exp(b - a))
    gap = 0.0 - np.expm1(loglik_b - loglik_a)
    if log_scale is None:
        return float(np.exp(loglik_a) * gap)
    return float(np.exp(loglik_a - log_scale) * gap)


def _gap(loglik_star: float, loglik: float, units: str) -> float:
    if units == "log":
        return float(loglik_star - loglik)
    return likelihood_difference(loglik_star, loglik, log_scale=loglik_star)


def lyapunov_value(
    spec: ModelSpec,
    theta: MixtureParams,
    theta_star: MixtureParams,
    data: Dataset,
    units: str = "likelihood",
    with_scale: bool = False,
) -> Union[float, Tuple[float, float]]:
    """Lyapunov candidate ``V(theta) = L(theta*) - L(theta)``.

    Likelihood-unit values are divided by ``L(theta*) = exp(log_scale)``,
    so they stay representable when ``log L`` is far below ``-745``.

    Parameters
    ----------
    spec : ModelSpec
        Model description.
    theta : MixtureParams
        Evaluation point.
    theta_star : MixtureParams
        Reference point, typically a local maximizer of the likelihood.
    data : Dataset
        Observed data.
    units : {"likelihood", "log"}, default="likelihood"
        Scaled likelihood gap or log-likelihood gap.
    with_scale : bool, default=False
        Also return ``log_scale = log L(theta*)``.

    Returns
    -------
    float or (float, float)
        ``V``, exactly ``0.0`` when ``theta`` and ``theta_star`` have the
        same log-likelihood; with ``with_scale`` the pair ``(V, log_scale)``.
    """
    _check_units(units)
    loglik_star = log_likelihood(spec, theta_star, data)
    loglik = log_likelihood(spec, theta, data)
    value = _gap(loglik_star, loglik, units)
    return (value, loglik_star) if with_scale else value


def lyapunov_decrement(
    spec: ModelSpec,
    theta: MixtureParams,
    theta_star: MixtureParams,
    data: Dataset,
    step_fn: StepFn,
    units: str = "likelihood",
    with_scale: bool = False,
) -> Union[float, Tuple[float, float]]:
    """``dV(theta) = V(F(theta)) - V(theta) = L(theta) - L(F(theta))``.

    In likelihood units ``theta_star`` sets the scale ``L(theta*)``, as in
    :func:`lyapunov_value`; in log units it is not used.
    """
    _check_units(units)
    loglik = log_likelihood(spec, theta, data)
    loglik_next = log_likelihood(spec, step_fn(theta), data)
    log_scale = log_likelihood(spec, theta_star, data)
    if units == "log":
        value = float(loglik - loglik_next)
    else:
        value = likelihood_difference(loglik, loglik_next, log_scale=log_scale)
    return (value, log_scale) if with_scale else value


def q_decomposition_residual(
    spec: ModelSpec,
    theta: MixtureParams,
    theta_prime: MixtureParams,
    data: Dataset,
    kl: KLFn = posterior_kl,
) -> float:
    """``Q(theta, theta') - log L(theta) + D_KL(theta' || theta) + H(theta')``.

    Zero up to roundoff for every valid pair. ``kl`` can be swapped for
    another divergence, e.g. to check that a wrong one is detected.
    """
    return float(
        q_function(spec, theta, theta_prime, data)
        - log_likelihood(spec, theta, data)
        + kl(spec, theta_prime, theta, data)
        + posterior_entropy(spec, theta_prime, data)
    )


@dataclass(frozen=True)
class AscentCertificate:
    """``lhs = log L(F(theta)) - log L(theta)``, ``rhs = D_KL(theta || F(theta))``."""

    lhs: float
    rhs: float
    slack: float


def ascent_certificate(
    spec: ModelSpec, theta: MixtureParams, data: Dataset, step_fn: StepFn
) -> AscentCertificate:
    """Check the ascent inequality ``log L(F) - log L >= D_KL(theta || F)``.

    ``slack = lhs - rhs`` is non-negative up to roundoff for EM and delta-EM;
    it is exactly zero when the map leaves ``theta`` unchanged.
    """
    nxt = step_fn(theta)
    lhs = log_likelihood(spec, nxt, data) - log_likelihood(spec, theta, data)
    rhs = posterior_kl(spec, theta, nxt, data)
    return AscentCertificate(lhs=float(lhs), rhs=float(rhs), slack=float(lhs - rhs))


@dataclass(eq=False)
class LyapunovTrace:
    """Lyapunov values along a trajectory.

    Attributes
    ----------
    theta_star : numpy.ndarray
        Flattened reference point.
    values : numpy.ndarray
        ``V_k``; in likelihood units scaled by ``exp(-log_scale)``.
    decrements : numpy.ndarray
        ``V_{k+1} - V_k``, NaN on the last row.
    kl_terms : numpy.ndarray
        ``D_KL(theta_k || theta_{k+1})``, NaN on the last row.
    slack : numpy.ndarray
        Ascent slack per transition, NaN on the last row.
    units : str
        ``"likelihood"`` or ``"log"``.
    log_scale : float
        ``log L(theta*)``.
    """

    theta_star: np.ndarray
    values: np.ndarray
    decrements: np.ndarray
    kl_terms: np.ndarray
    slack: np.ndarray
    units: str
    log_scale: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"V": self.values, "dV": self.decrements, "slack": self.slack})

    def max_decrement(self) -> float:
        finite = self.decrements[np.isfinite(self.decrements)]
        return float(finite.max()) if finite.size else 0.0


def lyapunov_trace(
    spec: ModelSpec,
    trajectory: Trajectory,
    data: Dataset,
    theta_star: Optional[MixtureParams] = None,
    units: str = "log",
) -> LyapunovTrace:
    """Evaluate ``V`` and ``dV`` at every iterate of ``trajectory``.

    ``theta_star`` defaults to the iterate with the highest log-likelihood,
    so every ``V_k`` is non-negative. Likelihood-unit values are reported
    relative to ``L(theta_star)``.
    """
    _check_units(units)
    if theta_star is None:
        best = trajectory.best_index
        star_vector = trajectory.thetas[best]
        loglik_star = float(trajectory.logliks[best])
    else:
        star_vector = theta_star.flatten()
        loglik_star = log_likelihood(spec, theta_star, data)
    values = np.array(
        [_gap(loglik_star, ll, units) for ll in trajectory.logliks]
    )
    decrements = np.append(np.diff(values), np.nan)
    return LyapunovTrace(
        theta_star=star_vector,
        values=values,
        decrements=decrements,
        kl_terms=trajectory.kl_to_next.copy(),
        slack=trajectory.ascent_slack.copy(),
        units=units,
        log_scale=loglik_star,
    )


@dataclass(frozen=True)
class LyapunovConditions:
    """Sampled check of the Lyapunov conditions around ``theta*``.

    ``stable`` requires ``V(theta*) = 0``, ``V > 0`` and ``dV <= 0`` on every
    sample; ``asymptotically_stable`` additionally ``dV < 0`` on every sample.
    """

    n_samples: int
    n_invalid: int
    value_at_center: float
    decrement_at_center: float
    n_nonpositive_value: int
    n_positive_decrement: int
    n_nonstrict_decrement: int
    radius: float
    seed: int
    units: str
    stable: bool = field(init=False)
    asymptotically_stable: bool = field(init=False)

    def __post_init__(self) -> None:
        stable = (
            self.value_at_center == 0.0
            and self.n_nonpositive_value == 0
            and self.n_positive_decrement == 0
        )
        object.__setattr__(self, "stable", stable)
        object.__setattr__(
            self, "asymptotically_stable", stable and self.n_nonstrict_decrement == 0
        )


def lyapunov_conditions(
    spec: ModelSpec,
    theta_star: MixtureParams,
    data: Dataset,
    step_fn: StepFn,
    radius: float,
    n_samples: int = 1000,
    seed: int = 0,
    units: str = "log",
    tol: float = 1e-12,
    strict_tol: float = 1e-14,
    n_workers: int = 1,
) -> LyapunovConditions:
    """Sample ``B_radius(theta*)`` and count violations of the Lyapunov conditions.

    Points are drawn uniformly in the tangent chart of the free parameters;
    draws that leave the parameter space are counted as invalid and skipped.

    Parameters
    ----------
    spec : ModelSpec
        Model description.
    theta_star : MixtureParams
        Candidate equilibrium.
    data : Dataset
        Observed data.
    step_fn : callable
        The map ``F``, e.g. from :func:`emdynamics.em_core.step_function`.
    radius : float
        Ball radius.
    n_samples : int, default=1000
        Number of probe points.
    seed : int, default=0
        Probe ``i`` draws from ``probe_rng(seed, i)``.
    units : {"likelihood", "log"}, default="log"
        Units of ``V``; likelihood units are taken relative to ``L(theta*)``.
    tol : float, default=1e-12
        Relative slack for ``V > 0`` and ``dV <= 0``.
    strict_tol : float, default=1e-14
        ``dV`` must lie below ``-strict_tol`` to count as strictly negative.
    n_workers : int, default=1
        Threads used for the probes.
    """
    _check_units(units)
    loglik_star = log_likelihood(spec, theta_star, data)
    ball = Ball(theta_star.flatten(), float(radius))
    basis = spec.tangent_basis()
    scale = 1.0 + abs(loglik_star) if units == "log" else 1.0

    def probe(index: int):
        vector = ball.sample(probe_rng(seed, index), basis=basis)
        if not spec.is_valid_vector(vector):
            return None
        theta = spec.unflatten(vector)
        loglik = log_likelihood(spec, theta, data)
        loglik_next = log_likelihood(spec, step_fn(theta), data)
        value = _gap(loglik_star, loglik, units)
        decrement = _gap(loglik_star, loglik_next, units) - value
        return value, decrement

    results = parallel_map(probe, list(range(n_samples)), n_workers=n_workers)
    valid = [r for r in results if r is not None]
    values = np.array([r[0] for r in valid])
    decrements = np.array([r[1] for r in valid])

    center_next = step_fn(theta_star)
    decrement_at_center = _gap(loglik_star, log_likelihood(spec, center_next, data), units)
    conditions = LyapunovConditions(
        n_samples=n_samples,
        n_invalid=n_samples - len(valid),
        value_at_center=_gap(loglik_star, loglik_star, units),
        decrement_at_center=float(decrement_at_center),
        n_nonpositive_value=int(np.sum(values <= 0.0)) if valid else 0,
        n_positive_decrement=int(np.sum(decrements > tol * scale)) if valid else 0,
        n_nonstrict_decrement=int(np.sum(decrements >= -strict_tol)) if valid else 0,
        radius=float(radius),
        seed=int(seed),
        units=units,
    )
    if not conditions.stable:
        logger.warning(
            "Lyapunov conditions violated in a ball of radius %g: %d non-positive V, "
            "%d increasing V",
            radius,
            conditions.n_nonpositive_value,
            conditions.n_positive_decrement,
        )
    return conditions
