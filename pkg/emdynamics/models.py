from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from jaxtyping import Float
from numba import njit
from scipy.linalg import null_space
from scipy.special import gammaln, logsumexp

from .errors import DatasetError, InvalidParameterError, NumericalError

logger = logging.getLogger(__name__)

FAMILIES = ("gaussian-diag", "poisson")
PARAMETER_GROUPS = {
    "gaussian-diag": ("weights", "means", "variances"),
    "poisson": ("weights", "rates"),
}
WEIGHT_SUM_TOL = 1e-12
# a component whose responsibility mass falls below this fraction of n is empty
DEGENERACY_MASS = 1e-10


@njit(nogil=True)
def _diag_gaussian_log_density(y, means, log_variances, out):
    n, d = y.shape
    n_components = means.shape[0]
    log_2pi = np.log(2.0 * np.pi)
    for i in range(n):
        for j in range(n_components):
            acc = 0.0
            for l in range(d):
                diff = y[i, l] - means[j, l]
                acc += (
                    log_2pi
                    + log_variances[j, l]
                    + diff * diff * np.exp(-log_variances[j, l])
                )
            out[i, j] = -0.5 * acc
    return out


@dataclass(frozen=True, eq=False)
class MixtureParams:
    """A point of the parameter space of a finite mixture.

    Gaussian mixtures carry ``means`` and ``log_variances`` (diagonal
    covariances, ``variance = exp(log_variance)``); Poisson mixtures carry
    ``rates``. The flattened coordinate vector is
    ``[weights, means.ravel(), log_variances.ravel()]`` or
    ``[weights, rates]`` and defines the Euclidean norm of every ball.

    Parameters
    ----------
    weights : numpy.ndarray
        Mixture weights, shape ``(K,)``, summing to one.
    means : numpy.ndarray, optional
        Component means, shape ``(K, d)``.
    log_variances : numpy.ndarray, optional
        Component log-variances, shape ``(K, d)``.
    rates : numpy.ndarray, optional
        Poisson rates, shape ``(K,)``.
    degenerate : bool, default=False
        Set by the M-step when a component lost (almost) all responsibility.
    stalled : bool, default=False
        Set by delta-EM when the inner ascent could not improve Q.

    Notes
    -----
    The status flags do not take part in :meth:`flatten`.
    """

    weights: Float[np.ndarray, "K"]
    means: Optional[Float[np.ndarray, "K d"]] = None
    log_variances: Optional[Float[np.ndarray, "K d"]] = None
    rates: Optional[Float[np.ndarray, "K"]] = None
    degenerate: bool = field(default=False, compare=False)
    stalled: bool = field(default=False, compare=False)

    @classmethod
    def gaussian(cls, weights, means, variances) -> "MixtureParams":
        """Build Gaussian parameters from variances rather than log-variances."""
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        if means.shape[0] == 1 and len(np.atleast_1d(weights)) > 1:
            means = means.T
        variances = np.asarray(variances, dtype=np.float64).reshape(means.shape)
        return cls(
            weights=np.asarray(weights, dtype=np.float64),
            means=means,
            log_variances=np.log(variances),
        )

    @classmethod
    def poisson(cls, weights, rates) -> "MixtureParams":
        return cls(
            weights=np.asarray(weights, dtype=np.float64),
            rates=np.asarray(rates, dtype=np.float64),
        )

    @property
    def family(self) -> str:
        return "poisson" if self.rates is not None else "gaussian-diag"

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def variances(self) -> Optional[np.ndarray]:
        if self.log_variances is None:
            return None
        return np.exp(self.log_variances)

    def flatten(self) -> np.ndarray:
        if self.rates is not None:
            return np.concatenate([self.weights, self.rates])
        assert self.means is not None and self.log_variances is not None
        return np.concatenate(
            [self.weights, self.means.ravel(), self.log_variances.ravel()]
        )

    def permuted(self, order: Sequence[int]) -> "MixtureParams":
        """Relabel components so that new component ``j`` is old ``order[j]``."""
        order = np.asarray(order)
        return replace(
            self,
            weights=self.weights[order],
            means=None if self.means is None else self.means[order],
            log_variances=(
                None if self.log_variances is None else self.log_variances[order]
            ),
            rates=None if self.rates is None else self.rates[order],
        )

    def to_dict(self) -> dict:
        """JSON-ready mapping ``{family, K, d, weights, means, log_variances | rates}``."""
        payload: dict[str, Any] = {
            "family": self.family,
            "K": self.n_components,
            "weights": self.weights.tolist(),
        }
        if self.rates is not None:
            payload["d"] = 1
            payload["rates"] = self.rates.tolist()
        else:
            assert self.means is not None and self.log_variances is not None
            payload["d"] = int(self.means.shape[1])
            payload["means"] = self.means.tolist()
            payload["log_variances"] = self.log_variances.tolist()
        return payload

    @classmethod
    def from_dict(
        cls, payload: Mapping[str, Any], spec: Optional["ModelSpec"] = None
    ) -> "MixtureParams":
        """Inverse of :meth:`to_dict`; validates against ``spec`` when given."""
        try:
            family = payload["family"]
            weights = np.asarray(payload["weights"], dtype=np.float64)
            if family == "poisson":
                params = cls.poisson(weights, payload["rates"])
            elif family == "gaussian-diag":
                params = cls(
                    weights=weights,
                    means=np.asarray(payload["means"], dtype=np.float64),
                    log_variances=np.asarray(
                        payload["log_variances"], dtype=np.float64
                    ),
                )
            else:
                raise InvalidParameterError(f"unknown mixture family '{family}'")
        except KeyError as e:
            raise InvalidParameterError(f"parameter record is missing {e}") from e
        if int(payload.get("K", params.n_components)) != params.n_components:
            raise InvalidParameterError(
                f"K={payload['K']} does not match {params.n_components} weights"
            )
        if spec is not None:
            spec.validate(params)
        return params


@dataclass(frozen=True)
class ModelSpec:
    """Static description of a finite mixture model.

    Parameters
    ----------
    family : {"gaussian-diag", "poisson"}
        Component family.
    n_components : int
        Number of components ``K >= 1``.
    data_dim : int
        Observation dimension ``d >= 1``; Poisson requires ``d = 1``.
    variance_floor : float, default=1e-8
        Lower bound on every Gaussian variance.
    weight_floor : float, default=1e-6
        Lower bound on every mixture weight, keeps weights in the open simplex.
    rate_floor : float, default=1e-8
        Lower bound on every Poisson rate.
    frozen : tuple of str, default=()
        Parameter groups held at their current value by the M-step and by
        gradient-based updates (``weights``, ``means``, ``variances``,
        ``rates``).

    Examples
    --------
    >>> spec = ModelSpec("gaussian-diag", n_components=2, data_dim=1)
    >>> spec.n_params
    6
    """

    family: str = "gaussian-diag"
    n_components: int = 1
    data_dim: int = 1
    variance_floor: float = 1e-8
    weight_floor: float = 1e-6
    rate_floor: float = 1e-8
    frozen: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "frozen", tuple(self.frozen))
        if self.family not in FAMILIES:
            raise InvalidParameterError(
                f"There is no mixture family '{self.family}'. Please use one of {FAMILIES}."
            )
        if self.n_components < 1 or self.data_dim < 1:
            raise InvalidParameterError(
                f"need n_components >= 1 and data_dim >= 1, got "
                f"({self.n_components}, {self.data_dim})"
            )
        if self.family == "poisson" and self.data_dim != 1:
            raise InvalidParameterError("poisson mixtures are univariate (data_dim=1)")
        if min(self.variance_floor, self.weight_floor, self.rate_floor) <= 0:
            raise InvalidParameterError("floors must be strictly positive")
        if self.weight_floor * self.n_components >= 1:
            raise InvalidParameterError(
                f"weight_floor * K = {self.weight_floor * self.n_components} must be < 1"
            )
        unknown = set(self.frozen) - set(PARAMETER_GROUPS[self.family])
        if unknown:
            raise InvalidParameterError(
                f"cannot freeze {sorted(unknown)} for family '{self.family}'"
            )

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "ModelSpec":
        return cls(
            family=cfg.get("family", "gaussian-diag"),
            n_components=int(cfg.get("n_components", 1)),
            data_dim=int(cfg.get("data_dim", 1)),
            variance_floor=float(cfg.get("variance_floor", 1e-8)),
            weight_floor=float(cfg.get("weight_floor", 1e-6)),
            rate_floor=float(cfg.get("rate_floor", 1e-8)),
            frozen=tuple(cfg.get("frozen", ()) or ()),
        )

    @classmethod
    def for_params(cls, params: MixtureParams, **kwargs) -> "ModelSpec":
        """Spec whose shape matches ``params``; floors and frozen groups via kwargs."""
        d = 1 if params.means is None else params.means.shape[1]
        return cls(
            family=params.family, n_components=params.n_components, data_dim=d, **kwargs
        )

    @property
    def n_params(self) -> int:
        k = self.n_components
        if self.family == "poisson":
            return 2 * k
        return k + 2 * k * self.data_dim

    def unflatten(self, vector: np.ndarray) -> MixtureParams:
        """Map a flattened coordinate vector back to :class:`MixtureParams`.

        Weights are renormalized only when their sum is off by more than
        ``1e-12``, so ``unflatten(flatten(theta))`` reproduces ``theta`` bit
        for bit. No floors are enforced here; see :meth:`is_valid_vector`.
        """
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.n_params,):
            raise InvalidParameterError(
                f"expected a vector of length {self.n_params}, got shape {vector.shape}"
            )
        k, d = self.n_components, self.data_dim
        weights = vector[:k].copy()
        total = weights.sum()
        if abs(total - 1.0) > WEIGHT_SUM_TOL and total > 0:
            weights = weights / total
        if self.family == "poisson":
            return MixtureParams(weights=weights, rates=vector[k:].copy())
        means = vector[k : k + k * d].reshape(k, d).copy()
        log_variances = vector[k + k * d :].reshape(k, d).copy()
        return MixtureParams(weights=weights, means=means, log_variances=log_variances)

    def _shape_problem(self, params: MixtureParams) -> Optional[str]:
        k, d = self.n_components, self.data_dim
        if params.family != self.family:
            return f"family {params.family} does not match spec family {self.family}"
        if params.weights.shape != (k,):
            return f"weights have shape {params.weights.shape}, expected ({k},)"
        if self.family == "poisson":
            if params.rates is None or params.rates.shape != (k,):
                return f"rates must have shape ({k},)"
        else:
            for name in ("means", "log_variances"):
                value = getattr(params, name)
                if value is None or value.shape != (k, d):
                    return f"{name} must have shape ({k}, {d})"
        return None

    def violation(self, params: MixtureParams) -> Optional[str]:
        """Describe the first violated invariant of ``params``, or None."""
        problem = self._shape_problem(params)
        if problem is not None:
            return problem
        if not np.all(np.isfinite(params.flatten())):
            return "parameters contain non-finite values"
        w = params.weights
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            return f"weights sum to {w.sum()!r}, not 1"
        if np.any(w < self.weight_floor):
            return f"weight {w.min()!r} below floor {self.weight_floor}"
        if self.family == "poisson":
            assert params.rates is not None
            if np.any(params.rates < self.rate_floor):
                return f"rate {params.rates.min()!r} below floor {self.rate_floor}"
        else:
            assert params.log_variances is not None
            if np.any(params.log_variances < np.log(self.variance_floor)):
                return (
                    f"variance {np.exp(params.log_variances.min())!r} below floor "
                    f"{self.variance_floor}"
                )
        return None

    def validate(self, params: MixtureParams) -> None:
        problem = self.violation(params)
        if problem is not None:
            raise InvalidParameterError(problem)

    def is_valid(self, params: MixtureParams) -> bool:
        return self.violation(params) is None

    def is_valid_vector(self, vector: np.ndarray) -> bool:
        vector = np.asarray(vector)
        if vector.shape != (self.n_params,) or not np.all(np.isfinite(vector)):
            return False
        if abs(vector[: self.n_components].sum() - 1.0) > WEIGHT_SUM_TOL:
            return False
        return self.is_valid(self.unflatten(vector))

    def group_slices(self) -> dict[str, slice]:
        k, d = self.n_components, self.data_dim
        if self.family == "poisson":
            return {"weights": slice(0, k), "rates": slice(k, 2 * k)}
        return {
            "weights": slice(0, k),
            "means": slice(k, k + k * d),
            "variances": slice(k + k * d, k + 2 * k * d),
        }

    def free_mask(self) -> np.ndarray:
        """Boolean mask of flattened coordinates that are not frozen."""
        mask = np.ones(self.n_params, dtype=bool)
        for name, sl in self.group_slices().items():
            if name in self.frozen:
                mask[sl] = False
        return mask

    def tangent_basis(self) -> np.ndarray:
        """Orthonormal basis of admissible directions, shape ``(p, m)``.

        Spans the free coordinates, with the weight block restricted to
        sum-zero directions so that moving along a column keeps the weights
        on the simplex.
        """
        columns = []
        p = self.n_params
        for name, sl in self.group_slices().items():
            if name in self.frozen:
                continue
            size = sl.stop - sl.start
            if name == "weights":
                if size < 2:
                    continue
                block = null_space(np.ones((1, size)))
            else:
                block = np.eye(size)
            embedded = np.zeros((p, block.shape[1]))
            embedded[sl] = block
            columns.append(embedded)
        if not columns:
            return np.zeros((p, 0))
        return np.hstack(columns)

    def project_tangent(self, vector: np.ndarray) -> np.ndarray:
        """Orthogonal projection of a flattened direction onto :meth:`tangent_basis`."""
        out = np.where(self.free_mask(), vector, 0.0)
        if "weights" not in self.frozen:
            sl = self.group_slices()["weights"]
            out[sl] = out[sl] - out[sl].mean()
        return out

    def canonicalize(self, params: MixtureParams) -> MixtureParams:
        """Sort components by first mean coordinate (rate for Poisson)."""
        if self.family == "poisson":
            assert params.rates is not None
            key = params.rates
        else:
            assert params.means is not None
            key = params.means[:, 0]
        order = np.argsort(key, kind="stable")
        if np.array_equal(order, np.arange(len(order))):
            return params
        return params.permuted(order)

    def canonicalize_vector(self, vector: np.ndarray) -> np.ndarray:
        return self.canonicalize(self.unflatten(vector)).flatten()

    def floors_active(self, params: MixtureParams, rtol: float = 1e-9) -> bool:
        """True when any weight, variance or rate sits at its floor."""
        if np.any(params.weights <= self.weight_floor * (1 + rtol)):
            return True
        if params.rates is not None:
            return bool(np.any(params.rates <= self.rate_floor * (1 + rtol)))
        assert params.log_variances is not None
        return bool(np.any(params.log_variances <= np.log(self.variance_floor) + rtol))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Fixed observed data ``y``: ``n`` observations of ``d`` features.

    Parameters
    ----------
    observations : array_like
        Shape ``(n, d)``; a 1D array is read as ``d = 1``.
    """

    observations: Float[np.ndarray, "n d"]

    def __post_init__(self) -> None:
        y = np.asarray(self.observations, dtype=np.float64)
        if y.ndim == 1:
            y = y.reshape(-1, 1)
        if y.ndim != 2:
            raise DatasetError(f"observations must be 2D, got shape {y.shape}")
        bad = np.flatnonzero(~np.all(np.isfinite(y), axis=1))
        if bad.size:
            raise DatasetError(f"observation {bad[0]} contains non-finite values")
        object.__setattr__(self, "observations", np.ascontiguousarray(y))

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def dim(self) -> int:
        return self.observations.shape[1]

    def check(self, spec: ModelSpec) -> None:
        """Raise :class:`DatasetError` unless the data fits ``spec``."""
        if self.n < 1:
            raise DatasetError("dataset is empty")
        if self.dim != spec.data_dim:
            raise DatasetError(
                f"dataset has {self.dim} features, model expects {spec.data_dim}"
            )
        if spec.family == "poisson":
            y = self.observations
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise DatasetError("poisson data must be non-negative integers")

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "Dataset":
        """Read a CSV with header ``x1,...,xd``, one observation per row."""
        frame = pd.read_csv(path, dtype=np.float64)
        expected = [f"x{i + 1}" for i in range(frame.shape[1])]
        if list(frame.columns) != expected or not expected:
            raise DatasetError(
                f"{path}: header must be {','.join(expected) or 'x1,...'}, "
                f"got {','.join(map(str, frame.columns))}"
            )
        return cls(frame.to_numpy().reshape(len(frame), len(expected)))

    def to_csv(self, path: Union[str, Path]) -> None:
        columns = [f"x{i + 1}" for i in range(self.dim)]
        frame = pd.DataFrame(self.observations, columns=columns)
        frame.to_csv(path, index=False, float_format="%.17g")


@dataclass(frozen=True, eq=False)
class Responsibilities:
    """Posterior component probabilities, one row per observation.

    ``values`` is row-stochastic; ``log_values`` holds the same quantities in
    log space and stays finite even where ``values`` underflows to zero.
    """

    values: Float[np.ndarray, "n K"]
    log_values: Float[np.ndarray, "n K"]

    @property
    def column_mass(self) -> np.ndarray:
        return self.values.sum(axis=0)


def _log_component_densities(
    spec: ModelSpec, theta: MixtureParams, data: Dataset
) -> np.ndarray:
    y = data.observations
    if spec.family == "poisson":
        assert theta.rates is not None
        counts = y[:, 0][:, None]
        return counts * np.log(theta.rates)[None, :] - theta.rates[None, :] - gammaln(
            counts + 1.0
        )
    assert theta.means is not None and theta.log_variances is not None
    out = np.empty((data.n, spec.n_components))
    return _diag_gaussian_log_density(
        y,
        np.ascontiguousarray(theta.means, dtype=np.float64),
        np.ascontiguousarray(theta.log_variances, dtype=np.float64),
        out,
    )


def _log_joint(spec: ModelSpec, theta: MixtureParams, data: Dataset) -> np.ndarray:
    """``log w_j + log p_j(y_i)`` for every observation and component."""
    return np.log(theta.weights)[None, :] + _log_component_densities(spec, theta, data)


def _per_observation_loglik(log_joint: np.ndarray) -> np.ndarray:
    per_obs = logsumexp(log_joint, axis=1)
    bad = np.flatnonzero(~np.isfinite(per_obs))
    if bad.size:
        raise NumericalError(
            f"non-finite likelihood contribution at observation {bad[0]} "
            f"(value {per_obs[bad[0]]!r})"
        )
    return per_obs


def _responsibilities_from_joint(log_joint: np.ndarray) -> Responsibilities:
    log_r = log_joint - _per_observation_loglik(log_joint)[:, None]
    return Responsibilities(values=np.exp(log_r), log_values=log_r)


def log_likelihood(spec: ModelSpec, theta: MixtureParams, data: Dataset) -> float:
    """Observed-data log-likelihood ``sum_i log sum_j w_j p_j(y_i)``.

    Parameters
    ----------
    spec : ModelSpec
        Model description.
    theta : MixtureParams
        Parameter point; validated against ``spec``.
    data : Dataset
        Observed data.

    Returns
    -------
    float
        Finite log-likelihood.

    Raises
    ------
    NumericalError
        If the contribution of some observation is not finite; the message
        names the observation index.
    """
    spec.validate(theta)
    return float(_per_observation_loglik(_log_joint(spec, theta, data)).sum())


def responsibilities(
    spec: ModelSpec, theta: MixtureParams, data: Dataset
) -> Responsibilities:
    """Posterior ``p_theta(z_i = j | y_i)`` by Bayes' rule, in log space."""
    spec.validate(theta)
    return _responsibilities_from_joint(_log_joint(spec, theta, data))


def q_function(
    spec: ModelSpec, theta: MixtureParams, theta_prime: MixtureParams, data: Dataset
) -> float:
    """Expected complete-data log-likelihood ``Q(theta, theta_prime)``.

    The expectation is taken under the responsibilities of ``theta_prime``:
    ``Q = sum_ij r'_ij [log w_j + log p_j(y_i; theta)]``.
    """
    spec.validate(theta)
    resp = responsibilities(spec, theta_prime, data)
    return _q_with_responsibilities(spec, theta, resp, data)


def _q_with_responsibilities(
    spec: ModelSpec, theta: MixtureParams, resp: Responsibilities, data: Dataset
) -> float:
    return float(np.sum(resp.values * _log_joint(spec, theta, data)))


def posterior_kl(
    spec: ModelSpec, theta_prime: MixtureParams, theta: MixtureParams, data: Dataset
) -> float:
    """``D_KL(theta_prime || theta)`` between the posteriors over assignments.

    Sum over observations of the categorical divergence from
    ``r(theta)`` to ``r(theta_prime)``; non-negative and exactly zero when
    both arguments are the same point.
    """
    r_prime = responsibilities(spec, theta_prime, data)
    r = responsibilities(spec, theta, data)
    return float(np.sum(r_prime.values * (r_prime.log_values - r.log_values)))


def posterior_entropy(
    spec: ModelSpec, theta_prime: MixtureParams, data: Dataset
) -> float:
    """Shannon entropy of the posterior over assignments, ``0 <= H <= n log K``."""
    r = responsibilities(spec, theta_prime, data)
    return float(-np.sum(r.values * r.log_values))


def m_step(spec: ModelSpec, theta_prime: MixtureParams, data: Dataset) -> MixtureParams:
    """Closed-form maximizer of ``Q(., theta_prime)``.

    Weights are the column means of the responsibilities, means and variances
    their weighted sample moments (Poisson: weighted mean counts). Frozen
    groups are copied from ``theta_prime``. Floors are applied afterwards.

    Parameters
    ----------
    spec : ModelSpec
        Model description.
    theta_prime : MixtureParams
        Current iterate defining the responsibilities.
    data : Dataset
        Observed data.

    Returns
    -------
    MixtureParams
        The updated parameters. ``degenerate`` is set when some component
        carried less than ``1e-10 * n`` responsibility mass; such components
        keep their previous location and scale.
    """
    resp = responsibilities(spec, theta_prime, data).values
    y = data.observations
    n = data.n
    mass = resp.sum(axis=0)
    empty = mass < DEGENERACY_MASS * n
    safe_mass = np.where(empty, 1.0, mass)

    if "weights" in spec.frozen:
        weights = theta_prime.weights.copy()
    else:
        weights = mass / n
        if np.any(weights < spec.weight_floor):
            weights = spec.weight_floor + (1.0 - spec.n_components * spec.weight_floor) * weights

    if spec.family == "poisson":
        assert theta_prime.rates is not None
        if "rates" in spec.frozen:
            rates = theta_prime.rates.copy()
        else:
            rates = (resp.T @ y[:, 0]) / safe_mass
            rates = np.where(empty, theta_prime.rates, rates)
            rates = np.maximum(rates, spec.rate_floor)
        out = MixtureParams(weights=weights, rates=rates, degenerate=bool(empty.any()))
    else:
        assert theta_prime.means is not None and theta_prime.log_variances is not None
        if "means" in spec.frozen:
            means = theta_prime.means.copy()
        else:
            means = (resp.T @ y) / safe_mass[:, None]
            means = np.where(empty[:, None], theta_prime.means, means)
        if "variances" in spec.frozen:
            log_variances = theta_prime.log_variances.copy()
        else:
            sq = (y[None, :, :] - means[:, None, :]) ** 2
            variances = np.einsum("nk,knd->kd", resp, sq) / safe_mass[:, None]
            variances = np.maximum(variances, spec.variance_floor)
            log_variances = np.where(
                empty[:, None], theta_prime.log_variances, np.log(variances)
            )
        out = MixtureParams(
            weights=weights,
            means=means,
            log_variances=log_variances,
            degenerate=bool(empty.any()),
        )
    if out.degenerate:
        warnings.warn(
            f"components {np.flatnonzero(empty).tolist()} carry less than "
            f"{DEGENERACY_MASS} * n responsibility mass; floors applied",
            RuntimeWarning,
        )
    return out


def q_gradient(
    spec: ModelSpec, theta: MixtureParams, resp: Responsibilities, data: Dataset
) -> np.ndarray:
    """Gradient of ``Q(., theta_prime)`` at ``theta`` in flattened coordinates.

    ``resp`` are the responsibilities of ``theta_prime``. The result is
    projected onto the admissible directions (frozen coordinates zeroed,
    weight block made sum-zero).
    """
    r = resp.values
    mass = r.sum(axis=0)
    grad = [mass / theta.weights]
    y = data.observations
    if spec.family == "poisson":
        assert theta.rates is not None
        grad.append((r.T @ y[:, 0]) / theta.rates - mass)
    else:
        assert theta.means is not None and theta.log_variances is not None
        precision = np.exp(-theta.log_variances)
        diff = y[None, :, :] - theta.means[:, None, :]
        grad.append((np.einsum("nk,knd->kd", r, diff) * precision).ravel())
        grad.append(
            (
                -0.5 * mass[:, None]
                + 0.5 * np.einsum("nk,knd->kd", r, diff**2) * precision
            ).ravel()
        )
    return spec.project_tangent(np.concatenate(grad))


def sample(
    spec: ModelSpec, theta: MixtureParams, n: int, rng: np.random.Generator
) -> Dataset:
    """Draw ``n`` observations: a component label per row, then the family draw."""
    spec.validate(theta)
    labels = rng.choice(spec.n_components, size=n, p=theta.weights)
    if spec.family == "poisson":
        assert theta.rates is not None
        y = rng.poisson(theta.rates[labels]).astype(np.float64).reshape(n, 1)
    else:
        assert theta.means is not None and theta.variances is not None
        noise = rng.standard_normal((n, spec.data_dim))
        y = theta.means[labels] + np.sqrt(theta.variances[labels]) * noise
    return Dataset(y.reshape(n, spec.data_dim))
