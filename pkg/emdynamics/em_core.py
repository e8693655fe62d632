from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Any, Callable, List, Mapping, Optional

import numpy as np
import pandas as pd

from .balls import Ball
from .errors import InvalidParameterError, NumericalError
from .models import (
    Dataset,
    MixtureParams,
    ModelSpec,
    _q_with_responsibilities,
    log_likelihood,
    m_step,
    posterior_kl,
    q_function,
    q_gradient,
    responsibilities,
)
from .utils import make_rng

logger = logging.getLogger(__name__)

StepFn = Callable[[MixtureParams], MixtureParams]

# monotonicity is checked relative to the magnitude of the log-likelihood
MONOTONE_RTOL = 1e-12
# backtracking gives up once the trial step is this small relative to delta
MIN_STEP_FRACTION = 1e-14


@dataclass(frozen=True)
class InnerAscentConfig:
    """Settings for the constrained Q-ascent inside a delta-EM step.

    Parameters
    ----------
    max_steps : int, default=200
        Maximum number of projected gradient steps.
    init_step : float, optional
        First trial step length; ``None`` means ``delta / 4``.
    shrink : float, default=0.5
        Backtracking factor in ``(0, 1)``.
    grad_tol : float, default=1e-10
        Stop once the projected gradient norm falls below this value.
    """

    max_steps: int = 200
    init_step: Optional[float] = None
    shrink: float = 0.5
    grad_tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.max_steps < 0:
            raise InvalidParameterError("inner_ascent.max_steps must be >= 0")
        if not 0.0 < self.shrink < 1.0:
            raise InvalidParameterError(
                f"inner_ascent.shrink must lie in (0, 1), got {self.shrink}"
            )
        if self.init_step is not None and self.init_step <= 0:
            raise InvalidParameterError("inner_ascent.init_step must be positive")


@dataclass(frozen=True)
class SolverConfig:
    """Settings of the EM / delta-EM loop.

    Parameters
    ----------
    max_iters : int, default=1000
        Iteration budget, at least 1.
    step_tol : float, default=1e-10
        The run is ``converged`` once ``||theta_{k+1} - theta_k||`` drops
        below this value.
    delta : float, optional
        Ball radius of delta-EM. ``None`` runs plain EM.
    inner_ascent : InnerAscentConfig
        Settings of the constrained M-step used by delta-EM.
    log_every : int, default=50
        Log a progress line every this many iterations (0 disables).

    See Also
    --------
    emdynamics.configs.DEFAULT_SOLVER_CONFIG : YAML defaults for this class.
    """

    max_iters: int = 1000
    step_tol: float = 1e-10
    delta: Optional[float] = None
    inner_ascent: InnerAscentConfig = field(default_factory=InnerAscentConfig)
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise InvalidParameterError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.step_tol > 0:
            raise InvalidParameterError(f"step_tol must be > 0, got {self.step_tol}")
        if self.delta is not None and not self.delta > 0:
            raise InvalidParameterError(f"delta must be > 0, got {self.delta}")

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "SolverConfig":
        inner = dict(cfg.get("inner_ascent", None) or {})
        delta = cfg.get("delta", None)
        init_step = inner.get("init_step", None)
        return cls(
            max_iters=int(cfg.get("max_iters", 1000)),
            step_tol=float(cfg.get("step_tol", 1e-10)),
            delta=None if delta is None else float(delta),
            inner_ascent=InnerAscentConfig(
                max_steps=int(inner.get("max_steps", 200)),
                init_step=None if init_step is None else float(init_step),
                shrink=float(inner.get("shrink", 0.5)),
                grad_tol=float(inner.get("grad_tol", 1e-10)),
            ),
            log_every=int(cfg.get("log_every", 50)),
        )

    def to_dict(self) -> dict:
        return {
            "max_iters": self.max_iters,
            "step_tol": self.step_tol,
            "delta": self.delta,
            "log_every": self.log_every,
            "inner_ascent": {
                "max_steps": self.inner_ascent.max_steps,
                "init_step": self.inner_ascent.init_step,
                "shrink": self.inner_ascent.shrink,
                "grad_tol": self.inner_ascent.grad_tol,
            },
        }


class TerminalStatus(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    DEGENERATE = "degenerate"


TRAJECTORY_COLUMNS = (
    "k",
    "loglik",
    "step_norm",
    "ascent_slack",
    "kl_to_next",
    "q_gain",
)


@dataclass(eq=False)
class Trajectory:
    """Finite prefix ``theta_0, theta_1, ...`` of an EM or delta-EM run.

    Row ``k`` stores ``theta_k`` (flattened), ``log L(theta_k)`` and
    ``||theta_k - theta_{k-1}||`` (zero for ``k = 0``). The next-step
    diagnostics of row ``k`` describe the transition ``k -> k+1``:

    * ``kl_to_next = D_KL(theta_k || theta_{k+1})``
    * ``ascent_slack = log L(theta_{k+1}) - log L(theta_k) - kl_to_next``
    * ``q_gain = Q(theta_{k+1}, theta_k) - Q(theta_k, theta_k)``

    They are NaN on the last row.
    """

    spec: ModelSpec
    thetas: np.ndarray
    logliks: np.ndarray
    step_norms: np.ndarray
    ascent_slack: np.ndarray
    kl_to_next: np.ndarray
    q_gain: np.ndarray
    status: TerminalStatus = TerminalStatus.MAX_ITERS
    delta: Optional[float] = None

    def __len__(self) -> int:
        return len(self.logliks)

    @property
    def n_iters(self) -> int:
        """Number of map applications, ``len(self) - 1``."""
        return len(self) - 1

    def state(self, k: int) -> MixtureParams:
        return self.spec.unflatten(self.thetas[k])

    @property
    def final(self) -> MixtureParams:
        return self.state(-1)

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.logliks))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            {
                "k": np.arange(len(self)),
                "loglik": self.logliks,
                "step_norm": self.step_norms,
                "ascent_slack": self.ascent_slack,
                "kl_to_next": self.kl_to_next,
                "q_gain": self.q_gain,
            }
        )
        for j in range(self.thetas.shape[1]):
            frame[f"theta_{j}"] = self.thetas[:, j]
        return frame

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        spec: ModelSpec,
        status: TerminalStatus = TerminalStatus.MAX_ITERS,
        delta: Optional[float] = None,
    ) -> "Trajectory":
        theta_cols = [f"theta_{j}" for j in range(spec.n_params)]
        missing = [c for c in (*TRAJECTORY_COLUMNS, *theta_cols) if c not in frame]
        if missing:
            raise InvalidParameterError(f"trajectory table lacks columns {missing}")
        return cls(
            spec=spec,
            thetas=frame[theta_cols].to_numpy(dtype=np.float64),
            logliks=frame["loglik"].to_numpy(dtype=np.float64),
            step_norms=frame["step_norm"].to_numpy(dtype=np.float64),
            ascent_slack=frame["ascent_slack"].to_numpy(dtype=np.float64),
            kl_to_next=frame["kl_to_next"].to_numpy(dtype=np.float64),
            q_gain=frame["q_gain"].to_numpy(dtype=np.float64),
            status=TerminalStatus(status),
            delta=delta,
        )

    def summary(self) -> dict:
        return {
            "status": self.status.value,
            "n_iters": self.n_iters,
            "final_loglik": float(self.logliks[-1]),
            "final_step_norm": float(self.step_norms[-1]),
            "max_step_norm": float(np.max(self.step_norms)),
            "min_ascent_slack": (
                float(np.nanmin(self.ascent_slack)) if len(self) > 1 else None
            ),
            "delta": self.delta,
        }


def em_step(spec: ModelSpec, theta_k: MixtureParams, data: Dataset) -> MixtureParams:
    """One application of the EM map ``F(theta) = argmax_t Q(t, theta)``."""
    return m_step(spec, theta_k, data)


def constrained_q_maximize(
    spec: ModelSpec,
    theta_k: MixtureParams,
    data: Dataset,
    delta: float,
    inner_cfg: Optional[InnerAscentConfig] = None,
) -> MixtureParams:
    """Increase ``Q(., theta_k)`` over the closed ball ``B_delta(theta_k)``.

    The closed-form M-step is accepted when it lies inside the ball. Otherwise
    projected gradient ascent runs from its radial projection onto the ball
    (or from ``theta_k`` if that projection does not improve Q), with
    normalized steps that are halved until Q strictly increases.

    Parameters
    ----------
    spec : ModelSpec
        Model description.
    theta_k : MixtureParams
        Current iterate and ball center.
    data : Dataset
        Observed data.
    delta : float
        Ball radius, positive.
    inner_cfg : InnerAscentConfig, optional
        Ascent settings.

    Returns
    -------
    MixtureParams
        A point of the ball with ``Q(out, theta_k) > Q(theta_k, theta_k)``,
        or ``theta_k`` itself with ``stalled=True`` when no such point was
        found.
    """
    if not delta > 0:
        raise InvalidParameterError(f"delta must be > 0, got {delta}")
    inner_cfg = inner_cfg or InnerAscentConfig()

    candidate = m_step(spec, theta_k, data)
    center = theta_k.flatten()
    ball = Ball(center, float(delta))
    if candidate.flatten() in ball:
        return candidate

    resp = responsibilities(spec, theta_k, data)

    def objective(vector: np.ndarray) -> float:
        params = spec.unflatten(vector)
        if not spec.is_valid(params):
            return -np.inf
        return _q_with_responsibilities(spec, params, resp, data)

    q_center = objective(center)
    start = ball.project(candidate.flatten())
    q_start = objective(start)
    if q_start >= q_center:
        x, qx = start, q_start
    else:
        x, qx = center.copy(), q_center

    init_step = inner_cfg.init_step or delta / 4.0
    step = init_step
    for _ in range(inner_cfg.max_steps):
        grad = q_gradient(spec, spec.unflatten(x), resp, data)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= inner_cfg.grad_tol:
            break
        direction = grad / grad_norm
        trial_step = step
        improved = False
        while trial_step > MIN_STEP_FRACTION * delta:
            trial = ball.project(x + trial_step * direction)
            q_trial = objective(trial)
            if q_trial > qx:
                improved = True
                break
            trial_step *= inner_cfg.shrink
        if not improved:
            break
        x, qx = trial, q_trial
        step = min(trial_step / inner_cfg.shrink, init_step)

    if qx > q_center:
        return spec.unflatten(x)
    logger.debug("constrained Q ascent stalled at %s", center)
    return replace(theta_k, stalled=True, degenerate=False)


def delta_em_step(
    spec: ModelSpec,
    theta_k: MixtureParams,
    data: Dataset,
    delta: float,
    inner: Optional[InnerAscentConfig] = None,
) -> MixtureParams:
    """One application of the delta-EM map, see :func:`constrained_q_maximize`."""
    return constrained_q_maximize(spec, theta_k, data, delta, inner)


def step_function(
    spec: ModelSpec,
    data: Dataset,
    delta: Optional[float] = None,
    inner: Optional[InnerAscentConfig] = None,
) -> StepFn:
    """Bind the EM map (``delta=None``) or the delta-EM map to ``spec`` and ``data``."""
    if delta is None:
        return partial(em_step, spec, data=data)
    return partial(delta_em_step, spec, data=data, delta=delta, inner=inner)


def _checked_loglik(
    spec: ModelSpec, theta: MixtureParams, data: Dataset, k: int
) -> float:
    vector = theta.flatten()
    if not np.all(np.isfinite(vector)):
        raise NumericalError(f"iterate {k} is not finite: {vector.tolist()}")
    try:
        value = log_likelihood(spec, theta, data)
    except NumericalError as e:
        raise NumericalError(f"iterate {k} ({vector.tolist()}): {e}") from e
    return value


def run(
    spec: ModelSpec,
    theta_0: MixtureParams,
    data: Dataset,
    config: Optional[SolverConfig] = None,
) -> Trajectory:
    """Iterate EM (or delta-EM when ``config.delta`` is set) from ``theta_0``.

    Parameters
    ----------
    spec : ModelSpec
        Model description.
    theta_0 : MixtureParams
        Initial point, validated against ``spec``.
    data : Dataset
        Observed data.
    config : SolverConfig, optional
        Loop settings; defaults to :class:`SolverConfig()`.

    Returns
    -------
    Trajectory
        Status ``converged`` iff a step shorter than ``step_tol`` occurred,
        ``degenerate`` if the M-step emptied a component, else ``max_iters``.

    Raises
    ------
    NumericalError
        If an iterate or its log-likelihood is not finite; the message
        contains the iterate.

    Examples
    --------
    >>> spec = ModelSpec("gaussian-diag", n_components=2, data_dim=1)
    >>> traj = run(spec, initialize(spec, data, seed=0), data)
    >>> traj.status
    <TerminalStatus.CONVERGED: 'converged'>
    """
    config = config or SolverConfig()
    spec.validate(theta_0)
    data.check(spec)
    step = step_function(spec, data, config.delta, config.inner_ascent)
    mode = "EM" if config.delta is None else f"delta-EM (delta={config.delta})"

    theta = theta_0
    ll = _checked_loglik(spec, theta, data, 0)
    thetas: List[np.ndarray] = [theta.flatten()]
    logliks = [ll]
    step_norms = [0.0]
    slack: List[float] = []
    kls: List[float] = []
    q_gains: List[float] = []
    status = TerminalStatus.MAX_ITERS

    for k in range(1, config.max_iters + 1):
        nxt = step(theta)
        ll_next = _checked_loglik(spec, nxt, data, k)
        kl = posterior_kl(spec, theta, nxt, data)
        q_gain = q_function(spec, nxt, theta, data) - q_function(spec, theta, theta, data)
        step_norm = float(np.linalg.norm(nxt.flatten() - theta.flatten()))

        kls.append(kl)
        slack.append(ll_next - ll - kl)
        q_gains.append(q_gain)
        thetas.append(nxt.flatten())
        logliks.append(ll_next)
        step_norms.append(step_norm)

        if ll_next < ll - MONOTONE_RTOL * (1.0 + abs(ll)):
            warnings.warn(
                f"log-likelihood decreased at iteration {k}: {ll!r} -> {ll_next!r}",
                RuntimeWarning,
            )
        if config.log_every and k % config.log_every == 0:
            logger.info(
                "%s iteration %d: loglik=%.10g step=%.3e", mode, k, ll_next, step_norm
            )
        if nxt.degenerate:
            status = TerminalStatus.DEGENERATE
            break
        if step_norm < config.step_tol:
            status = TerminalStatus.CONVERGED
            break
        theta, ll = nxt, ll_next

    nan = [np.nan]
    logger.info(
        "%s finished after %d iterations with status %s (loglik=%.10g)",
        mode,
        len(logliks) - 1,
        status.value,
        logliks[-1],
    )
    return Trajectory(
        spec=spec,
        thetas=np.vstack(thetas),
        logliks=np.asarray(logliks),
        step_norms=np.asarray(step_norms),
        ascent_slack=np.asarray(slack + nan),
        kl_to_next=np.asarray(kls + nan),
        q_gain=np.asarray(q_gains + nan),
        status=status,
        delta=config.delta,
    )


def initialize(spec: ModelSpec, data: Dataset, seed: Optional[int]) -> MixtureParams:
    """Seeded starting point: uniform weights and data-driven component parameters.

    Gaussian means are distinct observations drawn at random (with
    replacement only when ``n < K``), every variance is the pooled per-feature
    variance. Poisson rates are the sample mean scaled by uniform factors in
    ``[0.5, 1.5)``.
    """
    data.check(spec)
    rng = make_rng(seed)
    k = spec.n_components
    weights = np.full(k, 1.0 / k)
    y = data.observations
    if spec.family == "poisson":
        rates = y[:, 0].mean() * rng.uniform(0.5, 1.5, size=k)
        return MixtureParams.poisson(weights, np.maximum(rates, spec.rate_floor))
    rows = rng.choice(data.n, size=k, replace=data.n < k)
    means = y[rows].copy()
    pooled = np.maximum(y.var(axis=0), spec.variance_floor)
    log_variances = np.tile(np.log(pooled), (k, 1))
    return MixtureParams(weights=weights, means=means, log_variances=log_variances)
