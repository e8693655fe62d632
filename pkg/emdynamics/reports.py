"""Report bodies, run manifests and their on-disk formats.

Structured reports are JSON with sorted keys; per-iteration and per-sample
tables are CSV with 17 significant digits. Every JSON report has the shape
``{"manifest": RunManifest, "report": body}``; only ``manifest.wall_clock``
differs between two runs with identical inputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np
import pandas as pd
from omegaconf import DictConfig, OmegaConf

from . import __version__
from .em_core import TerminalStatus, Trajectory
from .errors import InvalidParameterError
from .lyapunov import LyapunovTrace
from .models import MixtureParams, ModelSpec

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
PathLike = Union[str, Path]


@dataclass(frozen=True)
class RunManifest:
    """Provenance of a report.

    Attributes
    ----------
    command : str
        Subcommand name.
    config : dict
        Fully merged configuration.
    dataset_sha256 : str, optional
        Hash of the input dataset file.
    seed : int, optional
        Root seed of the command.
    version : str
        emdynamics version.
    wall_clock : float
        Elapsed seconds; excluded from reproducibility comparisons.
    """

    command: str
    config: dict
    dataset_sha256: Optional[str]
    seed: Optional[int]
    version: str = __version__
    wall_clock: float = 0.0
    started: float = 0.0

    @classmethod
    def start(
        cls,
        command: str,
        config: Union[DictConfig, Mapping[str, Any]],
        dataset_path: Optional[PathLike] = None,
        seed: Optional[int] = None,
    ) -> "RunManifest":
        if isinstance(config, DictConfig):
            config = OmegaConf.to_container(config, resolve=True)  # type: ignore[assignment]
        return cls(
            command=command,
            config=dict(config),
            dataset_sha256=None if dataset_path is None else file_sha256(dataset_path),
            seed=seed,
            started=time.perf_counter(),
        )

    def finish(self) -> "RunManifest":
        return replace(self, wall_clock=time.perf_counter() - self.started)

    def to_dict(self, include_wall_clock: bool = True) -> dict:
        payload = {
            "command": self.command,
            "config": self.config,
            "dataset_sha256": self.dataset_sha256,
            "seed": self.seed,
            "version": self.version,
        }
        if include_wall_clock:
            payload["wall_clock"] = self.wall_clock
        return payload


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars and arrays to plain Python; non-finite floats become None."""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, TerminalStatus):
        return value.value
    return value


def dumps(payload: Any) -> str:
    return json.dumps(to_jsonable(payload), sort_keys=True, indent=2, allow_nan=False)


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(payload) + "\n")
    return path


def read_json(path: PathLike) -> Any:
    return json.loads(Path(path).read_text())


def write_report(path: PathLike, body: Mapping[str, Any], manifest: RunManifest) -> Path:
    """Write ``{"manifest": ..., "report": body}``."""
    path = write_json(path, {"manifest": manifest.finish().to_dict(), "report": body})
    logger.info("wrote %s", path)
    return path


def write_table(path: PathLike, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_params(path: PathLike, params: MixtureParams) -> Path:
    return write_json(path, params.to_dict())


def read_params(path: PathLike, spec: Optional[ModelSpec] = None) -> MixtureParams:
    """Read a MixtureParams JSON file, or the ``report.params`` of a report."""
    payload = read_json(path)
    if "report" in payload and "params" in payload["report"]:
        payload = payload["report"]["params"]
    return MixtureParams.from_dict(payload, spec)


def trajectory_frame(
    trajectory: Trajectory, trace: Optional[LyapunovTrace] = None
) -> pd.DataFrame:
    frame = trajectory.to_frame()
    if trace is not None:
        lyap = trace.to_frame()
        frame.insert(6, "V", lyap["V"].to_numpy())
        frame.insert(7, "dV", lyap["dV"].to_numpy())
        frame.insert(8, "slack", lyap["slack"].to_numpy())
    return frame


def write_trajectory(
    path: PathLike, trajectory: Trajectory, trace: Optional[LyapunovTrace] = None
) -> Path:
    return write_table(path, trajectory_frame(trajectory, trace))


def read_trajectory(
    path: PathLike,
    spec: ModelSpec,
    status: Union[str, TerminalStatus] = TerminalStatus.MAX_ITERS,
    delta: Optional[float] = None,
) -> Trajectory:
    frame = pd.read_csv(path)
    if frame.empty:
        raise InvalidParameterError(f"{path}: trajectory table is empty")
    return Trajectory.from_frame(frame, spec, TerminalStatus(status), delta)


def n_params_in_frame(frame: pd.DataFrame) -> int:
    return sum(1 for column in frame.columns if str(column).startswith("theta_"))
