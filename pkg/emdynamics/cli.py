"""Command line entry point.

Subcommands ``synth``, ``fit``, ``diagnose``, ``stability`` and ``basin``
share the flags ``--seed``, ``--config``, ``--out``, ``--delta`` and
``--log-level``. Exit codes: 0 on success, 2 for input errors, 3 for
numerical failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd
from omegaconf import DictConfig, OmegaConf

from .configs import load_config
from .em_core import SolverConfig, initialize, run
from .errors import InvalidParameterError
from .harness import basin_sample, build_system, find_limit_points
from .lyapunov import lyapunov_trace
from .models import Dataset, MixtureParams, ModelSpec, sample
from .reports import (
    RunManifest,
    n_params_in_frame,
    read_params,
    read_trajectory,
    write_params,
    write_report,
    write_table,
    write_trajectory,
)
from .stability import certify
from .utils import make_rng

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


def model_spec(
    cfg: DictConfig,
    data_dim: int,
    params: Optional[MixtureParams] = None,
    n_params: Optional[int] = None,
) -> ModelSpec:
    """``cfg.model`` with the shape taken from the inputs.

    The number of components comes from ``params`` when given, else from a
    flattened width ``n_params``, else from the configuration.
    """
    model: Dict[str, Any] = dict(OmegaConf.to_container(cfg.model, resolve=True))  # type: ignore[arg-type]
    model["data_dim"] = data_dim
    if params is not None:
        model["family"] = params.family
        model["n_components"] = params.n_components
    elif n_params is not None:
        per_component = 2 if model["family"] == "poisson" else 1 + 2 * data_dim
        if n_params % per_component:
            raise InvalidParameterError(
                f"{n_params} parameters do not fit family {model['family']} with d={data_dim}"
            )
        model["n_components"] = n_params // per_component
    return ModelSpec.from_config(model)


def synth_params(cfg: DictConfig) -> MixtureParams:
    synth = cfg.synth
    if synth.family == "poisson":
        return MixtureParams.poisson(list(synth.weights), list(synth.rates))
    return MixtureParams.gaussian(
        list(synth.weights),
        np.asarray(OmegaConf.to_container(synth.means), dtype=np.float64),
        np.asarray(OmegaConf.to_container(synth.variances), dtype=np.float64),
    )


def cmd_synth(cfg: DictConfig, out: Path, seed: int, n: Optional[int] = None) -> Path:
    """Sample a dataset from ``cfg.synth`` and write ``data.csv`` and ``synth.json``."""
    manifest = RunManifest.start("synth", cfg, seed=seed)
    params = synth_params(cfg)
    d = 1 if params.means is None else params.means.shape[1]
    spec = model_spec(cfg, d, params)
    n = int(cfg.synth.n if n is None else n)
    data = sample(spec, params, n, make_rng(seed))
    path = Path(out) / "data.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    data.to_csv(path)
    write_report(
        Path(out) / "synth.json", {"params": params.to_dict(), "n": n}, manifest
    )
    logger.info("sampled %d observations into %s", n, path)
    return path


def cmd_fit(
    cfg: DictConfig,
    data_path: Path,
    out: Path,
    seed: int,
    init_path: Optional[Path] = None,
) -> Dict[str, Any]:
    """Run EM (delta-EM when ``solver.delta`` is set) and write the trajectory.

    Outputs ``trajectory.csv`` (with Lyapunov columns), ``params.json`` (final
    iterate) and ``summary.json``.
    """
    manifest = RunManifest.start("fit", cfg, data_path, seed)
    data = Dataset.from_csv(data_path)
    init = None if init_path is None else read_params(init_path)
    spec = model_spec(cfg, data.dim, init)
    theta_0 = initialize(spec, data, seed) if init is None else init
    solver = SolverConfig.from_config(cfg.solver)
    trajectory = run(spec, theta_0, data, solver)
    trace = lyapunov_trace(spec, trajectory, data, units=cfg.stability.units)

    write_trajectory(Path(out) / "trajectory.csv", trajectory, trace)
    write_params(Path(out) / "params.json", trajectory.final)
    body = {
        **trajectory.summary(),
        "params": trajectory.final.to_dict(),
        "initial_params": theta_0.to_dict(),
        "lyapunov": {
            "units": trace.units,
            "log_scale": trace.log_scale,
            "max_dV": trace.max_decrement(),
            "min_V": float(np.min(trace.values)),
        },
    }
    write_report(Path(out) / "summary.json", body, manifest)
    return body


def cmd_diagnose(
    cfg: DictConfig,
    data_path: Path,
    trajectory_path: Path,
    out: Path,
    seed: int,
    theta_star_path: Optional[Path] = None,
) -> Dict[str, Any]:
    """Lyapunov columns for an existing trajectory CSV."""
    manifest = RunManifest.start("diagnose", cfg, data_path, seed)
    data = Dataset.from_csv(data_path)
    width = n_params_in_frame(pd.read_csv(trajectory_path, nrows=1))
    theta_star = None if theta_star_path is None else read_params(theta_star_path)
    spec = model_spec(cfg, data.dim, theta_star, n_params=width)
    trajectory = read_trajectory(trajectory_path, spec)
    trace = lyapunov_trace(spec, trajectory, data, theta_star, cfg.stability.units)
    frame = trace.to_frame()
    frame.insert(0, "k", np.arange(len(frame)))
    frame.insert(1, "loglik", trajectory.logliks)
    write_table(Path(out) / "diagnosis.csv", frame)

    finite_slack = trajectory.ascent_slack[np.isfinite(trajectory.ascent_slack)]
    logliks = trajectory.logliks
    monotone = np.all(np.diff(logliks) >= -1e-12 * (1.0 + np.abs(logliks[:-1])))
    body = {
        "units": trace.units,
        "log_scale": trace.log_scale,
        "theta_star": trace.theta_star,
        "n_iterates": len(trajectory),
        "max_dV": trace.max_decrement(),
        "min_V": float(np.min(trace.values)),
        "min_ascent_slack": float(finite_slack.min()) if finite_slack.size else None,
        "monotone": bool(monotone),
    }
    write_report(Path(out) / "diagnosis.json", body, manifest)
    return body


def cmd_stability(
    cfg: DictConfig,
    data_path: Path,
    theta_star_path: Path,
    out: Path,
    seed: int,
    radius: Optional[float] = None,
    n_samples: Optional[int] = None,
) -> Dict[str, Any]:
    """Classify ``theta*`` and write ``certificate.json``."""
    manifest = RunManifest.start("stability", cfg, data_path, seed)
    data = Dataset.from_csv(data_path)
    theta_star = read_params(theta_star_path)
    spec = model_spec(cfg, data.dim, theta_star)
    stab = cfg.stability
    certificate = certify(
        spec,
        theta_star,
        data,
        solver=SolverConfig.from_config(cfg.solver),
        radius=float(stab.radius if radius is None else radius),
        n_samples=int(stab.n_samples if n_samples is None else n_samples),
        seed=seed,
        units=stab.units,
        n_shells=int(stab.n_shells),
        shell_ratio=float(stab.shell_ratio),
        n_hessian_samples=int(stab.n_hessian_samples),
        grad_tol=float(stab.grad_tol),
        fixed_point_tol=float(stab.fixed_point_tol),
        eigen_margin=float(stab.eigen_margin),
        gradient_step=float(stab.gradient_step),
        hessian_step=float(stab.hessian_step),
        rate_window=int(stab.rate_window),
        rate_min_distance=float(stab.rate_min_distance),
        n_workers=int(cfg.parallel.n_workers),
    )
    body = certificate.to_dict()
    write_report(Path(out) / "certificate.json", body, manifest)
    return body


def cmd_basin(
    cfg: DictConfig,
    data_path: Path,
    out: Path,
    seed: int,
    theta_star_path: Optional[Path] = None,
    radius: Optional[float] = None,
    n_samples: Optional[int] = None,
    n_inits: Optional[int] = None,
) -> Dict[str, Any]:
    """Basin sampling around ``theta*``, or limit points of random initializations.

    Writes ``basin.json`` and ``basin.csv``.
    """
    manifest = RunManifest.start("basin", cfg, data_path, seed)
    data = Dataset.from_csv(data_path)
    theta_star = None if theta_star_path is None else read_params(theta_star_path)
    spec = model_spec(cfg, data.dim, theta_star)
    basin = cfg.basin
    system = build_system(basin.system, spec, data)
    n_inits = int(basin.n_inits if n_inits is None else n_inits)
    settings = dict(
        n=int(basin.max_iters),
        stop_tol=float(basin.stop_tol),
        merge_radius=float(basin.merge_radius),
        canonicalize=bool(basin.canonicalize),
        divergence_norm=float(basin.divergence_norm),
        n_workers=int(cfg.parallel.n_workers),
    )
    if n_inits > 0:
        inits = [initialize(spec, data, seed + i).flatten() for i in range(n_inits)]
        report = find_limit_points(system, inits, **settings)
        report.seed = seed
    elif theta_star is None:
        raise InvalidParameterError("basin needs --theta-star or --n-inits > 0")
    else:
        report = basin_sample(
            system,
            theta_star.flatten(),
            float(basin.radius if radius is None else radius),
            int(basin.n_samples if n_samples is None else n_samples),
            seed,
            **settings,
        )
    write_table(Path(out) / "basin.csv", report.to_frame())
    body = report.to_dict()
    write_report(Path(out) / "basin.json", body, manifest)
    return body


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Root seed (default: 0)")
    common.add_argument(
        "--config", type=Path, default=None, help="JSON or YAML file merged over the defaults"
    )
    common.add_argument("--out", type=Path, default=Path("."), help="Output directory")
    common.add_argument(
        "--delta", type=float, default=None, help="Run delta-EM with this ball radius"
    )
    common.add_argument("--log-level", default="INFO", help="Logging level (default: INFO)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="emdynamics",
        description="EM and delta-EM for finite mixtures, analysed as dynamical systems.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Sample a synthetic dataset")
    synth.add_argument("--n", type=int, default=None, help="Number of observations")

    fit = sub.add_parser("fit", parents=[common], help="Run EM or delta-EM")
    fit.add_argument("--data", type=Path, required=True)
    fit.add_argument("--init", type=Path, default=None, help="Initial MixtureParams JSON")

    diagnose = sub.add_parser(
        "diagnose", parents=[common], help="Lyapunov columns for a trajectory"
    )
    diagnose.add_argument("--data", type=Path, required=True)
    diagnose.add_argument("--trajectory", type=Path, required=True)
    diagnose.add_argument("--theta-star", type=Path, default=None)

    stability = sub.add_parser("stability", parents=[common], help="Certify an equilibrium")
    stability.add_argument("--data", type=Path, required=True)
    stability.add_argument("--theta-star", type=Path, required=True)
    stability.add_argument("--radius", type=float, default=None)
    stability.add_argument("--samples", type=int, default=None)

    basin = sub.add_parser("basin", parents=[common], help="Map basins of attraction")
    basin.add_argument("--data", type=Path, required=True)
    basin.add_argument("--theta-star", type=Path, default=None)
    basin.add_argument("--radius", type=float, default=None)
    basin.add_argument("--samples", type=int, default=None)
    basin.add_argument("--n-inits", type=int, default=None)
    return parser


def _dispatch(args: argparse.Namespace, cfg: DictConfig) -> None:
    if args.command == "synth":
        cmd_synth(cfg, args.out, args.seed, args.n)
    elif args.command == "fit":
        cmd_fit(cfg, args.data, args.out, args.seed, args.init)
    elif args.command == "diagnose":
        cmd_diagnose(cfg, args.data, args.trajectory, args.out, args.seed, args.theta_star)
    elif args.command == "stability":
        cmd_stability(
            cfg, args.data, args.theta_star, args.out, args.seed, args.radius, args.samples
        )
    elif args.command == "basin":
        cmd_basin(
            cfg,
            args.data,
            args.out,
            args.seed,
            args.theta_star,
            args.radius,
            args.samples,
            args.n_inits,
        )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    overrides: Dict[str, Any] = {}
    if args.delta is not None:
        overrides = {"solver": {"delta": args.delta}, "basin": {"system": {"delta": args.delta}}}
    try:
        cfg = load_config(args.config, overrides)
        _dispatch(args, cfg)
    except (ValueError, OSError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_INPUT
    except ArithmeticError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
