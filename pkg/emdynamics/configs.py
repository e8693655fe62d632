"""Default configuration for emdynamics models, solvers and diagnostics.

This module loads the default configuration from ``configs/default.yaml``
and exposes it as module-level constants. These defaults can be used
directly or merged with user overrides.

Attributes
----------
DEFAULT_CONFIG : OmegaConf
    The complete default configuration.
DEFAULT_MODEL_CONFIG : OmegaConf
    Mixture family, number of components, floors and frozen groups.
DEFAULT_SOLVER_CONFIG : OmegaConf
    EM / delta-EM loop settings, including the inner ascent of delta-EM.
DEFAULT_STABILITY_CONFIG : OmegaConf
    Sampling radii, sample counts and tolerances used for certification.
DEFAULT_BASIN_CONFIG : OmegaConf
    Map factory (``_target_``) and sampling settings for basin mapping.
DEFAULT_SYNTH_CONFIG : OmegaConf
    Generative parameters for synthetic datasets.

Examples
--------
Using default config directly:

>>> from emdynamics.configs import DEFAULT_CONFIG
>>> from omegaconf import OmegaConf
>>> print(OmegaConf.to_yaml(DEFAULT_CONFIG))

Customizing configuration:

>>> from emdynamics.configs import DEFAULT_SOLVER_CONFIG
>>> cfg = DEFAULT_SOLVER_CONFIG.copy()
>>> cfg.delta = 1e-3
>>> cfg.max_iters = 5000

See Also
--------
SolverConfig : Typed view over the ``solver`` block.
ModelSpec : Typed view over the ``model`` block.
"""

from pathlib import Path
from typing import Any, Mapping, Optional, Union

from omegaconf import DictConfig, OmegaConf

# get config relative to this file
script_dir = Path(__file__).parent
config_path = script_dir / ".." / "configs" / "default.yaml"
config_path = config_path.resolve()
cfg = OmegaConf.load(config_path)

DEFAULT_CONFIG = cfg
DEFAULT_MODEL_CONFIG = cfg.model
DEFAULT_SOLVER_CONFIG = cfg.solver
DEFAULT_STABILITY_CONFIG = cfg.stability
DEFAULT_BASIN_CONFIG = cfg.basin
DEFAULT_SYNTH_CONFIG = cfg.synth


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> DictConfig:
    """Merge a user config file and explicit overrides over the defaults.

    Parameters
    ----------
    path : str or pathlib.Path, optional
        JSON or YAML file with any subset of the default keys.
    overrides : mapping, optional
        Nested values applied last (e.g. ``{"solver": {"delta": 1e-3}}``).

    Returns
    -------
    DictConfig
        A fresh config; the module-level defaults are never mutated.
    """
    merged = OmegaConf.merge(DEFAULT_CONFIG)
    if path is not None:
        merged = OmegaConf.merge(merged, OmegaConf.load(Path(path)))
    if overrides:
        merged = OmegaConf.merge(merged, OmegaConf.create(dict(overrides)))
    assert isinstance(merged, DictConfig)
    return merged
