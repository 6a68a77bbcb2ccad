"""Pipeline configuration for sdeinfer.

A run is described by one YAML file whose nested keys mirror DEFAULT_CONFIG.
Missing keys take their defaults; unknown keys and wrongly typed values are
rejected before any work starts. Physical quantities carry their unit in
the key name (dt_time, domain_left_state, ...).
"""

import copy
from pathlib import Path
from typing import Any, Optional

import yaml

from sdeinfer.core.errors import ConfigurationError
from sdeinfer.core.presets import MODEL_PRESETS

DATA_KINDS = ("mfpt", "fokker-planck")


class PipelineConfig:
    """Validated configuration of one inference pipeline."""

    DEFAULT_CONFIG: dict = {
        "output_dir": "sdeinfer-out",
        "seed": 12345,
        "n_workers": 1,
        "model": {
            "preset": "single-scale",  # single-scale | multiscale | ou | custom
            "drift_poly": [0.0, -1.0],  # custom preset only, increasing degree
            "diffusion_sq_poly": [1.0],
            "multiscale": {"epsilon": 0.1, "q1": 1.0, "q2": 1.0, "nu": 1.0},
        },
        "simulation": {
            "dt_time": 1e-3,
            "n_traj": 200,  # per site for MFPT data, ensemble size for FP data
            "max_steps": 500001,  # exit-time horizon
            "n_steps": 101,  # ensemble length
            "snapshot_interval_time": 0.01,
            "init": {"kind": "normal", "mean_state": 0.0, "variance_state_sq": 0.5},
        },
        "data": {
            "kind": "mfpt",
            "domain_left_state": -1.0,
            "domain_right_state": 1.0,
            "n_sites": 21,
            "drop_odd": False,
            "variance_floor": 1e-8,
            "kde_bandwidth_state": 0.05,
            "kde_grid_points": 41,
            "observation_times_time": [],  # empty: every snapshot after t = 0
        },
        "mesh": {
            "n_cells": 200,
            "fp_domain_left_state": -4.0,
            "fp_domain_right_state": 4.0,
        },
        "fokker_planck": {"dt_time": 1e-3},
        "prior": {
            "drift": {"mean": "ou", "sigma2": 4.0, "rho": 1.0},
            "log_diffusion": {"mean": "ou", "sigma2": 1.0, "rho": 1.0},
        },
        "solver": {
            "tol_grad_rel": 1e-6,
            "tol_grad_abs": 1e-12,
            "max_newton": 30,
            "cg_max": 200,
            "cg_coarse_tol": 0.5,
            "gauss_newton": True,
            "preconditioned": True,
        },
        "laplace": {"rank": 40, "oversample": 10, "power_iters": 1, "threshold": 0.1},
        "mcmc": {"n_steps": 2000, "burn_in": 500, "thin": 1, "h": 0.1, "tune": False, "n_tune": 200},
        "predict": {"n_samples": 50},
    }

    # Keys accepting more than the type of their default
    FLEXIBLE_TYPES = {
        "prior.drift.mean": (str, int, float),
        "prior.log_diffusion.mean": (str, int, float),
    }

    def __init__(self, data: Optional[dict] = None, source: Optional[Path] = None):
        """Initialize PipelineConfig.

        Args:
            data: User values, merged over DEFAULT_CONFIG
            source: File the values came from, for messages and manifests
        """
        self.source = source
        self._data = _merge(copy.deepcopy(self.DEFAULT_CONFIG), data or {}, self.FLEXIBLE_TYPES, "")
        self.validate()

    @classmethod
    def from_file(cls, path: Path) -> "PipelineConfig":
        """Load and validate a YAML configuration file.

        Raises:
            ConfigurationError: If the file cannot be parsed or fails validation
        """
        try:
            with open(path) as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Failed to parse config file {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file {path} must contain a mapping at the top level")
        return cls(data, source=Path(path))

    def save(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            yaml.dump(self._data, f, default_flow_style=False, sort_keys=False)
        return path

    def to_dict(self) -> dict:
        return copy.deepcopy(self._data)

    def get(self, dotted: str) -> Any:
        node: Any = self._data
        for part in dotted.split("."):
            node = node[part]
        return node

    def validate(self) -> None:
        """Range and choice checks that the type merge cannot express.

        Raises:
            ConfigurationError: Naming the offending key and the allowed values
        """
        d = self._data
        _choice("model.preset", d["model"]["preset"], MODEL_PRESETS)
        _choice("data.kind", d["data"]["kind"], DATA_KINDS)
        _choice("simulation.init.kind", d["simulation"]["init"]["kind"], ("point", "normal"))
        for key in (
            "simulation.dt_time",
            "simulation.snapshot_interval_time",
            "fokker_planck.dt_time",
            "data.kde_bandwidth_state",
            "data.variance_floor",
            "prior.drift.sigma2",
            "prior.drift.rho",
            "prior.log_diffusion.sigma2",
            "prior.log_diffusion.rho",
            "solver.cg_coarse_tol",
            "mcmc.h",
            "model.multiscale.epsilon",
        ):
            _positive(key, self.get(key))
        for key in (
            "simulation.n_traj",
            "simulation.max_steps",
            "simulation.n_steps",
            "data.n_sites",
            "data.kde_grid_points",
            "mesh.n_cells",
            "solver.max_newton",
            "solver.cg_max",
            "mcmc.n_steps",
            "mcmc.thin",
            "n_workers",
        ):
            _positive(key, self.get(key))
        if not 0 < d["solver"]["tol_grad_rel"] < 1:
            raise ConfigurationError(f"solver.tol_grad_rel must lie in (0, 1), got {d['solver']['tol_grad_rel']}")
        if d["data"]["domain_left_state"] >= d["data"]["domain_right_state"]:
            raise ConfigurationError("data.domain_left_state must be smaller than data.domain_right_state")
        if d["mesh"]["fp_domain_left_state"] >= d["mesh"]["fp_domain_right_state"]:
            raise ConfigurationError("mesh.fp_domain_left_state must be smaller than mesh.fp_domain_right_state")
        if d["mcmc"]["burn_in"] < 0 or d["mcmc"]["n_steps"] <= d["mcmc"]["burn_in"]:
            raise ConfigurationError("mcmc.n_steps must exceed mcmc.burn_in >= 0")
        if d["seed"] < 0:
            raise ConfigurationError(f"seed must be non-negative, got {d['seed']}")
        if d["model"]["preset"] == "custom" and not d["model"]["drift_poly"]:
            raise ConfigurationError("model.drift_poly must list at least one coefficient")
        if d["data"]["kind"] == "fokker-planck":
            if d["simulation"]["init"]["kind"] != "normal":
                raise ConfigurationError("Fokker-Planck data needs simulation.init.kind = normal (p0 must have a density)")
            if not (
                d["mesh"]["fp_domain_left_state"] <= d["data"]["domain_left_state"]
                and d["data"]["domain_right_state"] <= d["mesh"]["fp_domain_right_state"]
            ):
                raise ConfigurationError("The KDE grid (data.domain_*) must lie inside the Fokker-Planck mesh (mesh.fp_domain_*)")
        elif d["model"]["preset"] == "multiscale":
            raise ConfigurationError(
                "model.preset = multiscale simulates snapshot ensembles only\nUse data.kind = fokker-planck"
            )
        for component in ("drift", "log_diffusion"):
            mean = d["prior"][component]["mean"]
            if isinstance(mean, str) and mean != "ou":
                raise ConfigurationError(f"prior.{component}.mean must be 'ou' or a number, got '{mean}'")

    @property
    def output_dir(self) -> Path:
        return Path(self._data["output_dir"]).expanduser()

    @output_dir.setter
    def output_dir(self, value: Path):
        self._data["output_dir"] = str(value)

    @property
    def seed(self) -> int:
        return int(self._data["seed"])

    @seed.setter
    def seed(self, value: int):
        if value < 0:
            raise ConfigurationError(f"seed must be non-negative, got {value}")
        self._data["seed"] = int(value)

    @property
    def n_workers(self) -> int:
        return int(self._data["n_workers"])

    @property
    def data_kind(self) -> str:
        return self._data["data"]["kind"]

    @property
    def model(self) -> dict:
        return self._data["model"]

    @property
    def simulation(self) -> dict:
        return self._data["simulation"]

    @property
    def data(self) -> dict:
        return self._data["data"]

    @property
    def mesh(self) -> dict:
        return self._data["mesh"]

    @property
    def fokker_planck(self) -> dict:
        return self._data["fokker_planck"]

    @property
    def prior(self) -> dict:
        return self._data["prior"]

    @property
    def solver(self) -> dict:
        return self._data["solver"]

    @property
    def laplace(self) -> dict:
        return self._data["laplace"]

    @property
    def mcmc(self) -> dict:
        return self._data["mcmc"]

    @property
    def predict(self) -> dict:
        return self._data["predict"]


def _type_ok(value: Any, default: Any, allowed: Optional[tuple]) -> bool:
    if allowed is not None:
        return isinstance(value, allowed) and not isinstance(value, bool)
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


def _merge(defaults: dict, user: dict, flexible: dict, prefix: str) -> dict:
    for key, value in user.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            allowed = ", ".join(sorted(defaults))
            raise ConfigurationError(f"Unknown config key: '{dotted}'\nAllowed keys here: {allowed}")
        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"Config key '{dotted}' must be a mapping")
            _merge(default, value, flexible, f"{dotted}.")
            continue
        if not _type_ok(value, default, flexible.get(dotted)):
            raise ConfigurationError(
                f"Config key '{dotted}' has type {type(value).__name__}, expected {type(default).__name__}"
            )
        defaults[key] = float(value) if isinstance(default, float) else value
    return defaults


def _choice(key: str, value: Any, choices) -> None:
    if value not in choices:
        raise ConfigurationError(f"Invalid {key}: '{value}'. Must be one of: {', '.join(choices)}")


def _positive(key: str, value: Any) -> None:
    if not value > 0:
        raise ConfigurationError(f"{key} must be positive, got {value}")
