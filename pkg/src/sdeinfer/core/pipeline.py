"""Build the numerical objects of a run from a PipelineConfig.

Every CLI stage reconstructs mesh, prior and forward model from the same
config, so two stages given one config always agree on them.
"""

from typing import Callable, Optional

import numpy as np

from sdeinfer.core.bip import FokkerPlanckModel, MfptModel, Misfit, PtoModel
from sdeinfer.core.config import PipelineConfig
from sdeinfer.core.data import ObservationSet
from sdeinfer.core.errors import ConfigurationError
from sdeinfer.core.fem import Mesh1d, ParameterField, interpolate
from sdeinfer.core.laplace import LowRankPosterior, randomized_gevd, truncate_rank
from sdeinfer.core.optimize import MapProblem, MapResult, map_estimate
from sdeinfer.core.presets import model_from_config, prior_mean_values
from sdeinfer.core.prior import GaussianMeasure, MaternPrior
from sdeinfer.core.sde import InitialCondition


def data_domain(config: PipelineConfig) -> tuple[float, float]:
    return config.data["domain_left_state"], config.data["domain_right_state"]


def observation_sites(config: PipelineConfig) -> np.ndarray:
    """Equispaced MFPT sites strictly inside the data domain."""
    a, b = data_domain(config)
    return np.linspace(a, b, config.data["n_sites"] + 2)[1:-1]


def kde_grid(config: PipelineConfig) -> np.ndarray:
    a, b = data_domain(config)
    return np.linspace(a, b, config.data["kde_grid_points"])


def snapshot_times(config: PipelineConfig) -> list[float]:
    """Snapshot times 0, dT, 2dT, ... up to the ensemble horizon."""
    sim = config.simulation
    dt, interval = sim["dt_time"], sim["snapshot_interval_time"]
    n_intervals = int(np.floor(sim["n_steps"] * dt / interval + 1e-9))
    steps_per_interval = interval / dt
    if abs(steps_per_interval - round(steps_per_interval)) > 1e-9 * steps_per_interval:
        raise ConfigurationError(
            f"simulation.snapshot_interval_time ({interval}) must be a multiple of simulation.dt_time ({dt})"
        )
    stride = int(round(steps_per_interval))
    return [k * stride * dt for k in range(n_intervals + 1)]


def observation_times(config: PipelineConfig) -> list[float] | None:
    """Configured Fokker-Planck observation times, or None for every snapshot after 0."""
    times = config.data["observation_times_time"]
    return [float(t) for t in times] if times else None


def initial_condition(config: PipelineConfig) -> InitialCondition:
    init = config.simulation["init"]
    return InitialCondition(kind=init["kind"], mean=init["mean_state"], variance=init["variance_state_sq"])


def build_mesh(config: PipelineConfig) -> Mesh1d:
    """Inference mesh: the exit domain for MFPT data, the truncated domain for Fokker-Planck data."""
    if config.data_kind == "mfpt":
        a, b = data_domain(config)
    else:
        a, b = config.mesh["fp_domain_left_state"], config.mesh["fp_domain_right_state"]
    return Mesh1d(a=a, b=b, n_cells=config.mesh["n_cells"])


def build_prior(config: PipelineConfig, mesh: Mesh1d) -> GaussianMeasure:
    components = []
    for name in ("drift", "log_diffusion"):
        settings = config.prior[name]
        mean = prior_mean_values(settings["mean"], name, mesh.nodes)
        components.append(MaternPrior.from_stats(mesh, settings["sigma2"], settings["rho"], mean=mean))
    return GaussianMeasure(*components)


def build_forward_model(config: PipelineConfig, mesh: Mesh1d, obs: ObservationSet) -> PtoModel:
    """Forward model matching the kind, locations and times of the observations."""
    if obs.kind != config.data_kind:
        raise ConfigurationError(
            f"Observations were prepared for data.kind = {obs.kind}, config says {config.data_kind}\n"
            "Rerun 'sdeinfer prepare' with this config"
        )
    if obs.kind == "mfpt":
        return MfptModel(mesh, obs.locations, n_moments=obs.n_moments)
    p0 = interpolate(mesh, initial_condition(config).density)
    return FokkerPlanckModel(mesh, obs.locations, p0=p0, times=obs.times, dt=config.fokker_planck["dt_time"])


def true_parameter(config: PipelineConfig, mesh: Mesh1d) -> ParameterField:
    """Nodal interpolant of the simulated (or effective) drift and log diffusion."""
    model = model_from_config(config.model)
    return ParameterField.from_functions(mesh, model.drift, model.diffusion_sq)


def solve_map(
    config: PipelineConfig, misfit: Misfit, prior: GaussianMeasure, callback: Optional[Callable[[dict], None]] = None
) -> MapResult:
    """Newton-CG MAP estimate with the solver settings of the config."""
    solver = config.solver
    return map_estimate(
        MapProblem(misfit, prior),
        tol_grad_rel=solver["tol_grad_rel"],
        tol_grad_abs=solver["tol_grad_abs"],
        max_newton=solver["max_newton"],
        cg_max=solver["cg_max"],
        cg_coarse_tol=solver["cg_coarse_tol"],
        gauss_newton=solver["gauss_newton"],
        preconditioned=solver["preconditioned"],
        callback=callback,
    )


def build_laplace(
    config: PipelineConfig, misfit: Misfit, prior: GaussianMeasure, result: MapResult, rng: np.random.Generator
) -> tuple[LowRankPosterior, np.ndarray]:
    """Laplace approximation at the MAP point from the Gauss-Newton Hessian.

    Returns:
        Tuple (posterior truncated to the retained rank, all computed eigenvalues)
    """
    lap = config.laplace
    rank = max(0, min(lap["rank"], prior.dim - lap["oversample"]))
    cache = result.final.cache
    eigvals, eigvecs = randomized_gevd(
        lambda v: misfit.hessian_vector(cache, v, gauss_newton=True),
        prior,
        rank,
        oversample=lap["oversample"],
        power_iters=lap["power_iters"],
        rng=rng,
    )
    retained = truncate_rank(eigvals, cap=rank, threshold=lap["threshold"])
    return LowRankPosterior(result.final.m, eigvals, eigvecs, prior).truncated(retained), eigvals
