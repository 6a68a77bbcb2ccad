"""Prepare command: observation vector and noise model from raw simulation output."""

import click

from sdeinfer.cli.common import pipeline_stage, stage_seeds, success
from sdeinfer.core.data import build_observation_set, collect_moments, density_data
from sdeinfer.core.pipeline import kde_grid, observation_times
from sdeinfer.core.sde import TrajectoryEnsemble, load_exit_time_samples
from sdeinfer.utils.io import write_csv, write_manifest
from sdeinfer.utils.paths import get_exit_times_dir, get_manifest_path, get_observations_path, get_stage_dir, require


@click.command()
@pipeline_stage
def prepare(config):
    """Estimate MFPT moments or kernel densities with their noise variances."""
    out = config.output_dir
    data_cfg = config.data

    if config.data_kind == "mfpt":
        exit_dir = get_exit_times_dir(out)
        require(exit_dir / "exit_times.json", "simulate")
        samples = load_exit_time_samples(exit_dir)
        data = collect_moments(samples, drop_odd=data_cfg["drop_odd"])
        metadata = {"n_traj": int(sum(s.n_traj for s in samples)), "censored": int(data.censored.sum())}
    else:
        sim_dir = get_stage_dir(out, "simulate")
        require(sim_dir / "trajectories.json", "simulate")
        ensemble = TrajectoryEnsemble.load(sim_dir)
        data = density_data(ensemble, kde_grid(config), data_cfg["kde_bandwidth_state"], observation_times(config))
        metadata = {"ensemble_seed": ensemble.seed}

    obs = build_observation_set(data, variance_floor=data_cfg["variance_floor"], metadata=metadata)
    obs_path = obs.save(get_observations_path(out))
    rows = obs.to_rows()
    label = "moment" if obs.kind == "mfpt" else "time"
    csv_path = write_csv(get_stage_dir(out, "prepare") / "data.csv", ["location", label, "value", "std"], list(rows.T))
    success(f"Prepared {obs.size} {obs.kind} observations ({obs.n_blocks} blocks x {obs.locations.size} locations)")

    manifest = get_manifest_path(out, "prepare")
    write_manifest(manifest, "prepare", config.to_dict(), stage_seeds(config, "prepare"), [obs_path, csv_path])
    success(f"Manifest: {manifest}")
