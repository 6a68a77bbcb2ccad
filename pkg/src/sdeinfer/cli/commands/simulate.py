"""Simulate command: raw trajectory data for the configured model."""

import click

from sdeinfer.cli.common import pipeline_stage, stage_seeds, success
from sdeinfer.core.pipeline import data_domain, initial_condition, observation_sites, snapshot_times
from sdeinfer.core.presets import model_from_config, multiscale_params
from sdeinfer.core.sde import simulate_ensemble, simulate_multiscale, simulate_site_grid, save_exit_time_samples
from sdeinfer.utils.io import write_manifest
from sdeinfer.utils.paths import get_exit_times_dir, get_manifest_path, get_stage_dir


@click.command()
@pipeline_stage
def simulate(config):
    """Simulate exit times (MFPT data) or a snapshot ensemble (Fokker-Planck data)."""
    out = config.output_dir
    seeds = stage_seeds(config, "simulate")
    seed = seeds["simulate"]
    sim = config.simulation
    extra = {}

    if config.data_kind == "mfpt":
        model = model_from_config(config.model)
        sites = observation_sites(config)
        click.echo(f"Simulating {sim['n_traj']} exit times at {sites.size} sites ({model.name})...")
        samples = simulate_site_grid(
            model,
            sites,
            data_domain(config),
            n_traj=sim["n_traj"],
            dt=sim["dt_time"],
            max_steps=sim["max_steps"],
            seed=seed,
            n_workers=config.n_workers,
        )
        files = save_exit_time_samples(samples, get_exit_times_dir(out), model_spec={"name": model.name, **model.spec})
        censored = sum(s.censored_count for s in samples)
        extra["censored"] = censored
        success(f"Wrote {len(samples)} exit-time files ({censored} censored trajectories)")
    else:
        times = snapshot_times(config)
        init = initial_condition(config)
        click.echo(f"Simulating {sim['n_traj']} trajectories, {len(times)} snapshots...")
        if config.model["preset"] == "multiscale":
            ensemble = simulate_multiscale(
                multiscale_params(config.model),
                init,
                n_traj=sim["n_traj"],
                n_steps=sim["n_steps"],
                dt=sim["dt_time"],
                snapshot_times=times,
                seed=seed,
                n_workers=config.n_workers,
            )
        else:
            ensemble = simulate_ensemble(
                model_from_config(config.model),
                init,
                n_traj=sim["n_traj"],
                n_steps=sim["n_steps"],
                dt=sim["dt_time"],
                snapshot_times=times,
                seed=seed,
                n_workers=config.n_workers,
            )
        files = ensemble.save(get_stage_dir(out, "simulate"))
        success(f"Wrote {ensemble.n_traj} trajectories x {len(times)} snapshots")

    manifest = get_manifest_path(out, "simulate")
    write_manifest(manifest, "simulate", config.to_dict(), seeds, files, extra)
    success(f"Manifest: {manifest}")
