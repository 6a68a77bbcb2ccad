"""Solve command: forward PDE solution of the true (or effective) model."""

import click

from sdeinfer.cli.common import pipeline_stage, stage_seeds, success
from sdeinfer.core.fem import interpolate, solve_fokker_planck, solve_mfpt_hierarchy
from sdeinfer.core.pipeline import build_mesh, initial_condition, observation_times, snapshot_times, true_parameter
from sdeinfer.utils.io import write_manifest
from sdeinfer.utils.paths import get_manifest_path, get_stage_dir


@click.command()
@pipeline_stage
@click.option("--moments", "-k", type=click.IntRange(min=1), default=2, show_default=True, help="MFPT moments to solve for")
def solve(config, moments):
    """Solve the MFPT hierarchy or the Fokker-Planck equation for the simulated model."""
    out = config.output_dir
    mesh = build_mesh(config)
    m = true_parameter(config, mesh)
    extra = {"mesh": mesh.to_dict()}

    if config.data_kind == "mfpt":
        solution = solve_mfpt_hierarchy(mesh, m, moments)
        extra["moments"] = moments
    else:
        times = observation_times(config) or snapshot_times(config)
        dt = config.fokker_planck["dt_time"]
        t_end = max(times)
        n_time_steps = int(round(t_end / dt))
        p0 = interpolate(mesh, initial_condition(config).density)
        solution = solve_fokker_planck(mesh, m, p0, t_end, n_time_steps, snapshot_times=times)
        extra["times"] = list(times)
        extra["boundary_peak"] = solution.extra["boundary_peak"]

    path = solution.to_csv(get_stage_dir(out, "solve") / "solution.csv")
    success(f"Wrote {solution.kind} solution on {mesh.n_nodes} nodes")

    manifest = get_manifest_path(out, "solve")
    write_manifest(manifest, "solve", config.to_dict(), stage_seeds(config, "solve"), [path], extra)
    success(f"Manifest: {manifest}")
