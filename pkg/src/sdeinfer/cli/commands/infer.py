"""Infer command: MAP point and low-rank Laplace approximation of the posterior."""

import click
import numpy as np

from sdeinfer.cli.common import pipeline_stage, stage_seeds, success
from sdeinfer.core.bip import Misfit
from sdeinfer.core.data import ObservationSet
from sdeinfer.core.pipeline import build_forward_model, build_laplace, build_mesh, build_prior, solve_map
from sdeinfer.utils.display import display_map_summary, display_spectrum
from sdeinfer.utils.io import write_csv, write_jsonl, write_manifest
from sdeinfer.utils.paths import get_laplace_path, get_manifest_path, get_observations_path, get_stage_dir, require
from sdeinfer.utils.rng import stage_rng

BAND_Z = 1.96


def _band(center: np.ndarray, variance: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    half = BAND_Z * np.sqrt(np.maximum(variance, 0.0))
    return center - half, center + half


@click.command()
@pipeline_stage
def infer(config):
    """Compute the MAP estimate and the Laplace approximation at it."""
    out = config.output_dir
    stage_dir = get_stage_dir(out, "infer")
    obs = ObservationSet.load(require(get_observations_path(out), "prepare"))
    mesh = build_mesh(config)
    prior = build_prior(config, mesh)
    misfit = Misfit(build_forward_model(config, mesh, obs), obs)
    n = mesh.n_nodes

    records = []
    click.echo(f"Newton-CG on {2 * n} unknowns, {obs.size} observations...")
    result = solve_map(config, misfit, prior, callback=records.append)
    display_map_summary(result)
    if not result.converged:
        click.secho(f"⚠ Newton-CG stopped without converging ({result.reason})", fg="yellow", err=True)

    lap = config.laplace
    post, eigvals = build_laplace(config, misfit, prior, result, stage_rng(config.seed, "infer"))
    retained = post.rank
    if eigvals.size and eigvals[-1] >= lap["threshold"]:
        click.secho(
            f"⚠ Smallest computed eigenvalue {eigvals[-1]:.3g} is above {lap['threshold']}; increase laplace.rank",
            fg="yellow",
            err=True,
        )
    display_spectrum(eigvals, retained)

    x = mesh.nodes
    prior_var = prior.pointwise_variance(exact=True)
    post_var = post.pointwise_variance(exact=True).variance
    m_map = result.final.m
    prior_mean = prior.mean
    b_prior_lo, b_prior_hi = _band(prior_mean[:n], prior_var[:n])
    s_prior_lo, s_prior_hi = _band(prior_mean[n:], prior_var[n:])
    b_post_lo, b_post_hi = _band(m_map[:n], post_var[:n])
    s_post_lo, s_post_hi = _band(m_map[n:], post_var[n:])

    files = [
        write_csv(
            stage_dir / "map.csv",
            [
                "x",
                "b_map",
                "s_map",
                "b_prior_mean",
                "s_prior_mean",
                "b_prior_lo",
                "b_prior_hi",
                "s_prior_lo",
                "s_prior_hi",
                "b_post_lo",
                "b_post_hi",
                "s_post_lo",
                "s_post_hi",
            ],
            [
                x,
                m_map[:n],
                m_map[n:],
                prior_mean[:n],
                prior_mean[n:],
                b_prior_lo,
                b_prior_hi,
                s_prior_lo,
                s_prior_hi,
                b_post_lo,
                b_post_hi,
                s_post_lo,
                s_post_hi,
            ],
        ),
        write_csv(
            stage_dir / "spectrum.csv",
            ["index", "eigenvalue", "retained"],
            [np.arange(1, eigvals.size + 1), eigvals, np.arange(eigvals.size) < retained],
            fmt=["%d", "%.17g", "%d"],
        ),
        write_csv(
            stage_dir / "pointwise_variance.csv",
            ["x", "b_prior", "s_prior", "b_post", "s_post"],
            [x, prior_var[:n], prior_var[n:], post_var[:n], post_var[n:]],
        ),
        post.save(get_laplace_path(out)),
        write_jsonl(stage_dir / "map_iterations.jsonl", records),
    ]
    success(f"MAP and Laplace approximation written to {stage_dir}")

    extra = {
        "map": result.summary(),
        "misfit_at_map": result.final.misfit,
        "n_obs": obs.size,
        "rank_computed": int(eigvals.size),
        "rank_retained": retained,
        "mesh": mesh.to_dict(),
    }
    manifest = get_manifest_path(out, "infer")
    write_manifest(manifest, "infer", config.to_dict(), stage_seeds(config, "infer"), files, extra)
    success(f"Manifest: {manifest}")
