"""Sample command: Laplace-preconditioned MCMC from the MAP point."""

import click
import numpy as np

from sdeinfer.cli.common import pipeline_stage, stage_seeds, success
from sdeinfer.core.bip import Misfit
from sdeinfer.core.data import ObservationSet
from sdeinfer.core.laplace import LowRankPosterior
from sdeinfer.core.mcmc import run_chain, tune_step_size
from sdeinfer.core.pipeline import build_forward_model, build_mesh, build_prior
from sdeinfer.utils.display import display_chain_summary
from sdeinfer.utils.io import write_manifest
from sdeinfer.utils.paths import get_chain_path, get_laplace_path, get_manifest_path, get_observations_path, require
from sdeinfer.utils.rng import stage_rng


@click.command()
@pipeline_stage
def sample(config):
    """Run the preconditioned Crank-Nicolson Langevin chain."""
    out = config.output_dir
    obs = ObservationSet.load(require(get_observations_path(out), "prepare"))
    mesh = build_mesh(config)
    prior = build_prior(config, mesh)
    post = LowRankPosterior.load(require(get_laplace_path(out), "infer"), prior)
    misfit = Misfit(build_forward_model(config, mesh, obs), obs)
    mc = config.mcmc
    seeds = stage_seeds(config, "sample")
    rng = stage_rng(config.seed, "sample")

    h = mc["h"]
    if mc["tune"]:
        h = tune_step_size(post.m_map, h, post, prior, misfit, rng, n_tune=mc["n_tune"])
        click.echo(f"Tuned step size h = {h:.4g}")

    click.echo(f"Sampling {mc['n_steps']} steps (burn-in {mc['burn_in']}, thin {mc['thin']})...")
    chain = run_chain(
        post.m_map,
        n_steps=mc["n_steps"],
        burn_in=mc["burn_in"],
        thin=mc["thin"],
        h=h,
        laplace=post,
        prior=prior,
        misfit=misfit,
        rng=rng,
        seed=seeds["sample"],
    )
    display_chain_summary(chain, mesh.n_nodes)
    path = chain.to_csv(get_chain_path(out), mesh.n_nodes)
    success(f"Wrote {chain.samples.shape[0]} samples to {path}")

    extra = {"chain": chain.manifest(), "h_tuned": mc["tune"]}
    if chain.samples.shape[0] >= 4:
        extra["max_mcse"] = float(np.max(chain.mcse()))
    manifest = get_manifest_path(out, "sample")
    write_manifest(manifest, "sample", config.to_dict(), seeds, [path], extra)
    success(f"Manifest: {manifest}")
