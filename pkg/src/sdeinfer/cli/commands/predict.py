"""Predict command: observables at the prior mean, the MAP point and posterior draws."""

import logging

import click
import numpy as np

from sdeinfer.cli.common import pipeline_stage, stage_seeds, success
from sdeinfer.core.bip import pto_apply
from sdeinfer.core.data import ObservationSet
from sdeinfer.core.errors import ConfigurationError, NumericalDomainError, SolverError
from sdeinfer.core.fem import ParameterField
from sdeinfer.core.laplace import LowRankPosterior
from sdeinfer.core.pipeline import build_forward_model, build_mesh, build_prior
from sdeinfer.utils.io import read_csv, write_manifest
from sdeinfer.utils.paths import get_chain_path, get_laplace_path, get_manifest_path, get_observations_path, get_stage_dir, require
from sdeinfer.utils.rng import stage_rng

logger = logging.getLogger(__name__)

LABELS = ("prior-mean", "map", "posterior-q05", "posterior-mean", "posterior-q95")


def _posterior_draws(out, post: LowRankPosterior, n_samples: int, rng) -> tuple[np.ndarray, str]:
    """Chain samples when a chain exists, Laplace draws otherwise."""
    chain_path = get_chain_path(out)
    if chain_path.exists():
        _, rows = read_csv(chain_path)
        samples = rows[:, 2:]
        if samples.shape[0] == 0:
            raise ConfigurationError(f"Chain file {chain_path} holds no samples")
        idx = np.unique(np.linspace(0, samples.shape[0] - 1, min(n_samples, samples.shape[0])).round().astype(int))
        return samples[idx], "chain"
    return np.array([post.m_map + post.sample_fluctuation(rng) for _ in range(n_samples)]), "laplace"


@click.command()
@pipeline_stage
def predict(config):
    """Posterior-predictive observables for plotting against the data."""
    out = config.output_dir
    obs = ObservationSet.load(require(get_observations_path(out), "prepare"))
    mesh = build_mesh(config)
    prior = build_prior(config, mesh)
    post = LowRankPosterior.load(require(get_laplace_path(out), "infer"), prior)
    model = build_forward_model(config, mesh, obs)

    def forward(m: np.ndarray) -> np.ndarray:
        return pto_apply(ParameterField.from_stacked(mesh, m), model)

    draws, source = _posterior_draws(out, post, config.predict["n_samples"], stage_rng(config.seed, "predict"))
    predictions = []
    for m in draws:
        try:
            predictions.append(forward(m))
        except (NumericalDomainError, SolverError) as e:
            logger.debug("Skipping posterior draw: %s", e)
    if not predictions:
        raise SolverError("Forward solve failed for every posterior draw")
    skipped = len(draws) - len(predictions)
    if skipped:
        click.secho(f"⚠ Forward solve failed for {skipped} of {len(draws)} draws", fg="yellow", err=True)
    predictions = np.array(predictions)

    curves = {
        "prior-mean": forward(prior.mean),
        "map": forward(post.m_map),
        "posterior-q05": np.quantile(predictions, 0.05, axis=0),
        "posterior-mean": forward(draws.mean(axis=0)),
        "posterior-q95": np.quantile(predictions, 0.95, axis=0),
    }

    locations = np.tile(obs.locations, obs.n_blocks)
    blocks = obs.block_labels()
    path = get_stage_dir(out, "predict") / "predictive.csv"
    with open(path, "w") as f:
        f.write("label,index,location,time_or_moment,value\n")
        for label in LABELS:
            for i, value in enumerate(curves[label]):
                f.write(f"{label},{i},{locations[i]:.17g},{blocks[i]:.17g},{value:.17g}\n")
    success(f"Wrote predictive curves from {len(predictions)} {source} draws to {path}")

    residual = (curves["map"] - obs.y) / np.sqrt(obs.gamma_diag)
    extra = {
        "draw_source": source,
        "n_draws": len(draws),
        "n_failed": skipped,
        "misfit_at_map": 0.5 * float(residual @ residual),
        "n_obs": obs.size,
    }
    manifest = get_manifest_path(out, "predict")
    write_manifest(manifest, "predict", config.to_dict(), stage_seeds(config, "predict"), [path], extra)
    success(f"Manifest: {manifest}")
