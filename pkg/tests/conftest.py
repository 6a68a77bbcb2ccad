"""Shared fixtures: a small joint prior and a linear-Gaussian problem with a closed-form posterior."""

from types import SimpleNamespace

import numpy as np
import pytest

from sdeinfer.core.fem import Mesh1d
from sdeinfer.core.prior import GaussianMeasure, MaternPrior
from tests.helpers import LinearMisfit, dense


@pytest.fixture
def small_prior():
    mesh = Mesh1d(-1.0, 1.0, 10)
    drift = MaternPrior.from_stats(mesh, sigma2=1.0, rho=1.0, mean=-mesh.nodes)
    log_diffusion = MaternPrior.from_stats(mesh, sigma2=0.5, rho=1.0, mean=np.ones(mesh.n_nodes))
    return GaussianMeasure(drift, log_diffusion)


@pytest.fixture
def linear_problem(small_prior):
    """Prior, linear misfit and the exact posterior mean and covariance."""
    rng = np.random.default_rng(42)
    dim = small_prior.dim
    G = rng.standard_normal((6, dim)) / np.sqrt(dim)
    m_true = small_prior.mean + small_prior.sample_fluctuation(rng)
    noise_var = 0.01
    y = G @ m_true + np.sqrt(noise_var) * rng.standard_normal(6)
    misfit = LinearMisfit(small_prior.mesh, G, y, noise_var)

    prec = dense(small_prior.apply_precision, dim)
    prec = 0.5 * (prec + prec.T)
    post_cov = np.linalg.inv(misfit.hessian_matrix() + prec)
    post_mean = post_cov @ (G.T @ y / noise_var + prec @ small_prior.mean)
    return SimpleNamespace(
        prior=small_prior,
        misfit=misfit,
        prior_precision=prec,
        post_mean=post_mean,
        post_cov=0.5 * (post_cov + post_cov.T),
    )
