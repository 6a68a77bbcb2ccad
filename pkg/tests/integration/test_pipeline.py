"""End-to-end runs of the pipeline stages on small problems."""

import json
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from sdeinfer.cli.main import cli
from sdeinfer.core.bip import Misfit, pto_apply
from sdeinfer.core.config import PipelineConfig
from sdeinfer.core.data import build_observation_set, collect_moments, density_data
from sdeinfer.core.fem import ParameterField
from sdeinfer.core.mcmc import run_chain
from sdeinfer.core.optimize import MapProblem, map_estimate
from sdeinfer.core.pipeline import (
    build_forward_model,
    build_laplace,
    build_mesh,
    build_prior,
    data_domain,
    initial_condition,
    kde_grid,
    observation_sites,
    snapshot_times,
    solve_map,
    true_parameter,
)
from sdeinfer.core.presets import multiscale_params, single_scale_model
from sdeinfer.core.sde import effective_coefficients, simulate_multiscale, simulate_site_grid
from sdeinfer.utils.io import read_csv

FAST_SOLVER = {"max_newton": 5, "cg_max": 20}


def _run(runner: CliRunner, stage: str, config_path: Path):
    result = runner.invoke(cli, [stage, "-c", str(config_path)])
    assert result.exit_code == 0, f"{stage} failed:\n{result.output}"
    return result


def _manifest(out: Path, stage: str) -> dict:
    return json.loads((out / stage / "manifest.json").read_text())


def test_mfpt_pipeline_end_to_end():
    """Test simulate -> prepare -> solve -> infer -> sample -> predict on exit-time data."""
    runner = CliRunner()
    with TemporaryDirectory() as tmpdir:
        out = Path(tmpdir) / "out"
        config_path = Path(tmpdir) / "run.yaml"
        config_path.write_text(
            yaml.dump(
                {
                    "output_dir": str(out),
                    "seed": 21,
                    "model": {"preset": "ou"},
                    "simulation": {"dt_time": 0.001, "n_traj": 40, "max_steps": 20000},
                    "data": {"n_sites": 5, "drop_odd": True},
                    "mesh": {"n_cells": 40},
                    "solver": FAST_SOLVER,
                    "laplace": {"rank": 10, "oversample": 5},
                    "mcmc": {"n_steps": 30, "burn_in": 10, "h": 0.5},
                    "predict": {"n_samples": 5},
                }
            )
        )

        for stage in ("simulate", "prepare", "solve", "infer", "sample", "predict"):
            _run(runner, stage, config_path)
            assert _manifest(out, stage)["stage"] == stage

        header, rows = read_csv(out / "infer" / "map.csv")
        assert header[:3] == ["x", "b_map", "s_map"]
        assert rows.shape == (41, 13)
        # Posterior bands sit inside the prior bands
        b_prior_width = rows[:, 6] - rows[:, 5]
        b_post_width = rows[:, 10] - rows[:, 9]
        assert np.all(b_post_width <= b_prior_width + 1e-12)

        infer = _manifest(out, "infer")
        assert infer["n_obs"] == 10
        assert 0 <= infer["rank_retained"] <= infer["rank_computed"] == 10
        assert infer["seeds"]["master"] == 21

        chain_lines = (out / "sample" / "chain.csv").read_text().splitlines()
        assert len(chain_lines) == 1 + 20

        predict = _manifest(out, "predict")
        assert predict["draw_source"] == "chain"
        lines = (out / "predict" / "predictive.csv").read_text().splitlines()
        assert lines[0] == "label,index,location,time_or_moment,value"
        assert len(lines) == 1 + 5 * 10


def test_fokker_planck_pipeline_end_to_end():
    """Test the density-data path; predict falls back to Laplace draws without a chain."""
    runner = CliRunner()
    with TemporaryDirectory() as tmpdir:
        out = Path(tmpdir) / "out"
        config_path = Path(tmpdir) / "run.yaml"
        config_path.write_text(
            yaml.dump(
                {
                    "output_dir": str(out),
                    "seed": 5,
                    "model": {"preset": "ou"},
                    "simulation": {"dt_time": 0.001, "n_traj": 500, "n_steps": 31, "snapshot_interval_time": 0.01},
                    "data": {"kind": "fokker-planck", "kde_bandwidth_state": 0.05, "kde_grid_points": 11},
                    "mesh": {"n_cells": 40},
                    "solver": FAST_SOLVER,
                    "laplace": {"rank": 10, "oversample": 5},
                    "predict": {"n_samples": 5},
                }
            )
        )

        for stage in ("simulate", "prepare", "infer", "predict"):
            _run(runner, stage, config_path)

        obs = json.loads((out / "prepare" / "observations.json").read_text())
        assert obs["kind"] == "fokker-planck"
        # t = 0 is not observed
        assert np.allclose(obs["times"], [0.01, 0.02, 0.03])

        predict = _manifest(out, "predict")
        assert predict["draw_source"] == "laplace"
        assert predict["n_obs"] == 33


def _single_scale_observations(n_traj: int, dt: float, seed: int, n_sites: int = 15):
    config = PipelineConfig({"data": {"n_sites": n_sites}, "mesh": {"n_cells": 100}})
    samples = simulate_site_grid(
        single_scale_model(), observation_sites(config), data_domain(config), n_traj, dt, 100000, seed
    )
    return config, build_observation_set(collect_moments(samples))


@pytest.mark.slow
def test_single_scale_mfpt_recovery():
    """Test that the MAP point reproduces the true exit-time moments far better than the prior mean."""
    config, obs = _single_scale_observations(n_traj=2000, dt=1e-4, seed=3)
    mesh = build_mesh(config)
    prior = build_prior(config, mesh)
    model = build_forward_model(config, mesh, obs)
    misfit = Misfit(model, obs)

    result = map_estimate(MapProblem(misfit, prior), tol_grad_rel=1e-6, max_newton=50)
    assert result.converged
    # Chi-square consistency within a factor of three
    assert result.final.misfit <= 3 * obs.size / 2

    truth = single_scale_model()
    tau_true = pto_apply(ParameterField.from_functions(mesh, truth.drift, truth.diffusion_sq), model)
    tau_map = pto_apply(result.m_map, model)
    tau_prior = pto_apply(prior.mean_field(), model)
    n = obs.locations.size
    for block in (slice(0, n), slice(n, 2 * n)):
        err_map = np.linalg.norm(tau_map[block] - tau_true[block])
        err_prior = np.linalg.norm(tau_prior[block] - tau_true[block])
        assert err_map < 0.5 * err_prior


@pytest.mark.slow
def test_newton_iterations_do_not_grow_with_mesh():
    """Test that Newton iteration counts stay bounded under mesh refinement."""
    _, obs = _single_scale_observations(n_traj=1000, dt=1e-3, seed=4)

    counts = []
    for n_cells in (25, 50, 100, 200):
        config = PipelineConfig({"data": {"n_sites": 15}, "mesh": {"n_cells": n_cells}})
        mesh = build_mesh(config)
        prior = build_prior(config, mesh)
        misfit = Misfit(build_forward_model(config, mesh, obs), obs)
        result = map_estimate(MapProblem(misfit, prior), tol_grad_rel=1e-6, max_newton=50, gauss_newton=False)

        assert result.converged, n_cells
        counts.append(result.newton_iters)

    assert max(counts) - min(counts) <= 3


def _band_coverage(center, truth, variance, mask) -> float:
    half = 1.96 * np.sqrt(np.maximum(variance, 0.0))
    return float(np.mean(np.abs(center - truth)[mask] <= half[mask]))


@pytest.mark.slow
def test_single_scale_laplace_band_coverage():
    """Test that the Laplace 95% band covers the true drift and log diffusion on most interior nodes."""
    config, obs = _single_scale_observations(n_traj=200, dt=1e-3, seed=11, n_sites=21)
    mesh = build_mesh(config)
    prior = build_prior(config, mesh)
    misfit = Misfit(build_forward_model(config, mesh, obs), obs)

    result = solve_map(config, misfit, prior)
    assert result.converged
    assert result.final.misfit <= 3 * obs.size / 2

    post, _ = build_laplace(config, misfit, prior, result, np.random.default_rng(0))
    variance = post.pointwise_variance(exact=True).variance
    truth = true_parameter(config, mesh).stacked()
    n = mesh.n_nodes
    mask = np.abs(mesh.nodes) <= 0.8
    for block in (slice(0, n), slice(n, 2 * n)):
        assert _band_coverage(post.m_map[block], truth[block], variance[block], mask) >= 0.7


@pytest.mark.slow
def test_sampler_and_cg_are_mesh_independent():
    """Test acceptance rate and per-step CG counts when the mesh goes from 201 to 401 nodes."""
    _, obs = _single_scale_observations(n_traj=200, dt=1e-3, seed=12, n_sites=21)

    acceptance, cg_counts = [], []
    for n_cells in (200, 400):
        config = PipelineConfig({"mesh": {"n_cells": n_cells}})
        mesh = build_mesh(config)
        prior = build_prior(config, mesh)
        misfit = Misfit(build_forward_model(config, mesh, obs), obs)
        result = solve_map(config, misfit, prior)
        assert result.converged, n_cells
        cg_counts.append(result.cg_iterations)

        post, _ = build_laplace(config, misfit, prior, result, np.random.default_rng(1))
        chain = run_chain(post.m_map, 4000, 0, 1, 0.5, post, prior, misfit, np.random.default_rng(2))
        acceptance.append(chain.acceptance_rate)

    assert abs(acceptance[1] - acceptance[0]) < 0.05
    for coarse, fine in zip(*cg_counts):
        assert abs(fine - coarse) <= 5


@pytest.mark.slow
def test_multiscale_effective_drift_recovery():
    """Test that the Fokker-Planck MAP drift at x = 1 lies in the band of the effective A - B."""
    config = PipelineConfig(
        {
            "model": {"preset": "multiscale"},
            "simulation": {"dt_time": 1e-3, "n_traj": 10000, "n_steps": 5001, "snapshot_interval_time": 0.5},
            "data": {"kind": "fokker-planck"},
            "mesh": {"n_cells": 80},
            "fokker_planck": {"dt_time": 0.01},
            "prior": {"log_diffusion": {"mean": -3.0, "sigma2": 4.0, "rho": 1.0}},
        }
    )
    ensemble = simulate_multiscale(
        multiscale_params(config.model),
        initial_condition(config),
        n_traj=config.simulation["n_traj"],
        n_steps=config.simulation["n_steps"],
        dt=config.simulation["dt_time"],
        snapshot_times=snapshot_times(config),
        seed=13,
    )
    obs = build_observation_set(density_data(ensemble, kde_grid(config), config.data["kde_bandwidth_state"]))
    mesh = build_mesh(config)
    prior = build_prior(config, mesh)
    misfit = Misfit(build_forward_model(config, mesh, obs), obs)

    result = solve_map(config, misfit, prior)
    post, _ = build_laplace(config, misfit, prior, result, np.random.default_rng(3))
    variance = post.pointwise_variance(exact=True).variance

    c = effective_coefficients(multiscale_params(config.model))
    node = int(np.argmin(np.abs(mesh.nodes - 1.0)))
    assert mesh.nodes[node] == pytest.approx(1.0)
    assert abs(post.m_map[node] - (c.A - c.B)) <= 1.96 * np.sqrt(variance[node])
