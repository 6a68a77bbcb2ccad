"""Unit tests for PipelineConfig and the objects built from it."""

from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
import pytest
import yaml

from sdeinfer.core.config import PipelineConfig
from sdeinfer.core.errors import ConfigurationError
from sdeinfer.core.pipeline import build_mesh, build_prior, kde_grid, observation_sites, snapshot_times


def test_defaults_are_valid():
    config = PipelineConfig()

    assert config.data_kind == "mfpt"
    assert config.seed == 12345
    assert config.get("mcmc.h") == 0.1
    assert config.source is None


def test_user_values_override_defaults():
    config = PipelineConfig({"seed": 3, "mcmc": {"h": 1}, "data": {"n_sites": 5}})

    assert config.seed == 3
    # Integers are accepted for float keys and stored as floats
    assert config.mcmc["h"] == 1.0
    assert isinstance(config.mcmc["h"], float)
    assert config.data["n_sites"] == 5
    # Untouched siblings keep their defaults
    assert config.mcmc["burn_in"] == 500
    assert config.data["drop_odd"] is False


def test_unknown_key_rejected():
    with pytest.raises(ConfigurationError, match="Unknown config key: 'solver.tol'"):
        PipelineConfig({"solver": {"tol": 1e-6}})
    with pytest.raises(ConfigurationError, match="Unknown config key: 'plots'"):
        PipelineConfig({"plots": True})


def test_wrong_types_rejected():
    with pytest.raises(ConfigurationError, match="seed"):
        PipelineConfig({"seed": "abc"})
    with pytest.raises(ConfigurationError, match="n_workers"):
        PipelineConfig({"n_workers": True})
    with pytest.raises(ConfigurationError, match="must be a mapping"):
        PipelineConfig({"solver": 3})


def test_prior_mean_accepts_preset_or_number():
    config = PipelineConfig({"prior": {"drift": {"mean": 0.5}, "log_diffusion": {"mean": 0}}})
    assert config.prior["drift"]["mean"] == 0.5

    with pytest.raises(ConfigurationError, match="prior.drift.mean"):
        PipelineConfig({"prior": {"drift": {"mean": "zero"}}})


@pytest.mark.parametrize(
    "data, match",
    [
        ({"model": {"preset": "quartic"}}, "model.preset"),
        ({"data": {"kind": "moments"}}, "data.kind"),
        ({"simulation": {"dt_time": 0.0}}, "simulation.dt_time"),
        ({"mesh": {"n_cells": 0}}, "mesh.n_cells"),
        ({"solver": {"tol_grad_rel": 1.5}}, "tol_grad_rel"),
        ({"data": {"domain_left_state": 2.0}}, "domain_left_state"),
        ({"mcmc": {"n_steps": 100, "burn_in": 100}}, "burn_in"),
        ({"seed": -1}, "seed"),
        ({"model": {"preset": "custom", "drift_poly": []}}, "drift_poly"),
        ({"model": {"preset": "multiscale"}}, "fokker-planck"),
        (
            {"data": {"kind": "fokker-planck"}, "simulation": {"init": {"kind": "point"}}},
            "init.kind",
        ),
        (
            {"data": {"kind": "fokker-planck", "domain_right_state": 5.0}},
            "inside the Fokker-Planck mesh",
        ),
    ],
)
def test_invalid_values_rejected(data, match):
    with pytest.raises(ConfigurationError, match=match):
        PipelineConfig(data)


def test_seed_setter():
    config = PipelineConfig()
    config.seed = 9
    assert config.seed == 9
    with pytest.raises(ConfigurationError):
        config.seed = -2


def test_save_and_load():
    config = PipelineConfig({"seed": 11, "data": {"kind": "fokker-planck"}})
    with TemporaryDirectory() as tmpdir:
        path = config.save(Path(tmpdir) / "nested" / "run.yaml")
        loaded = PipelineConfig.from_file(path)

    assert loaded.to_dict() == config.to_dict()
    assert loaded.source == path


def test_from_file_errors():
    with TemporaryDirectory() as tmpdir:
        broken = Path(tmpdir) / "broken.yaml"
        broken.write_text("seed: [1, 2\n")
        with pytest.raises(ConfigurationError, match="Failed to parse"):
            PipelineConfig.from_file(broken)

        listing = Path(tmpdir) / "list.yaml"
        listing.write_text(yaml.dump([1, 2]))
        with pytest.raises(ConfigurationError, match="mapping"):
            PipelineConfig.from_file(listing)

        empty = Path(tmpdir) / "empty.yaml"
        empty.write_text("")
        assert PipelineConfig.from_file(empty).to_dict() == PipelineConfig().to_dict()


def test_observation_sites_exclude_endpoints():
    sites = observation_sites(PipelineConfig({"data": {"n_sites": 3}}))
    assert np.allclose(sites, [-0.5, 0.0, 0.5])


def test_snapshot_times():
    times = snapshot_times(PipelineConfig())
    assert len(times) == 11
    assert times[0] == 0.0
    assert times[-1] == pytest.approx(0.1)

    with pytest.raises(ConfigurationError, match="multiple"):
        snapshot_times(PipelineConfig({"simulation": {"snapshot_interval_time": 0.0015}}))


def test_mesh_follows_data_kind():
    mfpt = build_mesh(PipelineConfig({"mesh": {"n_cells": 20}}))
    fp = build_mesh(PipelineConfig({"data": {"kind": "fokker-planck"}, "mesh": {"n_cells": 20}}))

    assert (mfpt.a, mfpt.b) == (-1.0, 1.0)
    assert (fp.a, fp.b) == (-4.0, 4.0)
    assert fp.n_nodes == 21
    assert kde_grid(PipelineConfig()).size == 41


def test_prior_mean_presets():
    config = PipelineConfig({"mesh": {"n_cells": 10}, "prior": {"log_diffusion": {"mean": 0.25}}})
    mesh = build_mesh(config)
    prior = build_prior(config, mesh)
    n = mesh.n_nodes

    assert prior.dim == 2 * n
    assert np.allclose(prior.mean[:n], -mesh.nodes)
    assert np.allclose(prior.mean[n:], 0.25)
