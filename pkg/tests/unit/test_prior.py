"""Unit tests for the bi-Laplacian prior."""

import numpy as np
import pytest

from sdeinfer.core.errors import ConfigurationError
from sdeinfer.core.fem import Mesh1d, assemble_mass, assemble_stiffness
from sdeinfer.core.prior import (
    ROBIN_DENOMINATOR,
    GaussianMeasure,
    MaternPrior,
    apply_covariance,
    apply_precision,
    assemble_sqrt_precision,
    pointwise_stats,
    solve_hyperparams,
)


def test_pointwise_stats_unit_coefficients():
    """Test variance 1/4 and correlation length sqrt(12) for delta = gamma = 1."""
    stats = pointwise_stats(1.0, 1.0)

    assert stats.sigma2 == pytest.approx(0.25)
    assert stats.rho == pytest.approx(np.sqrt(12.0))
    assert stats.nu == 1.5


def test_solve_hyperparams_inverts_stats():
    for sigma2, rho in [(1.0, 1.0), (0.3, 2.5), (4.0, 0.2)]:
        delta, gamma = solve_hyperparams(sigma2, rho)
        stats = pointwise_stats(delta, gamma)
        assert stats.sigma2 == pytest.approx(sigma2)
        assert stats.rho == pytest.approx(rho)


def test_invalid_hyperparameters():
    with pytest.raises(ConfigurationError):
        solve_hyperparams(-1.0, 1.0)
    with pytest.raises(ConfigurationError, match="dimension"):
        pointwise_stats(1.0, 1.0, d=4)
    with pytest.raises(ConfigurationError, match="positive"):
        MaternPrior(Mesh1d(0.0, 1.0, 4), 0.0, 1.0)


def test_robin_coefficient():
    prior = MaternPrior(Mesh1d(0.0, 1.0, 10), 4.0, 0.25)
    assert np.allclose(prior.robin_coeff, 1.0 / ROBIN_DENOMINATOR)
    # delta h / 3 + gamma / h from the forms, plus the Robin term
    assert prior.A[0, 0] == pytest.approx(4.0 * 0.1 / 3 + 0.25 / 0.1 + 1.0 / ROBIN_DENOMINATOR)


def test_interior_variance_matches_target():
    """Test the marginal variance away from the boundary, exactly and by sampling."""
    mesh = Mesh1d(-15.0, 15.0, 300)
    prior = MaternPrior.from_stats(mesh, sigma2=1.0, rho=2.0)
    center = mesh.n_cells // 2

    exact = prior.pointwise_variance(exact=True)
    sampled = prior.pointwise_variance(exact=False, n_samples=10000, rng=np.random.default_rng(5))

    assert exact[center] == pytest.approx(1.0, rel=0.05)
    assert sampled[center] == pytest.approx(exact[center], rel=0.1)


def test_covariance_inverts_precision():
    mesh = Mesh1d(0.0, 2.0, 20)
    prior = MaternPrior.from_stats(mesh, 0.5, 0.7)
    rng = np.random.default_rng(0)
    v = rng.normal(size=mesh.n_nodes)

    assert np.allclose(prior.apply_covariance(prior.apply_precision(v)), v)
    C = prior.covariance_matrix()
    assert np.allclose(C, C.T)
    assert np.all(np.linalg.eigvalsh(C) > 0)


def test_cost_gradient_finite_difference():
    mesh = Mesh1d(0.0, 1.0, 15)
    prior = MaternPrior.from_stats(mesh, 1.0, 0.5, mean=np.linspace(0.0, 1.0, 16))
    rng = np.random.default_rng(1)
    m, direction = rng.normal(size=(2, mesh.n_nodes))
    eps = 1e-6

    fd = (prior.cost(m + eps * direction) - prior.cost(m - eps * direction)) / (2 * eps)
    assert fd == pytest.approx(prior.grad(m) @ direction, rel=1e-6)
    assert prior.cost(prior.mean) == 0.0


def test_joint_measure_is_block_diagonal():
    """Test that the stacked measure applies each component to its own half."""
    mesh = Mesh1d(-1.0, 1.0, 10)
    drift = MaternPrior.from_stats(mesh, 1.0, 0.5, mean=-mesh.nodes)
    log_diffusion = MaternPrior.from_stats(mesh, 0.5, 1.0, mean=np.ones(mesh.n_nodes))
    measure = GaussianMeasure(drift, log_diffusion)
    rng = np.random.default_rng(2)
    v = rng.normal(size=measure.dim)

    assert measure.dim == 22
    assert np.allclose(measure.mean[:11], -mesh.nodes)
    assert np.allclose(apply_precision(measure, v)[:11], drift.apply_precision(v[:11]))
    assert np.allclose(apply_covariance(measure, v)[11:], log_diffusion.apply_covariance(v[11:]))
    assert measure.sample(rng).b.shape == (11,)


def test_joint_measure_needs_one_mesh():
    drift = MaternPrior(Mesh1d(0.0, 1.0, 4), 1.0, 1.0)
    log_diffusion = MaternPrior(Mesh1d(0.0, 1.0, 5), 1.0, 1.0)
    with pytest.raises(ConfigurationError, match="same mesh"):
        GaussianMeasure(drift, log_diffusion)


def test_sampling_is_reproducible():
    prior = MaternPrior(Mesh1d(0.0, 1.0, 8), 1.0, 1.0)
    a = prior.sample(np.random.default_rng(9))
    b = prior.sample(np.random.default_rng(9))
    assert np.array_equal(a.coeffs, b.coeffs)


def test_sqrt_precision_assembly():
    """Test A = delta M + gamma K plus the Robin terms at the two end nodes."""
    mesh = Mesh1d(0.0, 2.0, 6)
    prior = MaternPrior(mesh, 0.5, 2.0)
    A = assemble_sqrt_precision(prior).toarray()

    expected = 0.5 * assemble_mass(mesh).toarray() + 2.0 * assemble_stiffness(mesh).toarray()
    expected[0, 0] += 1.0 / ROBIN_DENOMINATOR
    expected[-1, -1] += 1.0 / ROBIN_DENOMINATOR
    assert np.allclose(A, expected)
    assert np.allclose(A, A.T)


def test_center_variance_is_mesh_independent():
    """Test that doubling the cell count changes the center variance by less than 5%."""
    variances = []
    for n_cells in (100, 200):
        mesh = Mesh1d(-1.0, 1.0, n_cells)
        prior = MaternPrior.from_stats(mesh, sigma2=1.0, rho=0.3)
        variances.append(prior.pointwise_variance(exact=True)[n_cells // 2])

    assert abs(variances[1] - variances[0]) < 0.05 * variances[0]


def test_robin_boundary_variance_close_to_interior():
    """Test that the end-node variance stays within a factor of two of the interior variance."""
    mesh = Mesh1d(-1.0, 1.0, 200)
    prior = MaternPrior.from_stats(mesh, sigma2=1.0, rho=0.3)
    var = prior.pointwise_variance(exact=True)
    interior = var[100]

    for end in (0, -1):
        assert 0.5 * interior < var[end] < 2.0 * interior


def test_exact_fluctuation_has_prior_covariance():
    """Test that the banded mass factor gives draws with covariance exactly C."""
    mesh = Mesh1d(0.0, 1.0, 12)
    prior = MaternPrior.from_stats(mesh, 0.5, 0.4)
    L = prior.mass_factor.toarray()
    F = np.column_stack([prior.fluctuation(e, exact=True) for e in np.eye(mesh.n_nodes)])
    lumped = np.column_stack([prior.fluctuation(e) for e in np.eye(mesh.n_nodes)])
    C = prior.covariance_matrix()

    assert np.allclose(L @ L.T, prior.M.toarray())
    assert np.allclose(F @ F.T, C)
    assert not np.allclose(lumped @ lumped.T, C, rtol=1e-3)


def test_sampled_variance_needs_generator():
    prior = MaternPrior(Mesh1d(0.0, 1.0, 4), 1.0, 1.0)
    with pytest.raises(ConfigurationError, match="seeded"):
        prior.pointwise_variance(exact=False)
