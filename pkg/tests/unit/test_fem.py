"""Unit tests for assembly and the forward PDE solvers."""

from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
import pytest

from sdeinfer.core.errors import ConfigurationError, LeakageWarning, NumericalDomainError
from sdeinfer.core.fem import (
    BACKWARD_TERMS,
    FORWARD_TERMS,
    FeFunction,
    Mesh1d,
    ParameterField,
    assemble_form,
    assemble_generator_backward,
    assemble_generator_forward,
    assemble_mass,
    assemble_stiffness,
    coefficient_gradient,
    dirichlet,
    generator_coefs,
    interpolate,
    lumped_mass,
    observation_operator,
    observe,
    solve_fokker_planck,
    solve_mfpt_hierarchy,
)
from sdeinfer.core.presets import single_scale_model
from sdeinfer.core.sde import InitialCondition


def brownian_field(mesh):
    """b = 0, sigma^2 = 2."""
    return ParameterField.from_functions(mesh, lambda x: 0.0, lambda x: 2.0)


def test_mesh_validation():
    with pytest.raises(ConfigurationError):
        Mesh1d(1.0, -1.0, 10)
    with pytest.raises(ConfigurationError):
        Mesh1d(-1.0, 1.0, 0)


def test_parameter_field_stacking():
    mesh = Mesh1d(-1.0, 1.0, 4)
    m = ParameterField.from_functions(mesh, lambda x: -x, lambda x: 1.0 + x**2)
    again = ParameterField.from_stacked(mesh, m.stacked())

    assert np.array_equal(again.b, m.b)
    assert np.allclose(again.sigma2, 1.0 + mesh.nodes**2)
    with pytest.raises(ConfigurationError, match="length 10"):
        ParameterField.from_stacked(mesh, np.zeros(8))
    with pytest.raises(NumericalDomainError):
        ParameterField.from_functions(mesh, lambda x: x, lambda x: x)


def test_mass_and_stiffness():
    """Test that M integrates constants and K annihilates them."""
    mesh = Mesh1d(-2.0, 3.0, 25)
    M = assemble_mass(mesh)
    K = assemble_stiffness(mesh)
    ones = np.ones(mesh.n_nodes)

    assert M.sum() == pytest.approx(5.0)
    assert lumped_mass(mesh).sum() == pytest.approx(5.0)
    assert np.allclose(K @ ones, 0.0)
    assert abs(M - M.T).max() < 1e-15
    # Integral of x^2 over the domain
    x = mesh.nodes
    assert x @ (M @ x) == pytest.approx((27 + 8) / 3, rel=1e-12)


def test_forward_is_transpose_of_backward():
    mesh = Mesh1d(-1.0, 1.0, 12)
    m = ParameterField.from_functions(mesh, lambda x: 3 * x - 2 * x**3, lambda x: 2 + x**2)
    forward = assemble_generator_forward(mesh, m)
    backward = assemble_generator_backward(mesh, m)

    assert abs(forward - backward.T).max() < 1e-12


def test_generator_coefs_reject_non_finite():
    mesh = Mesh1d(-1.0, 1.0, 3)
    m = ParameterField(mesh=mesh, b=np.zeros(4), s=np.array([0.0, np.inf, 0.0, 0.0]))
    with pytest.raises(NumericalDomainError):
        generator_coefs(m)


def test_coefficient_gradient_matches_unit_coefficients():
    """Test the coefficient derivative against assembly with unit nodal vectors."""
    mesh = Mesh1d(0.0, 1.0, 6)
    rng = np.random.default_rng(2)
    w, u = rng.normal(size=(2, mesh.n_nodes))
    zeros = np.zeros(mesh.n_nodes)
    for name, other in (("b", "c"), ("c", "b")):
        grad = coefficient_gradient(mesh, BACKWARD_TERMS, name, w, u)
        expected = []
        for i in range(mesh.n_nodes):
            unit = np.zeros(mesh.n_nodes)
            unit[i] = 1.0
            A = assemble_form(mesh, BACKWARD_TERMS, {name: unit, other: zeros})
            expected.append(w @ (A @ u))
        assert np.allclose(grad, expected, atol=1e-12)


def test_coefficient_gradient_sums_pairs():
    mesh = Mesh1d(0.0, 1.0, 5)
    rng = np.random.default_rng(3)
    w, u = rng.normal(size=(2, 3, mesh.n_nodes))
    total = coefficient_gradient(mesh, FORWARD_TERMS, "c", w, u)
    parts = sum(coefficient_gradient(mesh, FORWARD_TERMS, "c", w[k], u[k]) for k in range(3))
    assert np.allclose(total, parts)


def test_dirichlet_rows():
    mesh = Mesh1d(0.0, 1.0, 4)
    A = dirichlet(mesh, assemble_stiffness(mesh)).toarray()

    assert A[0].tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]
    assert A[-1].tolist() == [0.0, 0.0, 0.0, 0.0, 1.0]


def test_mfpt_hierarchy_brownian():
    """Test tau_1 = (1 - x^2)/2 and tau_2 = 5/12 - x^2/2 + x^4/12 on (-1, 1)."""
    mesh = Mesh1d(-1.0, 1.0, 200)
    solution = solve_mfpt_hierarchy(mesh, brownian_field(mesh), 2)
    x = mesh.nodes

    assert solution.states.shape == (2, 201)
    assert np.max(np.abs(solution.states[0] - (1 - x**2) / 2)) < 1e-4
    assert np.max(np.abs(solution.states[1] - (5 / 12 - x**2 / 2 + x**4 / 12))) < 1e-4
    assert solution.states[:, [0, -1]].tolist() == [[0.0, 0.0], [0.0, 0.0]]


def test_mfpt_hierarchy_second_order():
    """Test that halving the cell size divides the nodal error by about four."""
    model = single_scale_model()
    reference_mesh = Mesh1d(-1.0, 1.0, 1600)
    reference = solve_mfpt_hierarchy(
        reference_mesh, ParameterField.from_functions(reference_mesh, model.drift, model.diffusion_sq), 1
    ).states[0]

    errors = []
    for n_cells in (100, 200):
        mesh = Mesh1d(-1.0, 1.0, n_cells)
        tau = solve_mfpt_hierarchy(mesh, ParameterField.from_functions(mesh, model.drift, model.diffusion_sq), 1)
        errors.append(np.max(np.abs(tau.states[0] - reference[:: 1600 // n_cells])))

    assert 3.0 < errors[0] / errors[1] < 5.0


def test_mfpt_invalid_moment_count():
    mesh = Mesh1d(-1.0, 1.0, 4)
    with pytest.raises(ConfigurationError):
        solve_mfpt_hierarchy(mesh, brownian_field(mesh), 0)


def test_fokker_planck_relaxes_to_stationary_density():
    """Test OU relaxation to N(0, 1/2) with mass conservation."""
    mesh = Mesh1d(-6.0, 6.0, 400)
    m = ParameterField.from_functions(mesh, lambda x: -x, lambda x: 1.0)
    p0 = interpolate(mesh, InitialCondition("normal", 0.5, 0.3).density)
    solution = solve_fokker_planck(mesh, m, p0, t_end=10.0, n_time_steps=500, snapshot_times=[5.0, 10.0])
    x = mesh.nodes
    stationary = np.exp(-(x**2)) / np.sqrt(np.pi)
    p = solution.states[-1]

    assert solution.times.tolist() == pytest.approx([5.0, 10.0])
    assert np.sqrt((p - stationary) @ (assemble_mass(mesh) @ (p - stationary))) < 1e-3
    assert lumped_mass(mesh) @ p == pytest.approx(1.0, abs=1e-4)


def test_fokker_planck_keeps_trajectory():
    mesh = Mesh1d(-4.0, 4.0, 40)
    m = ParameterField.from_functions(mesh, lambda x: -x, lambda x: 1.0)
    p0 = interpolate(mesh, InitialCondition("normal", 0.0, 0.5).density)
    solution = solve_fokker_planck(mesh, m, p0, 0.1, 10, keep_trajectory=True)

    assert solution.trajectory.shape == (11, 41)
    assert np.allclose(solution.states[0], solution.trajectory[-1])
    assert solution.dt == pytest.approx(0.01)


def test_fokker_planck_off_grid_time():
    mesh = Mesh1d(-4.0, 4.0, 40)
    m = ParameterField.from_functions(mesh, lambda x: -x, lambda x: 1.0)
    p0 = interpolate(mesh, InitialCondition("normal", 0.0, 0.5).density)
    with pytest.raises(ConfigurationError, match="time grid"):
        solve_fokker_planck(mesh, m, p0, 0.1, 10, snapshot_times=[0.015])


def test_fokker_planck_leakage_warning():
    """Test that density reaching a truncated boundary is reported."""
    mesh = Mesh1d(-1.0, 1.0, 20)
    m = ParameterField.from_functions(mesh, lambda x: -x, lambda x: 1.0)
    p0 = interpolate(mesh, InitialCondition("normal", 0.0, 0.5).density)
    with pytest.warns(LeakageWarning):
        solve_fokker_planck(mesh, m, p0, 0.1, 10)


def test_observation_operator():
    """Test that point evaluation reproduces linear functions exactly."""
    mesh = Mesh1d(-1.0, 1.0, 8)
    locations = np.array([-1.0, -0.3, 0.0, 0.77, 1.0])
    B = observation_operator(mesh, locations)

    assert B.shape == (5, 9)
    assert np.allclose(B.sum(axis=1), 1.0)
    assert np.allclose(B @ (2 * mesh.nodes + 1), 2 * locations + 1)
    with pytest.raises(ConfigurationError, match="outside"):
        observation_operator(mesh, [1.5])


def test_observe_selects_times():
    mesh = Mesh1d(-4.0, 4.0, 40)
    m = ParameterField.from_functions(mesh, lambda x: -x, lambda x: 1.0)
    p0 = interpolate(mesh, InitialCondition("normal", 0.0, 0.5).density)
    solution = solve_fokker_planck(mesh, m, p0, 0.2, 20, snapshot_times=[0.1, 0.2])
    locations = [-1.0, 0.0, 1.0]

    both = observe(solution, locations)
    last = observe(solution, locations, times=[0.2])
    assert both.shape == (6,)
    assert np.allclose(last, both[3:])
    with pytest.raises(ConfigurationError):
        observe(solution, locations, times=[0.15])


def test_solution_csv():
    mesh = Mesh1d(-1.0, 1.0, 4)
    solution = solve_mfpt_hierarchy(mesh, brownian_field(mesh), 2)
    with TemporaryDirectory() as tmpdir:
        path = solution.to_csv(Path(tmpdir) / "solution.csv")
        lines = path.read_text().splitlines()

    assert lines[0] == "node,x,value,moment"
    assert len(lines) == 1 + 2 * 5


def test_fe_function_evaluation():
    mesh = Mesh1d(0.0, 1.0, 2)
    f = FeFunction(mesh, np.array([0.0, 1.0, 0.0]))
    assert f(0.25) == pytest.approx(0.5)
    with pytest.raises(ConfigurationError):
        FeFunction(mesh, np.zeros(2))
