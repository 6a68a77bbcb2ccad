"""Piecewise-linear finite elements on a uniform 1D mesh.

Every matrix is assembled from a list of FormTerm entries by one vectorized
routine, which is also differentiated with respect to the nodal coefficient
vectors. The same term lists therefore drive the forward solves and the
adjoint-based derivatives used by the inverse problem.
"""

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from sdeinfer.core.errors import ConfigurationError, LeakageWarning, NumericalDomainError, SolverError
from sdeinfer.core.sde import snapshot_indices

logger = logging.getLogger(__name__)

# Two-point Gauss rule on the reference cell [0, 1]
QUAD_POINTS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
QUAD_WEIGHTS = np.array([0.5, 0.5])
# Basis values PHI[q, a] at the quadrature points and reference derivatives
PHI = np.column_stack([1.0 - QUAD_POINTS, QUAD_POINTS])
DPHI = np.array([-1.0, 1.0])

LEAKAGE_TOL = 1e-6


@dataclass(frozen=True)
class Mesh1d:
    """Uniform mesh of [a, b] with n_cells cells.

    Attributes:
        a: Left endpoint
        b: Right endpoint
        n_cells: Number of cells
    """

    a: float
    b: float
    n_cells: int

    def __post_init__(self):
        if not self.a < self.b:
            raise ConfigurationError(f"Mesh interval must satisfy a < b, got ({self.a}, {self.b})")
        if self.n_cells < 1:
            raise ConfigurationError(f"Mesh needs at least one cell, got {self.n_cells}")

    @property
    def h(self) -> float:
        return (self.b - self.a) / self.n_cells

    @property
    def n_nodes(self) -> int:
        return self.n_cells + 1

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.a, self.b, self.n_nodes)

    @property
    def boundary(self) -> np.ndarray:
        return np.array([0, self.n_cells])

    @property
    def interior_mask(self) -> np.ndarray:
        mask = np.ones(self.n_nodes)
        mask[self.boundary] = 0.0
        return mask

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "n_cells": self.n_cells}


@dataclass(frozen=True)
class FeFunction:
    """Scalar P1 field given by its nodal coefficients."""

    mesh: Mesh1d
    coeffs: np.ndarray

    def __post_init__(self):
        if self.coeffs.shape != (self.mesh.n_nodes,):
            raise ConfigurationError(
                f"Coefficient vector of length {self.coeffs.size} does not match {self.mesh.n_nodes} mesh nodes"
            )

    def __call__(self, x) -> np.ndarray:
        return np.interp(x, self.mesh.nodes, self.coeffs)


@dataclass(frozen=True)
class ParameterField:
    """Inversion unknown: drift b and log squared diffusion s = log sigma^2.

    Attributes:
        b: Nodal drift coefficients
        s: Nodal log squared diffusion coefficients
        mesh: Mesh both components live on
    """

    mesh: Mesh1d
    b: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        n = self.mesh.n_nodes
        if self.b.shape != (n,) or self.s.shape != (n,):
            raise ConfigurationError(f"Parameter components must both have {n} nodal values")

    @property
    def sigma2(self) -> np.ndarray:
        return np.exp(self.s)

    def stacked(self) -> np.ndarray:
        """Joint coefficient vector [b, s] of length 2N."""
        return np.concatenate([self.b, self.s])

    @classmethod
    def from_stacked(cls, mesh: Mesh1d, m: np.ndarray) -> "ParameterField":
        n = mesh.n_nodes
        m = np.asarray(m, dtype=float)
        if m.shape != (2 * n,):
            raise ConfigurationError(f"Stacked parameter must have length {2 * n}, got {m.size}")
        return cls(mesh=mesh, b=m[:n].copy(), s=m[n:].copy())

    @classmethod
    def from_functions(cls, mesh: Mesh1d, drift: Callable, diffusion_sq: Callable) -> "ParameterField":
        x = mesh.nodes
        sigma2 = np.broadcast_to(np.asarray(diffusion_sq(x), dtype=float), x.shape)
        if np.any(sigma2 <= 0):
            raise NumericalDomainError("Squared diffusion must be positive at every mesh node")
        b = np.broadcast_to(np.asarray(drift(x), dtype=float), x.shape)
        return cls(mesh=mesh, b=b.copy(), s=np.log(sigma2))

    def to_dict(self) -> dict:
        return {"b": self.b.tolist(), "s": self.s.tolist()}


class FormTerm(NamedTuple):
    """One integrand scale * kappa * (test factor) * (trial factor).

    coef names the nodal coefficient vector ("b", "c" or None for 1); kind is
    "interp" for its P1 interpolant or "slope" for the cellwise derivative of
    that interpolant; test and trial are "val" or "grad".
    """

    coef: Optional[str]
    kind: str
    scale: float
    test: str
    trial: str


MASS_TERMS = (FormTerm(None, "const", 1.0, "val", "val"),)
STIFFNESS_TERMS = (FormTerm(None, "const", 1.0, "grad", "grad"),)
# a(u, v) = int b u' v - 1/2 int c u' v' - 1/2 int c' u' v, with c = sigma^2
BACKWARD_TERMS = (
    FormTerm("b", "interp", 1.0, "val", "grad"),
    FormTerm("c", "interp", -0.5, "grad", "grad"),
    FormTerm("c", "slope", -0.5, "val", "grad"),
)
# a*(p, v) = int b p v' - 1/2 int c' p v' - 1/2 int c p' v'
FORWARD_TERMS = (
    FormTerm("b", "interp", 1.0, "grad", "val"),
    FormTerm("c", "slope", -0.5, "grad", "val"),
    FormTerm("c", "interp", -0.5, "grad", "grad"),
)


def _basis(mesh: Mesh1d, which: str) -> np.ndarray:
    """Values T[q, a] of the local basis or its derivative at quadrature points."""
    if which == "val":
        return PHI
    if which == "grad":
        return np.broadcast_to(DPHI / mesh.h, PHI.shape)
    raise ValueError(f"Unknown basis factor: {which}")


def _coef_map(mesh: Mesh1d, kind: str) -> np.ndarray:
    """Matrix D[q, a] with kappa(e, q) = sum_a coef[e + a] D[q, a]."""
    if kind == "interp":
        return PHI
    if kind == "slope":
        return np.broadcast_to(DPHI / mesh.h, PHI.shape)
    raise ValueError(f"Unknown coefficient kind: {kind}")


def _cell_values(mesh: Mesh1d, term: FormTerm, coefs: dict) -> np.ndarray:
    if term.coef is None:
        return np.ones((mesh.n_cells, QUAD_POINTS.size))
    c = np.asarray(coefs[term.coef], dtype=float)
    local = np.column_stack([c[:-1], c[1:]])
    return local @ _coef_map(mesh, term.kind).T


def assemble_form(mesh: Mesh1d, terms, coefs: Optional[dict] = None) -> sp.csr_matrix:
    """Assemble the matrix A[i, j] = a(phi_j, phi_i) of a bilinear form.

    Args:
        mesh: Mesh
        terms: Iterable of FormTerm
        coefs: Nodal coefficient vectors by name

    Returns:
        CSR matrix of shape (n_nodes, n_nodes)
    """
    coefs = coefs or {}
    local = np.zeros((mesh.n_cells, 2, 2))
    for term in terms:
        kappa = _cell_values(mesh, term, coefs) * (term.scale * mesh.h * QUAD_WEIGHTS)
        local += np.einsum("eq,qi,qj->eij", kappa, _basis(mesh, term.test), _basis(mesh, term.trial))
    cells = np.arange(mesh.n_cells)
    rows = (cells[:, None, None] + np.arange(2)[None, :, None]).repeat(2, axis=2)
    cols = (cells[:, None, None] + np.arange(2)[None, None, :]).repeat(2, axis=1)
    n = mesh.n_nodes
    return sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()


def coefficient_gradient(mesh: Mesh1d, terms, coef: str, test_vecs: np.ndarray, trial_vecs: np.ndarray) -> np.ndarray:
    """Derivative of sum_k w_k^T A(coefs) u_k with respect to one nodal coefficient vector.

    A depends linearly on each coefficient vector, so the result does not
    depend on the coefficient values themselves.

    Args:
        mesh: Mesh
        terms: FormTerm list defining A
        coef: Name of the coefficient to differentiate against
        test_vecs: Vectors w_k, shape (n_nodes,) or (K, n_nodes)
        trial_vecs: Vectors u_k, same shape as test_vecs

    Returns:
        Gradient of length n_nodes
    """
    w = np.atleast_2d(test_vecs)
    u = np.atleast_2d(trial_vecs)
    local_w = np.stack([w[:, :-1], w[:, 1:]], axis=-1)
    local_u = np.stack([u[:, :-1], u[:, 1:]], axis=-1)
    grad = np.zeros(mesh.n_nodes)
    for term in terms:
        if term.coef != coef:
            continue
        wq = np.einsum("kei,qi->keq", local_w, _basis(mesh, term.test))
        uq = np.einsum("kej,qj->keq", local_u, _basis(mesh, term.trial))
        g = (wq * uq).sum(axis=0) * (term.scale * mesh.h * QUAD_WEIGHTS)
        cell = g @ _coef_map(mesh, term.kind)
        grad[:-1] += cell[:, 0]
        grad[1:] += cell[:, 1]
    return grad


def interpolate(mesh: Mesh1d, f: Callable) -> FeFunction:
    """Nodal interpolant of a vectorized callable."""
    x = mesh.nodes
    return FeFunction(mesh, np.broadcast_to(np.asarray(f(x), dtype=float), x.shape).copy())


def assemble_mass(mesh: Mesh1d) -> sp.csr_matrix:
    return assemble_form(mesh, MASS_TERMS)


def assemble_stiffness(mesh: Mesh1d) -> sp.csr_matrix:
    return assemble_form(mesh, STIFFNESS_TERMS)


def lumped_mass(mesh: Mesh1d) -> np.ndarray:
    """Row sums of the mass matrix."""
    return np.asarray(assemble_mass(mesh).sum(axis=1)).ravel()


def generator_coefs(m: ParameterField) -> dict:
    """Nodal coefficient vectors b and c = exp(s) for the generator forms."""
    c = np.exp(m.s)
    if not (np.all(np.isfinite(c)) and np.all(c > 0)) or not np.all(np.isfinite(m.b)):
        raise NumericalDomainError("Generator coefficients must be finite with sigma^2 = exp(s) > 0 at every node")
    return {"b": m.b, "c": c}


def assemble_generator_backward(mesh: Mesh1d, m: ParameterField) -> sp.csr_matrix:
    """Galerkin matrix of L u = b u' + 1/2 sigma^2 u'' (no boundary conditions)."""
    return assemble_form(mesh, BACKWARD_TERMS, generator_coefs(m))


def assemble_generator_forward(mesh: Mesh1d, m: ParameterField) -> sp.csr_matrix:
    """Galerkin matrix of L* p = -(b p)' + 1/2 (sigma^2 p)'' (no boundary conditions)."""
    return assemble_form(mesh, FORWARD_TERMS, generator_coefs(m))


def mask_rows(mesh: Mesh1d, matrix: sp.spmatrix) -> sp.csr_matrix:
    """Zero the boundary rows of a matrix."""
    return (sp.diags(mesh.interior_mask) @ matrix).tocsr()


def dirichlet(mesh: Mesh1d, matrix: sp.spmatrix) -> sp.csr_matrix:
    """Replace boundary rows by identity rows (homogeneous Dirichlet)."""
    return (mask_rows(mesh, matrix) + sp.diags(1.0 - mesh.interior_mask)).tocsr()


@dataclass(frozen=True)
class AssembledOperators:
    """Mass and generator matrices of one parameter value.

    Attributes:
        mesh: Mesh
        mass: Mass matrix M
        generator: Backward generator L or forward generator L*
        direction: "backward" or "forward"
    """

    mesh: Mesh1d
    mass: sp.csr_matrix
    generator: sp.csr_matrix
    direction: str

    @classmethod
    def assemble(cls, mesh: Mesh1d, m: ParameterField, direction: str = "backward") -> "AssembledOperators":
        if direction == "backward":
            generator = assemble_generator_backward(mesh, m)
        elif direction == "forward":
            generator = assemble_generator_forward(mesh, m)
        else:
            raise ValueError(f"Unknown generator direction: {direction}")
        return cls(mesh=mesh, mass=assemble_mass(mesh), generator=generator, direction=direction)

    @property
    def boundary(self) -> np.ndarray:
        return self.mesh.boundary


def factorize(matrix: sp.spmatrix, what: str = "system"):
    """Sparse LU factorization, raising SolverError on singular matrices."""
    try:
        return splu(sp.csc_matrix(matrix))
    except RuntimeError as e:
        raise SolverError(f"Factorization of the {what} matrix failed: {e}") from e


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise SolverError(f"Non-finite values in the {what}")
    return x


@dataclass(frozen=True)
class PdeSolution:
    """Solution of the MFPT hierarchy or of the Fokker-Planck equation.

    Attributes:
        kind: "mfpt" or "fokker-planck"
        mesh: Mesh
        states: Rows tau_1..tau_k or p at each stored time, shape (n_blocks, n_nodes)
        times: Stored snapshot times (Fokker-Planck only)
        trajectory: Every time level p^0..p^n (Fokker-Planck, when requested)
        dt: Time step (Fokker-Planck only)
    """

    kind: str
    mesh: Mesh1d
    states: np.ndarray
    times: Optional[np.ndarray] = None
    trajectory: Optional[np.ndarray] = None
    dt: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def field(self, i: int) -> FeFunction:
        return FeFunction(self.mesh, self.states[i])

    def to_csv(self, path: Path) -> Path:
        """Write rows node,x,value,moment (MFPT) or node,x,value,time (Fokker-Planck)."""
        n_blocks, n = self.states.shape
        labels = np.arange(1, n_blocks + 1, dtype=float) if self.kind == "mfpt" else self.times
        rows = np.column_stack(
            [
                np.tile(np.arange(n), n_blocks),
                np.tile(self.mesh.nodes, n_blocks),
                self.states.reshape(-1),
                np.repeat(labels, n),
            ]
        )
        last = "moment" if self.kind == "mfpt" else "time"
        np.savetxt(path, rows, delimiter=",", header=f"node,x,value,{last}", comments="", fmt=["%d", "%.17g", "%.17g", "%.17g"])
        return path


def solve_mfpt_hierarchy(mesh: Mesh1d, m: ParameterField, k: int) -> PdeSolution:
    """Solve L tau_1 = -1 and L tau_n = -n tau_{n-1} with tau_n = 0 on the boundary.

    Args:
        mesh: Mesh
        m: Drift and log squared diffusion
        k: Highest moment, at least 1

    Returns:
        PdeSolution with states tau_1..tau_k
    """
    if k < 1:
        raise ConfigurationError(f"Number of MFPT moments must be at least 1, got {k}")
    ops = AssembledOperators.assemble(mesh, m, "backward")
    lu = factorize(dirichlet(mesh, ops.generator), "MFPT generator")
    mass = mask_rows(mesh, ops.mass)
    taus = np.empty((k, mesh.n_nodes))
    previous = np.ones(mesh.n_nodes)
    for n in range(1, k + 1):
        taus[n - 1] = _check_finite(lu.solve(-n * (mass @ previous)), f"MFPT moment {n}")
        previous = taus[n - 1]
    return PdeSolution(kind="mfpt", mesh=mesh, states=taus)


def crank_nicolson_matrices(mesh: Mesh1d, m: ParameterField, dt: float) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Constrained Crank-Nicolson pair (A+, A-) with A+ p^{n+1} = A- p^n."""
    ops = AssembledOperators.assemble(mesh, m, "forward")
    a_plus = dirichlet(mesh, ops.mass - 0.5 * dt * ops.generator)
    a_minus = mask_rows(mesh, ops.mass + 0.5 * dt * ops.generator)
    return a_plus, a_minus


def initial_density(mesh: Mesh1d, p0: FeFunction) -> np.ndarray:
    """Nodal p0 with boundary values set to zero."""
    coeffs = np.asarray(p0.coeffs, dtype=float)
    if np.any(coeffs < 0):
        raise ConfigurationError("Initial density must be non-negative")
    if np.max(np.abs(coeffs[mesh.boundary])) > LEAKAGE_TOL * max(np.max(coeffs), 1e-300):
        warnings.warn("Initial density is not negligible at the domain boundary", LeakageWarning, stacklevel=3)
    return coeffs * mesh.interior_mask


def solve_fokker_planck(
    mesh: Mesh1d,
    m: ParameterField,
    p0: FeFunction,
    t_end: float,
    n_time_steps: int,
    snapshot_times: Optional[list[float]] = None,
    keep_trajectory: bool = False,
) -> PdeSolution:
    """Crank-Nicolson integration of the Fokker-Planck equation.

    Args:
        mesh: Truncated domain with homogeneous Dirichlet boundary
        m: Drift and log squared diffusion
        p0: Initial density
        t_end: Final time
        n_time_steps: Number of steps, dt = t_end / n_time_steps
        snapshot_times: Times to store, multiples of dt (default: [t_end])
        keep_trajectory: Also keep every time level (needed by adjoints)

    Returns:
        PdeSolution with one state per snapshot time
    """
    if n_time_steps < 0 or t_end < 0:
        raise ConfigurationError("Fokker-Planck horizon and step count must be non-negative")
    if n_time_steps == 0:
        dt = 0.0
        steps = np.zeros(0 if snapshot_times == [] else 1, dtype=np.int64)
        if snapshot_times and any(abs(t) > 0 for t in snapshot_times):
            raise ConfigurationError("With zero time steps only the time 0 can be stored")
    else:
        dt = t_end / n_time_steps
        steps = snapshot_indices([t_end] if snapshot_times is None else snapshot_times, dt, n_time_steps)

    p = initial_density(mesh, p0)
    trajectory = np.empty((n_time_steps + 1, mesh.n_nodes)) if keep_trajectory else None
    stored = np.empty((steps.size, mesh.n_nodes))
    column = {int(s): i for i, s in enumerate(steps)}
    if 0 in column:
        stored[column[0]] = p
    if keep_trajectory:
        trajectory[0] = p

    boundary_peak = 0.0
    if n_time_steps:
        a_plus, a_minus = crank_nicolson_matrices(mesh, m, dt)
        lu = factorize(a_plus, "Crank-Nicolson")
        near = [1, mesh.n_cells - 1]
        for step in range(1, n_time_steps + 1):
            p = lu.solve(a_minus @ p)
            boundary_peak = max(boundary_peak, float(np.max(np.abs(p[near]))))
            if step in column:
                stored[column[step]] = p
            if keep_trajectory:
                trajectory[step] = p
        _check_finite(p, "Fokker-Planck solution")
        if boundary_peak > LEAKAGE_TOL:
            warnings.warn(
                f"Density next to the truncated boundary reached {boundary_peak:.3g}; widen the domain",
                LeakageWarning,
                stacklevel=2,
            )
    return PdeSolution(
        kind="fokker-planck",
        mesh=mesh,
        states=stored,
        times=steps * dt,
        trajectory=trajectory,
        dt=dt,
        extra={"boundary_peak": boundary_peak},
    )


def observation_operator(mesh: Mesh1d, locations) -> sp.csr_matrix:
    """Sparse point-evaluation matrix B of shape (len(locations), n_nodes).

    Raises:
        ConfigurationError: If a location lies outside the mesh
    """
    x = np.atleast_1d(np.asarray(locations, dtype=float))
    outside = (x < mesh.a) | (x > mesh.b)
    if np.any(outside):
        raise ConfigurationError(f"Observation locations {x[outside].tolist()} lie outside ({mesh.a}, {mesh.b})")
    t = (x - mesh.a) / mesh.h
    cell = np.minimum(np.floor(t).astype(np.int64), mesh.n_cells - 1)
    frac = t - cell
    rows = np.repeat(np.arange(x.size), 2)
    cols = np.column_stack([cell, cell + 1]).ravel()
    vals = np.column_stack([1.0 - frac, frac]).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(x.size, mesh.n_nodes))


def observe(solution: PdeSolution, locations, times=None) -> np.ndarray:
    """Point observations of a solution, blocks outer and locations inner.

    Args:
        solution: MFPT or Fokker-Planck solution
        locations: Observation points inside the mesh
        times: Fokker-Planck snapshot times to observe (default: all stored)

    Returns:
        Stacked observation vector
    """
    B = observation_operator(solution.mesh, locations)
    states = solution.states
    if solution.kind == "fokker-planck" and times is not None:
        rows = []
        for t in np.atleast_1d(times):
            hit = np.flatnonzero(np.isclose(solution.times, t, rtol=0, atol=1e-9 * max(1.0, abs(t))))
            if hit.size == 0:
                raise ConfigurationError(f"Time {t} is not a stored snapshot time")
            rows.append(hit[0])
        states = states[rows]
    return (B @ states.T).T.reshape(-1)
