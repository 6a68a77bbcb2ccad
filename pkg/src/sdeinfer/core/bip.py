"""Parameter-to-observable maps, data misfit and its adjoint derivatives.

Both forward models (MFPT hierarchy, Fokker-Planck) expose the same small
set of discrete solves: forward, adjoint, incremental forward and the
coupling term of the incremental adjoint. Gradients and Hessian actions are
built from those pieces once, in the Misfit class, using the discrete
adjoint of the exact linear systems the forward solver uses.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from sdeinfer.core.data import ObservationSet
from sdeinfer.core.errors import ConfigurationError, SolverError
from sdeinfer.core.fem import (
    BACKWARD_TERMS,
    FORWARD_TERMS,
    FeFunction,
    Mesh1d,
    ParameterField,
    PdeSolution,
    assemble_form,
    assemble_mass,
    coefficient_gradient,
    crank_nicolson_matrices,
    dirichlet,
    factorize,
    generator_coefs,
    initial_density,
    mask_rows,
    observation_operator,
)
from sdeinfer.core.sde import snapshot_indices

logger = logging.getLogger(__name__)

__all__ = [
    "FokkerPlanckModel",
    "MfptModel",
    "Misfit",
    "MisfitEval",
    "ParameterField",
    "PtoModel",
    "hessian_vector",
    "misfit",
    "misfit_gradient",
    "pto_apply",
]


@dataclass
class ForwardState:
    """Forward solution of one parameter value plus what the derivatives reuse."""

    m: np.ndarray
    coefs: dict
    states: np.ndarray
    solver: Any
    extra: dict = field(default_factory=dict)


class PtoModel(ABC):
    """Parameter-to-observable map F(m) = B u(m).

    Attributes:
        mesh: Mesh of the parameter and of the state
        locations: Observation points
    """

    kind: str = ""

    def __init__(self, mesh: Mesh1d, locations):
        self.mesh = mesh
        self.locations = np.asarray(locations, dtype=float)
        self.B = observation_operator(mesh, self.locations)
        self.mask = mesh.interior_mask
        self.terms: tuple = ()

    @property
    @abstractmethod
    def n_blocks(self) -> int:
        """Number of stacked observation blocks."""

    @property
    def n_obs(self) -> int:
        return self.n_blocks * self.locations.size

    @abstractmethod
    def solve_forward(self, m: ParameterField) -> ForwardState:
        """Solve the state equations at m."""

    @abstractmethod
    def observe(self, state: ForwardState) -> np.ndarray:
        """Observation vector of a forward state."""

    @abstractmethod
    def solve_adjoint(self, state: ForwardState, w: np.ndarray, extra_rhs: Optional[np.ndarray] = None) -> np.ndarray:
        """Adjoint states for data-space weights w (plus optional coupling terms)."""

    @abstractmethod
    def solve_incremental(self, state: ForwardState, v: np.ndarray) -> np.ndarray:
        """Incremental forward states in parameter direction v."""

    @abstractmethod
    def observe_increment(self, state: ForwardState, inc: np.ndarray) -> np.ndarray:
        """J v from incremental states."""

    @abstractmethod
    def adjoint_coupling(self, state: ForwardState, adj: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Right-hand side terms of the incremental adjoint coming from d(operator)^T[v] adj."""

    @abstractmethod
    def control_gradient(self, state: ForwardState, adj: np.ndarray, inc: Optional[np.ndarray] = None) -> np.ndarray:
        """Sum of adj^T d(operator)/dm applied to the state (or to inc when given)."""

    @abstractmethod
    def second_order_s(self, state: ForwardState, adj: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Term from the second derivative of exp(s) in the control equation."""

    @abstractmethod
    def solution(self, state: ForwardState) -> PdeSolution:
        """Forward state as a PdeSolution."""

    def check_observations(self, obs: ObservationSet) -> None:
        if obs.kind != self.kind:
            raise ConfigurationError(f"Observations of kind '{obs.kind}' do not fit a '{self.kind}' model")
        if obs.size != self.n_obs or not np.allclose(obs.locations, self.locations):
            raise ConfigurationError(
                f"Observation set ({obs.size} values) does not match the model ({self.n_obs} values)"
            )

    def perturbed_operator(self, state: ForwardState, v: np.ndarray, terms=None):
        """Derivative of the generator matrix in direction v = [v_b, v_s]."""
        n = self.mesh.n_nodes
        c = state.coefs["c"]
        return assemble_form(self.mesh, terms or self.terms, {"b": v[:n], "c": c * v[n:]})

    def fingerprint(self) -> dict:
        return {"kind": self.kind, "mesh": self.mesh.to_dict(), "n_obs": self.n_obs}

    def _chain(self, state: ForwardState, W: np.ndarray, U: np.ndarray) -> np.ndarray:
        gb = coefficient_gradient(self.mesh, self.terms, "b", W, U)
        gc = coefficient_gradient(self.mesh, self.terms, "c", W, U)
        return np.concatenate([gb, state.coefs["c"] * gc])


class MfptModel(PtoModel):
    """MFPT moments tau_1..tau_k observed at the sites.

    The constrained system is A tau_n = -n M tau_{n-1} with tau_0 = 1, where
    A is the backward generator with Dirichlet rows and M the row-masked mass.
    """

    kind = "mfpt"

    def __init__(self, mesh: Mesh1d, locations, n_moments: int = 2):
        super().__init__(mesh, locations)
        if n_moments < 1:
            raise ConfigurationError(f"n_moments must be at least 1, got {n_moments}")
        self.n_moments = n_moments
        self.M = mask_rows(mesh, assemble_mass(mesh))
        self.terms = BACKWARD_TERMS

    @property
    def n_blocks(self) -> int:
        return self.n_moments

    def solve_forward(self, m: ParameterField) -> ForwardState:
        coefs = generator_coefs(m)
        lu = factorize(dirichlet(self.mesh, assemble_form(self.mesh, self.terms, coefs)), "MFPT generator")
        taus = np.empty((self.n_moments, self.mesh.n_nodes))
        previous = np.ones(self.mesh.n_nodes)
        for n in range(1, self.n_moments + 1):
            taus[n - 1] = lu.solve(-n * (self.M @ previous))
            previous = taus[n - 1]
        if not np.all(np.isfinite(taus)):
            raise SolverError("Non-finite MFPT solution")
        return ForwardState(m=m.stacked(), coefs=coefs, states=taus, solver=lu)

    def observe(self, state: ForwardState) -> np.ndarray:
        return (self.B @ state.states.T).T.reshape(-1)

    def solve_adjoint(self, state, w, extra_rhs=None):
        k = self.n_moments
        w = np.asarray(w).reshape(k, -1)
        adj = np.zeros((k + 1, self.mesh.n_nodes))
        for n in range(k, 0, -1):
            rhs = -(self.B.T @ w[n - 1]) - (n + 1) * (self.M.T @ adj[n])
            if extra_rhs is not None:
                rhs = rhs + extra_rhs[n - 1]
            adj[n - 1] = state.solver.solve(rhs, trans="T")
        return adj[:k]

    def solve_incremental(self, state, v):
        dA = mask_rows(self.mesh, self.perturbed_operator(state, v))
        inc = np.zeros((self.n_moments, self.mesh.n_nodes))
        previous = np.zeros(self.mesh.n_nodes)
        for n in range(1, self.n_moments + 1):
            inc[n - 1] = state.solver.solve(-(dA @ state.states[n - 1]) - n * (self.M @ previous))
            previous = inc[n - 1]
        return inc

    def observe_increment(self, state, inc):
        return (self.B @ inc.T).T.reshape(-1)

    def adjoint_coupling(self, state, adj, v):
        dA = self.perturbed_operator(state, v)
        return -(dA.T @ (self.mask * adj).T).T

    def control_gradient(self, state, adj, inc=None):
        U = state.states if inc is None else inc
        return self._chain(state, self.mask * adj, U)

    def second_order_s(self, state, adj, v):
        n = self.mesh.n_nodes
        c = state.coefs["c"]
        gc = coefficient_gradient(self.mesh, self.terms, "c", self.mask * adj, state.states)
        return np.concatenate([np.zeros(n), c * v[n:] * gc])

    def solution(self, state):
        return PdeSolution(kind="mfpt", mesh=self.mesh, states=state.states)


class FokkerPlanckModel(PtoModel):
    """Densities p(., t_j) observed at fixed locations and snapshot times.

    Time stepping is Crank-Nicolson, A+ p^{n+1} = A- p^n with A+/- = M -/+ dt/2 F,
    Dirichlet rows on A+ and masked rows on A-.
    """

    kind = "fokker-planck"

    def __init__(
        self,
        mesh: Mesh1d,
        locations,
        p0: FeFunction,
        times,
        dt: float,
    ):
        super().__init__(mesh, locations)
        self.times = np.asarray(times, dtype=float)
        if self.times.size == 0:
            raise ConfigurationError("Fokker-Planck model needs at least one observation time")
        self.dt = dt
        self.n_time_steps = int(round(self.times.max() / dt))
        self.steps = snapshot_indices(self.times, dt, self.n_time_steps)
        self.p0 = initial_density(mesh, p0)
        self.terms = FORWARD_TERMS

    @property
    def n_blocks(self) -> int:
        return int(self.times.size)

    def solve_forward(self, m: ParameterField) -> ForwardState:
        coefs = generator_coefs(m)
        a_plus, a_minus = crank_nicolson_matrices(self.mesh, m, self.dt)
        lu = factorize(a_plus, "Crank-Nicolson")
        p = np.empty((self.n_time_steps + 1, self.mesh.n_nodes))
        p[0] = self.p0
        for step in range(self.n_time_steps):
            p[step + 1] = lu.solve(a_minus @ p[step])
        if not np.all(np.isfinite(p)):
            raise SolverError("Non-finite Fokker-Planck solution")
        return ForwardState(m=m.stacked(), coefs=coefs, states=p, solver=lu, extra={"a_minus": a_minus})

    def observe(self, state):
        return (self.B @ state.states[self.steps].T).T.reshape(-1)

    def _data_load(self, w: np.ndarray) -> np.ndarray:
        load = np.zeros((self.n_time_steps + 1, self.mesh.n_nodes))
        for j, step in enumerate(self.steps):
            load[step] += self.B.T @ w[j]
        return load

    def solve_adjoint(self, state, w, extra_rhs=None):
        w = np.asarray(w).reshape(self.n_blocks, -1)
        load = self._data_load(w)
        a_minus = state.extra["a_minus"]
        # lam[n] pairs with the step producing p^n; lam[N + 1] = 0
        lam = np.zeros((self.n_time_steps + 2, self.mesh.n_nodes))
        for n in range(self.n_time_steps, 0, -1):
            rhs = a_minus.T @ lam[n + 1] - load[n]
            if extra_rhs is not None:
                rhs = rhs + extra_rhs[n]
            lam[n] = state.solver.solve(rhs, trans="T")
        return lam

    def solve_incremental(self, state, v):
        dF = mask_rows(self.mesh, self.perturbed_operator(state, v))
        p = state.states
        a_minus = state.extra["a_minus"]
        inc = np.zeros_like(p)
        half = 0.5 * self.dt
        for step in range(self.n_time_steps):
            rhs = a_minus @ inc[step] + half * (dF @ (p[step + 1] + p[step]))
            inc[step + 1] = state.solver.solve(rhs)
        return inc

    def observe_increment(self, state, inc):
        return (self.B @ inc[self.steps].T).T.reshape(-1)

    def adjoint_coupling(self, state, adj, v):
        dF = self.perturbed_operator(state, v)
        masked = self.mask * adj
        coupling = np.zeros_like(adj)
        coupling[1 : self.n_time_steps + 1] = 0.5 * self.dt * (dF.T @ (masked[1:-1] + masked[2:]).T).T
        return coupling

    def _pairs(self, states: np.ndarray) -> np.ndarray:
        return states[1:] + states[:-1]

    def control_gradient(self, state, adj, inc=None):
        U = self._pairs(state.states if inc is None else inc)
        W = self.mask * adj[1 : self.n_time_steps + 1]
        return -0.5 * self.dt * self._chain(state, W, U)

    def second_order_s(self, state, adj, v):
        n = self.mesh.n_nodes
        c = state.coefs["c"]
        W = self.mask * adj[1 : self.n_time_steps + 1]
        gc = coefficient_gradient(self.mesh, self.terms, "c", W, self._pairs(state.states))
        return np.concatenate([np.zeros(n), -0.5 * self.dt * c * v[n:] * gc])

    def solution(self, state):
        return PdeSolution(
            kind="fokker-planck",
            mesh=self.mesh,
            states=state.states[self.steps],
            times=self.steps * self.dt,
            trajectory=state.states,
            dt=self.dt,
        )


@dataclass(frozen=True)
class MisfitEval:
    """Misfit value and gradient at one parameter, with the states behind them.

    Attributes:
        m: Stacked parameter [b, s]
        value: Phi(m)
        gradient: Coefficient-space gradient of Phi, length 2N
        prediction: F(m)
        state: Forward cache
        adjoint: Adjoint states for the weighted residual
    """

    m: np.ndarray
    value: float
    gradient: np.ndarray
    prediction: np.ndarray
    state: ForwardState
    adjoint: np.ndarray


class Misfit:
    """Phi(m) = 1/2 ||F(m) - y||^2 weighted by the inverse noise variances."""

    def __init__(self, model: PtoModel, obs: ObservationSet):
        model.check_observations(obs)
        self.model = model
        self.obs = obs
        self.mesh = model.mesh

    def field(self, m) -> ParameterField:
        return m if isinstance(m, ParameterField) else ParameterField.from_stacked(self.mesh, m)

    def value(self, m) -> float:
        state = self.model.solve_forward(self.field(m))
        r = self.model.observe(state) - self.obs.y
        return 0.5 * float(np.sum(r**2 / self.obs.gamma_diag))

    def evaluate(self, m) -> MisfitEval:
        """Forward and adjoint solve; returns value, gradient and cache."""
        field_ = self.field(m)
        state = self.model.solve_forward(field_)
        prediction = self.model.observe(state)
        w = (prediction - self.obs.y) / self.obs.gamma_diag
        adj = self.model.solve_adjoint(state, w)
        gradient = self.model.control_gradient(state, adj)
        if not np.all(np.isfinite(gradient)):
            raise SolverError("Non-finite misfit gradient")
        return MisfitEval(
            m=state.m,
            value=0.5 * float(np.sum((prediction - self.obs.y) * w)),
            gradient=gradient,
            prediction=prediction,
            state=state,
            adjoint=adj,
        )

    def apply_jacobian(self, cache: MisfitEval, v: np.ndarray) -> np.ndarray:
        return self.model.observe_increment(cache.state, self.model.solve_incremental(cache.state, v))

    def apply_jacobian_transpose(self, cache: MisfitEval, w: np.ndarray) -> np.ndarray:
        return self.model.control_gradient(cache.state, self.model.solve_adjoint(cache.state, w))

    def hessian_vector(self, cache: Optional[MisfitEval], v: np.ndarray, gauss_newton: bool = True) -> np.ndarray:
        """Data-misfit Hessian action at the cached parameter.

        Args:
            cache: Result of evaluate at the linearization point
            v: Direction, length 2N
            gauss_newton: Drop the terms involving the adjoint of the residual

        Returns:
            H_data v
        """
        if cache is None:
            raise SolverError("Hessian action needs the forward/adjoint cache; call evaluate first")
        v = np.asarray(v, dtype=float)
        model = self.model
        inc = model.solve_incremental(cache.state, v)
        w_dot = model.observe_increment(cache.state, inc) / self.obs.gamma_diag
        if gauss_newton:
            return model.control_gradient(cache.state, model.solve_adjoint(cache.state, w_dot))
        coupling = model.adjoint_coupling(cache.state, cache.adjoint, v)
        adj_dot = model.solve_adjoint(cache.state, w_dot, extra_rhs=coupling)
        return (
            model.control_gradient(cache.state, adj_dot)
            + model.control_gradient(cache.state, cache.adjoint, inc=inc)
            + model.second_order_s(cache.state, cache.adjoint, v)
        )


def pto_apply(m: ParameterField, model: PtoModel) -> np.ndarray:
    """Solve the forward PDE(s) at m and observe."""
    return model.observe(model.solve_forward(m))


def misfit(m: ParameterField, model: PtoModel, obs: ObservationSet) -> float:
    return Misfit(model, obs).value(m)


def misfit_gradient(m: ParameterField, model: PtoModel, obs: ObservationSet) -> MisfitEval:
    """Value, coefficient-space gradient and derivative cache at m."""
    return Misfit(model, obs).evaluate(m)


def hessian_vector(
    m: ParameterField,
    model: PtoModel,
    obs: ObservationSet,
    v: np.ndarray,
    cache: Optional[MisfitEval] = None,
    gauss_newton: bool = True,
) -> np.ndarray:
    """Apply the data-misfit Hessian at m using a cache computed at m.

    Raises:
        SolverError: If the cache is missing or belongs to another parameter
    """
    if cache is None or not np.array_equal(cache.m, m.stacked()):
        raise SolverError("No forward/adjoint cache for this parameter; call misfit_gradient first")
    return Misfit(model, obs).hessian_vector(cache, v, gauss_newton=gauss_newton)
