"""MAP estimation by inexact Newton-CG with line search.

The Newton system (H_data + C^{-1}) d = -g is solved by conjugate gradients
preconditioned with the prior covariance C. CG stops at an Eisenstat-Walker
forcing tolerance or on negative curvature (Steihaug), and the step is
globalized by Armijo backtracking.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from sdeinfer.core.errors import ConfigurationError, NumericalDomainError, SolverError
from sdeinfer.core.fem import ParameterField
from sdeinfer.core.prior import GaussianMeasure

logger = logging.getLogger(__name__)

TERMINATION_REASONS = {
    "converged": "Norm of the gradient below tolerance",
    "zero-gradient": "Initial gradient is zero",
    "max-iterations": "Maximum number of Newton iterations reached",
    "line-search": "Line search failed to find sufficient descent",
}


class Evaluation(NamedTuple):
    m: np.ndarray
    cost: float
    misfit: float
    reg: float
    gradient: np.ndarray
    cache: object


class MapProblem:
    """Posterior negative log density J(m) = Phi(m) + 1/2 ||m - mean||^2_{C^{-1}}.

    Attributes:
        misfit: Object with evaluate(m) -> MisfitEval-like and hessian_vector(cache, v, gauss_newton)
        prior: Joint prior on [b, s]
        m0: Starting parameter
    """

    def __init__(self, misfit, prior: GaussianMeasure, m0: Optional[ParameterField] = None):
        self.misfit = misfit
        self.prior = prior
        self.m0 = m0 if m0 is not None else prior.mean_field()
        if self.m0.mesh != prior.mesh or getattr(misfit, "mesh", prior.mesh) != prior.mesh:
            raise ConfigurationError("Misfit, prior and initial parameter must share one mesh")

    def evaluate(self, m: np.ndarray) -> Evaluation:
        cache = self.misfit.evaluate(m)
        reg = self.prior.cost(m)
        return Evaluation(
            m=np.asarray(m, dtype=float),
            cost=cache.value + reg,
            misfit=cache.value,
            reg=reg,
            gradient=cache.gradient + self.prior.grad(m),
            cache=cache,
        )

    def hessian_vector(self, ev: Evaluation, v: np.ndarray, gauss_newton: bool = True) -> np.ndarray:
        return self.misfit.hessian_vector(ev.cache, v, gauss_newton=gauss_newton) + self.prior.apply_precision(v)


@dataclass
class MapResult:
    """Outcome of map_estimate.

    Attributes:
        m_map: Final iterate
        converged: Whether the gradient tolerance was met
        reason: Key of TERMINATION_REASONS
        cost_history: J at the initial point and at every accepted iterate
        grad_norm_history: C-norm of the gradient at the same points
        cg_iterations: CG iterations of every Newton step
        newton_iters: Number of accepted Newton steps
        final: Evaluation at m_map
    """

    m_map: ParameterField
    converged: bool
    reason: str
    cost_history: list[float] = field(default_factory=list)
    grad_norm_history: list[float] = field(default_factory=list)
    cg_iterations: list[int] = field(default_factory=list)
    newton_iters: int = 0
    final: Optional[Evaluation] = None

    @property
    def total_cg_iters(self) -> int:
        return int(sum(self.cg_iterations))

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "reason": self.reason,
            "newton_iters": self.newton_iters,
            "total_cg_iters": self.total_cg_iters,
            "final_cost": self.cost_history[-1] if self.cost_history else None,
            "final_grad_norm": self.grad_norm_history[-1] if self.grad_norm_history else None,
        }


def cg_steihaug(
    apply_hessian: Callable[[np.ndarray], np.ndarray],
    g: np.ndarray,
    apply_preconditioner: Callable[[np.ndarray], np.ndarray],
    rel_tol: float,
    max_iter: int,
) -> tuple[np.ndarray, int, str]:
    """Preconditioned CG on H d = -g with a negative-curvature exit.

    Args:
        apply_hessian: v -> H v
        g: Gradient
        apply_preconditioner: r -> P r
        rel_tol: Stop when ||r||_P <= rel_tol * ||g||_P
        max_iter: Iteration cap

    Returns:
        Tuple (d, iterations, reason) with reason in {"tolerance", "negative-curvature", "max-iterations"}
    """
    d = np.zeros_like(g)
    r = -g
    z = apply_preconditioner(r)
    rz = float(r @ z)
    if rz <= 0.0:
        return d, 0, "tolerance"
    tol = rel_tol * np.sqrt(rz)
    p = z.copy()
    for i in range(max_iter):
        Hp = apply_hessian(p)
        pHp = float(p @ Hp)
        if pHp <= 0:
            if i == 0:
                d = z.copy()
            return d, i + 1, "negative-curvature"
        alpha = rz / pHp
        d += alpha * p
        r -= alpha * Hp
        z = apply_preconditioner(r)
        rz_new = float(r @ z)
        if np.sqrt(max(rz_new, 0.0)) <= tol:
            return d, i + 1, "tolerance"
        p = z + (rz_new / rz) * p
        rz = rz_new
    return d, max_iter, "max-iterations"


def map_estimate(
    problem: MapProblem,
    tol_grad_rel: float = 1e-6,
    max_newton: int = 30,
    cg_max: int = 200,
    tol_grad_abs: float = 1e-12,
    cg_coarse_tol: float = 0.5,
    c_armijo: float = 1e-4,
    min_step: float = 1e-10,
    gauss_newton: bool = True,
    preconditioned: bool = True,
    callback: Optional[Callable[[dict], None]] = None,
) -> MapResult:
    """Minimize the posterior negative log density by inexact Newton-CG.

    Args:
        problem: MAP problem
        tol_grad_rel: Converged when ||g|| <= tol_grad_rel * ||g_0|| (prior covariance norm)
        max_newton: Newton iteration cap
        cg_max: CG iteration cap per Newton step
        tol_grad_abs: Absolute gradient tolerance
        cg_coarse_tol: Upper bound of the forcing term
        c_armijo: Sufficient decrease constant
        min_step: Smallest step length tried before the line search fails
        gauss_newton: Use the Gauss-Newton data Hessian
        preconditioned: Precondition CG with the prior covariance
        callback: Receives one JSON-serializable record per Newton iteration

    Returns:
        MapResult; on line-search failure the last accepted iterate with converged=False
    """
    if not 0 < tol_grad_rel < 1:
        raise ConfigurationError(f"tol_grad_rel must lie in (0, 1), got {tol_grad_rel}")
    prior = problem.prior
    mesh = prior.mesh
    precond = prior.apply_covariance if preconditioned else (lambda r: r.copy())

    def c_norm(g: np.ndarray) -> float:
        return float(np.sqrt(max(g @ prior.apply_covariance(g), 0.0)))

    ev = problem.evaluate(problem.m0.stacked())
    g0 = c_norm(ev.gradient)
    result = MapResult(m_map=problem.m0, converged=False, reason="max-iterations")
    result.cost_history.append(ev.cost)
    result.grad_norm_history.append(g0)
    logger.info("Newton-CG start: cost %.6e, |g| %.3e", ev.cost, g0)
    if g0 == 0.0:
        result.converged, result.reason, result.final = True, "zero-gradient", ev
        return result

    gnorm = g0
    for it in range(1, max_newton + 1):
        if gnorm <= max(tol_grad_rel * g0, tol_grad_abs):
            result.converged, result.reason = True, "converged"
            break
        eta = min(cg_coarse_tol, np.sqrt(gnorm / g0))
        current = ev
        d, n_cg, cg_reason = cg_steihaug(
            lambda v, e=current: problem.hessian_vector(e, v, gauss_newton=gauss_newton),
            ev.gradient,
            precond,
            eta,
            cg_max,
        )
        gd = float(ev.gradient @ d)
        if gd >= 0:
            d = -prior.apply_covariance(ev.gradient)
            gd = float(ev.gradient @ d)

        alpha = 1.0
        accepted = None
        while alpha >= min_step:
            try:
                trial = problem.evaluate(ev.m + alpha * d)
            except (NumericalDomainError, SolverError) as e:
                logger.debug("Trial step %.3e rejected: %s", alpha, e)
                trial = None
            if trial is not None and np.isfinite(trial.cost) and trial.cost < ev.cost + c_armijo * alpha * gd:
                accepted = trial
                break
            alpha *= 0.5

        result.cg_iterations.append(n_cg)
        if accepted is None:
            result.reason = "line-search"
            logger.warning("Line search failed at Newton iteration %d", it)
            break
        ev = accepted
        gnorm = c_norm(ev.gradient)
        result.newton_iters = it
        result.cost_history.append(ev.cost)
        result.grad_norm_history.append(gnorm)
        record = {
            "iteration": it,
            "cost": ev.cost,
            "misfit": ev.misfit,
            "reg": ev.reg,
            "grad_norm": gnorm,
            "cg_iters": n_cg,
            "cg_exit": cg_reason,
            "step": alpha,
            "eta": eta,
        }
        logger.info(
            "Newton %3d: cost %.6e misfit %.6e |g| %.3e cg %3d alpha %.2e", it, ev.cost, ev.misfit, gnorm, n_cg, alpha
        )
        if callback is not None:
            callback(record)
    else:
        if gnorm <= max(tol_grad_rel * g0, tol_grad_abs):
            result.converged, result.reason = True, "converged"

    result.m_map = ParameterField.from_stacked(mesh, ev.m)
    result.final = ev
    logger.info("Newton-CG finished: %s", TERMINATION_REASONS[result.reason])
    return result
