"""Laplace-preconditioned Crank-Nicolson Langevin sampler.

Proposals have the form m~ = m - (1 - rho) K G(m) + sqrt(1 - rho^2) xi with
K the Laplace covariance, G the gradient of the posterior negative log
density, rho = (4 - h) / (4 + h) and xi ~ N(0, K). With no likelihood and
K = C every proposal is accepted, which keeps the acceptance rate stable
under mesh refinement.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from sdeinfer.core.errors import ConfigurationError, NumericalDomainError, SolverError
from sdeinfer.core.laplace import LowRankPosterior
from sdeinfer.core.prior import GaussianMeasure

logger = logging.getLogger(__name__)

TARGET_ACCEPTANCE = 0.6
# Step sizes the tuner may reach; rho tends to -1 as h grows
H_BOUNDS = (1e-8, 1e4)


def crank_nicolson_rho(h: float) -> float:
    if not h > 0:
        raise ConfigurationError(f"Step size h must be positive, got {h}")
    return (4.0 - h) / (4.0 + h)


@dataclass(frozen=True)
class ChainState:
    """A chain position with the quantities the proposal and acceptance reuse.

    Attributes:
        m: Stacked parameter
        phi: Data misfit Phi(m), inf when the forward model failed
        grad_phi: Misfit gradient
        u_prec_u: (m - mean)^T C^{-1} (m - mean)
        G: Posterior gradient C^{-1}(m - mean) + grad_phi
        KG: Laplace covariance applied to G
    """

    m: np.ndarray
    phi: float
    grad_phi: np.ndarray
    u_prec_u: float
    G: np.ndarray
    KG: np.ndarray

    @property
    def g_norm_k(self) -> float:
        return float(self.G @ self.KG)

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.phi))


def make_state(m: np.ndarray, misfit, laplace: LowRankPosterior, prior: GaussianMeasure) -> ChainState:
    """Evaluate misfit and gradient at m and precompute the proposal terms."""
    m = np.asarray(m, dtype=float)
    try:
        ev = misfit.evaluate(m)
        phi, grad = float(ev.value), np.asarray(ev.gradient)
    except (NumericalDomainError, SolverError) as e:
        logger.debug("Forward model failed at proposal: %s", e)
        phi, grad = np.inf, np.zeros_like(m)
    if not np.isfinite(phi) or not np.all(np.isfinite(grad)):
        nan = np.full_like(m, np.nan)
        return ChainState(m=m, phi=np.inf, grad_phi=nan, u_prec_u=np.inf, G=nan, KG=nan)
    prec_u = prior.apply_precision(m - prior.mean)
    G = prec_u + grad
    return ChainState(
        m=m,
        phi=phi,
        grad_phi=grad,
        u_prec_u=float((m - prior.mean) @ prec_u),
        G=G,
        KG=laplace.apply_covariance(G),
    )


def mala_propose(
    state: ChainState, laplace: LowRankPosterior, prior: GaussianMeasure, h: float, rng: np.random.Generator
) -> np.ndarray:
    """Draw a candidate m~ = m - (1 - rho) K G(m) + sqrt(1 - rho^2) xi."""
    rho = crank_nicolson_rho(h)
    xi = laplace.sample_fluctuation(rng, exact=True)
    return state.m - (1.0 - rho) * state.KG + np.sqrt(1.0 - rho**2) * xi


def log_acceptance_ratio(current: ChainState, proposed: ChainState, h: float) -> float:
    """Log Metropolis-Hastings ratio of the proposal kernel and the posterior.

    The quadratic K^{-1} terms of the forward and reverse kernel densities
    cancel, so only K-norms of the gradients appear.
    """
    if not proposed.finite:
        return -np.inf
    rho = crank_nicolson_rho(h)
    delta = proposed.m - current.m
    return (
        current.phi
        - proposed.phi
        + 0.5 * (current.u_prec_u - proposed.u_prec_u)
        + float(delta @ (proposed.G + current.G)) / (1.0 + rho)
        - (1.0 - rho) / (2.0 * (1.0 + rho)) * (proposed.g_norm_k - current.g_norm_k)
    )


def mh_accept(
    current: ChainState,
    proposed: ChainState,
    h: float,
    laplace: LowRankPosterior,
    prior: GaussianMeasure,
    rng: np.random.Generator,
) -> tuple[bool, ChainState]:
    """Accept with probability min(1, exp(log ratio)); non-finite proposals are rejected."""
    log_alpha = log_acceptance_ratio(current, proposed, h)
    if np.isnan(log_alpha) or log_alpha == -np.inf:
        return False, current
    if log_alpha >= 0 or np.log(rng.uniform()) < log_alpha:
        return True, proposed
    return False, current


def batch_means_mcse(x: np.ndarray, n_batches: Optional[int] = None) -> np.ndarray:
    """Monte Carlo standard error of column means by non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    n_batches = n_batches or max(2, int(np.sqrt(n)))
    size = n // n_batches
    if size < 1:
        raise ConfigurationError(f"Need at least {n_batches} samples for batch means, got {n}")
    means = x[: size * n_batches].reshape(n_batches, size, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


@dataclass
class ChainResult:
    """Retained samples and diagnostics of one chain.

    Attributes:
        samples: Retained stacked parameters, shape (n_kept, 2N)
        iterations: Chain iteration of every retained sample
        phi_trace: Misfit after every iteration
        acceptance_rate: Accepted proposals over all iterations
        h: Step size
        seed: Seed record of the chain stream
    """

    samples: np.ndarray
    iterations: np.ndarray
    phi_trace: np.ndarray
    acceptance_rate: float
    h: float
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.acceptance_rate <= 1.0:
            raise ConfigurationError(f"Acceptance rate out of range: {self.acceptance_rate}")

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def mcse(self) -> np.ndarray:
        return batch_means_mcse(self.samples)

    def to_csv(self, path: Path, n_nodes: int) -> Path:
        """Rows iteration,phi,b_0..b_{N-1},s_0..s_{N-1}."""
        header = ",".join(["iteration", "phi"] + [f"b_{i}" for i in range(n_nodes)] + [f"s_{i}" for i in range(n_nodes)])
        rows = np.column_stack([self.iterations, self.phi_trace[self.iterations - 1], self.samples])
        fmt = ["%d"] + ["%.17g"] * (rows.shape[1] - 1)
        np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt=fmt)
        return path

    def manifest(self) -> dict:
        return {
            "h": self.h,
            "acceptance_rate": self.acceptance_rate,
            "n_samples": int(self.samples.shape[0]),
            "seed": self.seed,
            **self.extra,
        }


def run_chain(
    m0: np.ndarray,
    n_steps: int,
    burn_in: int,
    thin: int,
    h: float,
    laplace: LowRankPosterior,
    prior: GaussianMeasure,
    misfit,
    rng: np.random.Generator,
    seed: Optional[int] = None,
    callback: Optional[Callable[[int, ChainState, bool], None]] = None,
) -> ChainResult:
    """Metropolis-Hastings loop with the Laplace-preconditioned Langevin proposal.

    Args:
        m0: Starting stacked parameter
        n_steps: Total iterations, greater than burn_in
        burn_in: Iterations discarded before retaining samples
        thin: Keep every thin-th iteration after burn-in
        h: Step size
        laplace: Laplace posterior supplying K
        prior: Prior
        misfit: Object with evaluate(m) -> (value, gradient)
        rng: Chain random stream
        seed: Seed recorded on the result
        callback: Called with (iteration, state, accepted) after every step

    Returns:
        ChainResult
    """
    if n_steps <= burn_in:
        raise ConfigurationError(f"n_steps ({n_steps}) must exceed burn_in ({burn_in})")
    if thin < 1:
        raise ConfigurationError(f"thin must be at least 1, got {thin}")
    state = make_state(m0, misfit, laplace, prior)
    if not state.finite:
        raise NumericalDomainError("Chain start has a non-finite misfit")

    kept, kept_iters = [], []
    phi_trace = np.empty(n_steps)
    n_accepted = 0
    for i in range(1, n_steps + 1):
        candidate = make_state(mala_propose(state, laplace, prior, h, rng), misfit, laplace, prior)
        accepted, state = mh_accept(state, candidate, h, laplace, prior, rng)
        n_accepted += accepted
        phi_trace[i - 1] = state.phi
        if i > burn_in and (i - burn_in - 1) % thin == 0:
            kept.append(state.m.copy())
            kept_iters.append(i)
        if callback is not None:
            callback(i, state, accepted)
    rate = n_accepted / n_steps
    logger.info("Chain finished: %d steps, acceptance %.3f, %d samples kept", n_steps, rate, len(kept))
    return ChainResult(
        samples=np.array(kept),
        iterations=np.array(kept_iters, dtype=np.int64),
        phi_trace=phi_trace,
        acceptance_rate=rate,
        h=h,
        seed=seed,
    )


def tune_step_size(
    m0: np.ndarray,
    h0: float,
    laplace: LowRankPosterior,
    prior: GaussianMeasure,
    misfit,
    rng: np.random.Generator,
    n_tune: int = 200,
    target: float = TARGET_ACCEPTANCE,
) -> float:
    """Dual-averaging adaptation of log h toward a target acceptance probability.

    Returns:
        Averaged step size after n_tune iterations
    """
    gamma, t0, kappa = 0.05, 10.0, 0.75
    mu = np.log(10.0 * h0)
    h_bar_stat, log_h_avg, log_h = 0.0, np.log(h0), np.log(h0)
    state = make_state(m0, misfit, laplace, prior)
    for t in range(1, n_tune + 1):
        h = float(np.exp(log_h))
        candidate = make_state(mala_propose(state, laplace, prior, h, rng), misfit, laplace, prior)
        alpha = float(np.exp(min(0.0, log_acceptance_ratio(state, candidate, h))))
        _, state = mh_accept(state, candidate, h, laplace, prior, rng)
        weight = 1.0 / (t + t0)
        h_bar_stat = (1.0 - weight) * h_bar_stat + weight * (target - alpha)
        log_h = float(np.clip(mu - np.sqrt(t) / gamma * h_bar_stat, *np.log(H_BOUNDS)))
        eta = t**-kappa
        log_h_avg = eta * log_h + (1.0 - eta) * log_h_avg
    h_tuned = float(np.exp(log_h_avg))
    logger.info("Tuned step size h = %.4g (target acceptance %.2f)", h_tuned, target)
    return h_tuned
