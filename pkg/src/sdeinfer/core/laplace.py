"""Low-rank Laplace approximation of the posterior at the MAP point.

The dominant generalized eigenpairs of H_data v = lambda C^{-1} v come from a
randomized double-pass eigensolver. With V C^{-1}-orthonormal and
D = diag(lambda / (lambda + 1)), the Laplace covariance is C - V D V^T.
"""

import logging
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.linalg as la

from sdeinfer.core.errors import ConfigurationError, SolverError
from sdeinfer.core.fem import ParameterField
from sdeinfer.core.prior import GaussianMeasure, require_rng

logger = logging.getLogger(__name__)

ORTHONORMALITY_TOL = 1e-8
RANK_THRESHOLD = 0.1


class VarianceEstimate(NamedTuple):
    variance: np.ndarray
    std_error: np.ndarray


def _columns(apply: Callable[[np.ndarray], np.ndarray], X: np.ndarray) -> np.ndarray:
    return np.column_stack([apply(X[:, j]) for j in range(X.shape[1])]) if X.shape[1] else X.copy()


def _b_orthonormalize(Y: np.ndarray, BY: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """Basis of range(Y) with Q^T B Q = I, dropping numerically dependent directions."""
    G = Y.T @ BY
    G = 0.5 * (G + G.T)
    if not np.all(np.isfinite(G)):
        raise SolverError("Non-finite Gram matrix in orthonormalization")
    w, W = la.eigh(G)
    if w[-1] <= 0:
        return Y[:, :0]
    keep = w > rel_tol * w[-1] * Y.shape[1]
    return Y @ (W[:, keep] / np.sqrt(w[keep]))


class GevdBreakdown(Exception):
    pass


def _double_pass(hvp, prior: GaussianMeasure, r: int, oversample: int, power_iters: int, rng) -> tuple:
    n = prior.dim
    k = r + oversample
    omega = rng.standard_normal((n, k))
    Y = _columns(prior.apply_covariance, _columns(hvp, omega))
    for _ in range(power_iters):
        Y = _columns(prior.apply_covariance, _columns(hvp, Y))

    Q = _b_orthonormalize(Y, _columns(prior.apply_precision, Y))
    if Q.shape[1]:
        Q = _b_orthonormalize(Q, _columns(prior.apply_precision, Q))
    if Q.shape[1] < r:
        # H has numerical rank below r: complete the basis with prior-distributed directions
        Z = _columns(prior.fluctuation, rng.standard_normal((n, k)))
        Z -= Q @ (Q.T @ _columns(prior.apply_precision, Z))
        Z = _b_orthonormalize(Z, _columns(prior.apply_precision, Z))
        Q = np.column_stack([Q, Z])
        Q = _b_orthonormalize(Q, _columns(prior.apply_precision, Q))
    if Q.shape[1] < r:
        raise GevdBreakdown(f"Sketch spans only {Q.shape[1]} directions, fewer than rank {r}")

    HQ = _columns(hvp, Q)
    T = Q.T @ HQ
    T = 0.5 * (T + T.T)
    lam, U = la.eigh(T)
    order = np.argsort(lam)[::-1][:r]
    lam, V = lam[order], Q @ U[:, order]

    residual = np.max(np.abs(V.T @ _columns(prior.apply_precision, V) - np.eye(r))) if r else 0.0
    if not np.isfinite(residual) or residual > ORTHONORMALITY_TOL:
        raise GevdBreakdown(f"Orthonormality residual {residual:.3g} exceeds {ORTHONORMALITY_TOL}")
    return lam, V


def randomized_gevd(
    hvp: Callable[[np.ndarray], np.ndarray],
    prior: GaussianMeasure,
    r: int,
    oversample: int = 10,
    power_iters: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Dominant generalized eigenpairs of H_data v = lambda C^{-1} v.

    Args:
        hvp: Data-misfit Hessian action
        prior: Prior supplying C and C^{-1}
        r: Number of eigenpairs
        oversample: Extra sketch columns
        power_iters: Extra applications of C H_data to the sketch
        rng: Random generator for the sketch

    Returns:
        Tuple (eigvals descending, V with V^T C^{-1} V = I)

    Raises:
        SolverError: If orthonormalization breaks down twice
    """
    if r < 0 or oversample < 0 or power_iters < 0:
        raise ConfigurationError("Rank, oversampling and power iterations must be non-negative")
    if r + oversample > prior.dim:
        raise ConfigurationError(f"r + oversample = {r + oversample} exceeds the parameter dimension {prior.dim}")
    rng = require_rng(rng, "The randomized eigensolver")
    for attempt in (1, 2):
        try:
            lam, V = _double_pass(hvp, prior, r, oversample, power_iters, rng)
            break
        except GevdBreakdown as e:
            logger.warning("Randomized eigensolver breakdown (attempt %d): %s", attempt, e)
    else:
        raise SolverError("Randomized generalized eigensolver broke down twice")
    if lam.size:
        logger.info("GEVD: lambda_1 = %.3e, lambda_%d = %.3e", lam[0], lam.size, lam[-1])
    return lam, V


def truncate_rank(eigvals: np.ndarray, cap: Optional[int] = None, threshold: float = RANK_THRESHOLD) -> int:
    """Smallest r whose r-th eigenvalue falls below the threshold, capped."""
    r = int(np.count_nonzero(np.asarray(eigvals) >= threshold)) + 1
    limit = len(eigvals) if cap is None else min(cap, len(eigvals))
    return min(r, limit)


class LowRankPosterior:
    """Gaussian N(m_map, C - V D V^T) with D = diag(lambda / (lambda + 1)).

    Attributes:
        m_map: Stacked MAP point
        eigvals: Generalized eigenvalues, descending
        eigvecs: C^{-1}-orthonormal eigenvectors, shape (2N, r)
        prior: Joint prior
    """

    def __init__(self, m_map: np.ndarray, eigvals: np.ndarray, eigvecs: np.ndarray, prior: GaussianMeasure):
        eigvals = np.asarray(eigvals, dtype=float)
        eigvecs = np.asarray(eigvecs, dtype=float)
        if eigvecs.ndim == 1:
            eigvecs = eigvecs[:, None]
        if eigvecs.shape[0] != prior.dim:
            raise ConfigurationError(f"Eigenvectors have length {eigvecs.shape[0]}, expected {prior.dim}")
        if eigvals.size != eigvecs.shape[1]:
            raise ConfigurationError("Number of eigenvalues and eigenvectors differ")
        if np.any(np.diff(eigvals) > 0):
            raise ConfigurationError("Eigenvalues must be sorted in descending order")
        self.m_map = np.asarray(m_map, dtype=float)
        self.eigvals = eigvals
        self.eigvecs = eigvecs
        self.prior = prior
        self.mesh = prior.mesh
        self.d = eigvals / (eigvals + 1.0)
        self.s = 1.0 - 1.0 / np.sqrt(eigvals + 1.0)
        self._cinv_v = _columns(prior.apply_precision, eigvecs)

    @property
    def rank(self) -> int:
        return int(self.eigvals.size)

    def truncated(self, r: int) -> "LowRankPosterior":
        return LowRankPosterior(self.m_map, self.eigvals[:r], self.eigvecs[:, :r], self.prior)

    def map_field(self) -> ParameterField:
        return ParameterField.from_stacked(self.mesh, self.m_map)

    def apply_covariance(self, v: np.ndarray) -> np.ndarray:
        V = self.eigvecs
        return self.prior.apply_covariance(v) - V @ (self.d * (V.T @ v))

    def apply_precision(self, v: np.ndarray) -> np.ndarray:
        """C^{-1} v + C^{-1} V diag(lambda) V^T C^{-1} v."""
        return self.prior.apply_precision(v) + self._cinv_v @ (self.eigvals * (self._cinv_v.T @ v))

    def fluctuation(self, w: np.ndarray) -> np.ndarray:
        """Map a prior fluctuation w to a Laplace fluctuation (I - V S V^T C^{-1}) w."""
        return w - self.eigvecs @ (self.s * (self._cinv_v.T @ w))

    def sample_fluctuation(self, rng: np.random.Generator, exact: bool = False) -> np.ndarray:
        """Laplace fluctuation; covariance exactly C - V D V^T when exact=True."""
        return self.fluctuation(self.prior.sample_fluctuation(rng, exact=exact))

    def sample(self, rng: np.random.Generator, exact: bool = False) -> ParameterField:
        return ParameterField.from_stacked(self.mesh, self.m_map + self.sample_fluctuation(rng, exact))

    def pointwise_variance(
        self, exact: bool = True, n_samples: int = 1000, rng: Optional[np.random.Generator] = None
    ) -> VarianceEstimate:
        if exact:
            var = self.prior.pointwise_variance(exact=True) - (self.eigvecs**2) @ self.d
            return VarianceEstimate(var, np.zeros_like(var))
        rng = require_rng(rng, "Sampled Laplace variance")
        sq = np.array([self.sample_fluctuation(rng) ** 2 for _ in range(n_samples)])
        return VarianceEstimate(sq.mean(axis=0), sq.std(axis=0, ddof=1) / np.sqrt(n_samples))

    def save(self, path: Path) -> Path:
        np.savez(path, m_map=self.m_map, eigvals=self.eigvals, eigvecs=self.eigvecs)
        return path

    @classmethod
    def load(cls, path: Path, prior: GaussianMeasure) -> "LowRankPosterior":
        with np.load(path) as data:
            return cls(data["m_map"], data["eigvals"], data["eigvecs"], prior)


def laplace_apply_covariance(post: LowRankPosterior, v: np.ndarray) -> np.ndarray:
    return post.apply_covariance(v)


def laplace_apply_precision(post: LowRankPosterior, v: np.ndarray) -> np.ndarray:
    return post.apply_precision(v)


def laplace_sample(post: LowRankPosterior, rng: np.random.Generator) -> ParameterField:
    return post.sample(rng)


def pointwise_variance(
    post: LowRankPosterior, exact: bool = True, n_samples: int = 1000, rng: Optional[np.random.Generator] = None
) -> VarianceEstimate:
    return post.pointwise_variance(exact=exact, n_samples=n_samples, rng=rng)
