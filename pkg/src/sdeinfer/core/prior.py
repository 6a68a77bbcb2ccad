"""Bi-Laplacian Gaussian priors on P1 fields.

The square-root precision A = delta M + gamma K + Robin boundary mass is
assembled with the same form machinery as the PDE operators; the covariance
is C = A^{-1} M A^{-1} and the precision is A M^{-1} A.
"""

import logging
from typing import NamedTuple, Optional, Union

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.special import gamma as gamma_fn

from sdeinfer.core.errors import ConfigurationError, SolverError
from sdeinfer.core.fem import FeFunction, FormTerm, Mesh1d, ParameterField, assemble_form, factorize, lumped_mass

logger = logging.getLogger(__name__)

ROBIN_DENOMINATOR = 1.42

SQRT_PRECISION_TERMS = (
    FormTerm("delta", "interp", 1.0, "val", "val"),
    FormTerm("gamma", "interp", 1.0, "grad", "grad"),
)


class PointwiseStats(NamedTuple):
    sigma2: float
    rho: float
    nu: float


def _smoothness(d: int) -> float:
    if d not in (1, 2, 3):
        raise ConfigurationError(f"Spatial dimension must be 1, 2 or 3, got {d}")
    return 2.0 - d / 2.0


def pointwise_stats(delta: float, gamma: float, d: int = 1) -> PointwiseStats:
    """Marginal variance and correlation length of the bi-Laplacian prior.

    Args:
        delta: Reaction coefficient
        gamma: Diffusion coefficient
        d: Spatial dimension

    Returns:
        PointwiseStats(sigma2, rho, nu) with nu = 2 - d/2
    """
    nu = _smoothness(d)
    sigma2 = gamma_fn(nu) / ((4 * np.pi) ** (d / 2) * delta**nu * gamma ** (d / 2))
    return PointwiseStats(sigma2=float(sigma2), rho=float(np.sqrt(8 * nu * gamma / delta)), nu=nu)


def solve_hyperparams(sigma2: float, rho: float, d: int = 1) -> tuple[float, float]:
    """Invert pointwise_stats: the (delta, gamma) giving a target variance and correlation length."""
    if not (sigma2 > 0 and rho > 0):
        raise ConfigurationError(f"Prior variance and correlation length must be positive, got {sigma2}, {rho}")
    nu = _smoothness(d)
    ratio = rho**2 / (8 * nu)
    delta = np.sqrt(gamma_fn(nu) / ((4 * np.pi) ** (d / 2) * sigma2 * ratio ** (d / 2)))
    return float(delta), float(ratio * delta)


def _nodal(mesh: Mesh1d, value, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=float), (mesh.n_nodes,)).copy()
    if not np.all(arr > 0):
        raise ConfigurationError(f"Prior hyperparameter {name} must be positive everywhere")
    return arr


class MaternPrior:
    """Gaussian prior N(mean, A^{-1} M A^{-1}) for one scalar field.

    Attributes:
        mesh: Mesh
        delta: Nodal reaction coefficient
        gamma: Nodal diffusion coefficient
        mean: Nodal prior mean
    """

    def __init__(self, mesh: Mesh1d, delta, gamma, mean: Optional[Union[FeFunction, np.ndarray]] = None):
        self.mesh = mesh
        self.delta = _nodal(mesh, delta, "delta")
        self.gamma = _nodal(mesh, gamma, "gamma")
        if mean is None:
            mean = np.zeros(mesh.n_nodes)
        self.mean = np.asarray(mean.coeffs if isinstance(mean, FeFunction) else mean, dtype=float)
        if self.mean.shape != (mesh.n_nodes,):
            raise ConfigurationError("Prior mean does not match the mesh")

        self.M = assemble_form(mesh, (FormTerm(None, "const", 1.0, "val", "val"),))
        self.A = assemble_sqrt_precision(self)
        self._A_lu = factorize(self.A, "prior square-root precision")
        self._M_lu = factorize(self.M, "mass")
        self.sqrt_lumped_mass = np.sqrt(lumped_mass(mesh))
        self.mass_factor = _mass_cholesky(self.M)

    @classmethod
    def from_stats(cls, mesh: Mesh1d, sigma2: float, rho: float, mean=None) -> "MaternPrior":
        delta, gamma = solve_hyperparams(sigma2, rho, d=1)
        return cls(mesh, delta, gamma, mean)

    @property
    def robin_coeff(self) -> np.ndarray:
        """Robin coefficient sqrt(gamma delta) / 1.42 at the two end nodes."""
        end = self.mesh.boundary
        return np.sqrt(self.gamma[end] * self.delta[end]) / ROBIN_DENOMINATOR

    def apply_sqrt_precision(self, v: np.ndarray) -> np.ndarray:
        return self.A @ v

    def solve_sqrt_precision(self, v: np.ndarray) -> np.ndarray:
        return self._A_lu.solve(np.asarray(v, dtype=float))

    def apply_precision(self, v: np.ndarray) -> np.ndarray:
        return self.A @ self._M_lu.solve(self.A @ v)

    def apply_covariance(self, v: np.ndarray) -> np.ndarray:
        return self._A_lu.solve(self.M @ self._A_lu.solve(np.asarray(v, dtype=float)))

    def fluctuation(self, noise: np.ndarray, exact: bool = False) -> np.ndarray:
        """Zero-mean sample for white noise xi.

        The default A^{-1} M_L^{1/2} xi uses the lumped mass; with exact=True the
        draw is A^{-1} L xi with L L^T = M, whose covariance is exactly C.
        """
        noise = np.asarray(noise, dtype=float)
        scaled = self.mass_factor @ noise if exact else self.sqrt_lumped_mass * noise
        return self._A_lu.solve(scaled)

    def sample(self, rng: np.random.Generator, add_mean: bool = True, exact: bool = False) -> FeFunction:
        draw = self.fluctuation(rng.standard_normal(self.mesh.n_nodes), exact=exact)
        return FeFunction(self.mesh, self.mean + draw if add_mean else draw)

    def cost(self, m: np.ndarray) -> float:
        """Prior term 1/2 ||m - mean||^2 in the precision norm."""
        d = m - self.mean
        return 0.5 * float(d @ self.apply_precision(d))

    def grad(self, m: np.ndarray) -> np.ndarray:
        return self.apply_precision(m - self.mean)

    def covariance_matrix(self) -> np.ndarray:
        """Dense C, for small meshes and tests."""
        a_inv = self._A_lu.solve(np.eye(self.mesh.n_nodes))
        return a_inv @ (self.M @ a_inv.T)

    def pointwise_variance(
        self, exact: bool = True, n_samples: int = 1000, rng: Optional[np.random.Generator] = None
    ) -> np.ndarray:
        """Diagonal of C, exactly (dense) or by Monte Carlo with lumped-mass draws."""
        if exact:
            return np.diag(self.covariance_matrix()).copy()
        rng = require_rng(rng, "Sampled prior variance")
        draws = np.array([self.fluctuation(rng.standard_normal(self.mesh.n_nodes)) for _ in range(n_samples)])
        return np.mean(draws**2, axis=0)


def assemble_sqrt_precision(prior: MaternPrior) -> sp.csr_matrix:
    """Assemble A = delta M + gamma K + Robin terms at the end nodes.

    Raises:
        SolverError: If the assembled matrix is not symmetric positive definite
    """
    mesh = prior.mesh
    A = assemble_form(mesh, SQRT_PRECISION_TERMS, {"delta": prior.delta, "gamma": prior.gamma})
    robin = np.zeros(mesh.n_nodes)
    robin[mesh.boundary] = prior.robin_coeff
    A = (A + sp.diags(robin)).tocsr()
    _check_spd(A)
    return A


def _mass_cholesky(M: sp.spmatrix) -> sp.csr_matrix:
    """Lower bidiagonal L with L L^T = M for the tridiagonal P1 mass matrix."""
    bands = np.zeros((2, M.shape[0]))
    bands[0] = M.diagonal()
    bands[1, :-1] = M.diagonal(-1)
    try:
        L = la.cholesky_banded(bands, lower=True)
    except la.LinAlgError as e:
        raise SolverError("Mass matrix is not positive definite") from e
    return sp.diags([L[0], L[1, :-1]], [0, -1], format="csr")


def require_rng(rng: Optional[np.random.Generator], what: str) -> np.random.Generator:
    """Reject a missing generator so that every random draw is seeded."""
    if rng is None:
        raise ConfigurationError(f"{what} needs a seeded numpy Generator")
    return rng


def _check_spd(A: sp.csr_matrix) -> None:
    asym = abs(A - A.T).max()
    scale = abs(A).max()
    if asym > 1e-12 * scale:
        raise SolverError(f"Prior operator is not symmetric (defect {asym:.3g})")
    diag = A.diagonal()
    off = np.asarray(abs(A).sum(axis=1)).ravel() - np.abs(diag)
    if np.all(diag > off):
        return
    try:
        la.cholesky(A.toarray())
    except la.LinAlgError as e:
        raise SolverError("Prior operator is not positive definite") from e


class GaussianMeasure:
    """Independent priors on the drift and on the log squared diffusion.

    Vectors are stacked [b, s] of length 2N; the joint precision is block diagonal.
    """

    def __init__(self, drift: MaternPrior, log_diffusion: MaternPrior):
        if drift.mesh != log_diffusion.mesh:
            raise ConfigurationError("Both prior components must live on the same mesh")
        self.drift = drift
        self.log_diffusion = log_diffusion
        self.mesh = drift.mesh

    @property
    def components(self) -> tuple[MaternPrior, MaternPrior]:
        return self.drift, self.log_diffusion

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate([self.drift.mean, self.log_diffusion.mean])

    @property
    def dim(self) -> int:
        return 2 * self.mesh.n_nodes

    def _split(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.mesh.n_nodes
        return v[:n], v[n:]

    def _blockwise(self, method: str, v: np.ndarray) -> np.ndarray:
        vb, vs = self._split(np.asarray(v, dtype=float))
        return np.concatenate([getattr(self.drift, method)(vb), getattr(self.log_diffusion, method)(vs)])

    def apply_precision(self, v: np.ndarray) -> np.ndarray:
        return self._blockwise("apply_precision", v)

    def apply_covariance(self, v: np.ndarray) -> np.ndarray:
        return self._blockwise("apply_covariance", v)

    def fluctuation(self, noise: np.ndarray, exact: bool = False) -> np.ndarray:
        nb, ns = self._split(np.asarray(noise, dtype=float))
        return np.concatenate([self.drift.fluctuation(nb, exact), self.log_diffusion.fluctuation(ns, exact)])

    def sample_fluctuation(self, rng: np.random.Generator, exact: bool = False) -> np.ndarray:
        return self.fluctuation(rng.standard_normal(self.dim), exact=exact)

    def sample(self, rng: np.random.Generator, exact: bool = False) -> ParameterField:
        return ParameterField.from_stacked(self.mesh, self.mean + self.sample_fluctuation(rng, exact))

    def mean_field(self) -> ParameterField:
        return ParameterField.from_stacked(self.mesh, self.mean)

    def cost(self, m: np.ndarray) -> float:
        d = m - self.mean
        return 0.5 * float(d @ self.apply_precision(d))

    def grad(self, m: np.ndarray) -> np.ndarray:
        return self.apply_precision(m - self.mean)

    def pointwise_variance(
        self, exact: bool = True, n_samples: int = 1000, rng: Optional[np.random.Generator] = None
    ) -> np.ndarray:
        return np.concatenate(
            [c.pointwise_variance(exact=exact, n_samples=n_samples, rng=rng) for c in self.components]
        )


def sample(prior: MaternPrior, rng: np.random.Generator) -> FeFunction:
    return prior.sample(rng)


def apply_precision(prior: Union[MaternPrior, GaussianMeasure], v: np.ndarray) -> np.ndarray:
    return prior.apply_precision(v)


def apply_covariance(prior: Union[MaternPrior, GaussianMeasure], v: np.ndarray) -> np.ndarray:
    return prior.apply_covariance(v)
