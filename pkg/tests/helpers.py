"""Test doubles shared by the optimizer, Laplace and sampler tests."""

from types import SimpleNamespace

import numpy as np

from sdeinfer.core.errors import NumericalDomainError


class LinearMisfit:
    """Phi(m) = 1/2 ||G m - y||^2 / noise_var, with the same interface as core.bip.Misfit."""

    def __init__(self, mesh, G, y, noise_var=1.0):
        self.mesh = mesh
        self.G = G
        self.y = y
        self.noise_var = noise_var
        self.evaluations = 0

    def evaluate(self, m):
        self.evaluations += 1
        m = np.asarray(m, dtype=float)
        r = self.G @ m - self.y
        return SimpleNamespace(
            m=m,
            value=0.5 * float(r @ r) / self.noise_var,
            gradient=self.G.T @ r / self.noise_var,
        )

    def hessian_vector(self, cache, v, gauss_newton=True):
        return self.G.T @ (self.G @ v) / self.noise_var

    def hessian_matrix(self):
        return self.G.T @ self.G / self.noise_var


class FailingMisfit(LinearMisfit):
    """Raises on every point except the one it was built around."""

    def __init__(self, mesh, G, y, m_ok):
        super().__init__(mesh, G, y)
        self.m_ok = np.asarray(m_ok, dtype=float)

    def evaluate(self, m):
        if not np.array_equal(np.asarray(m, dtype=float), self.m_ok):
            raise NumericalDomainError("Forward model failed")
        return super().evaluate(m)


def dense(apply, dim):
    return np.column_stack([apply(e) for e in np.eye(dim)])


def laplace_noise_factor(post, prior, exact=False):
    """Matrix S with S xi the Laplace fluctuation of white noise xi."""
    return dense(post.fluctuation, prior.dim) @ dense(lambda e: prior.fluctuation(e, exact=exact), prior.dim)
