"""sdeinfer - Bayesian inference of drift and diffusion functions from trajectory ensembles."""

from sdeinfer.__version__ import __version__

__all__ = ["__version__"]
