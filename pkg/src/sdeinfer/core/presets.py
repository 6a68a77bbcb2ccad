"""Built-in benchmark models and prior mean presets."""

import numpy as np

from sdeinfer.core.errors import ConfigurationError
from sdeinfer.core.sde import MultiscaleParams, SdeModel, effective_model

MODEL_PRESETS = ("single-scale", "multiscale", "ou", "custom")


def single_scale_model() -> SdeModel:
    """Cubic drift b(x) = -2x^3 + 3x with quadratic diffusion sigma2(x) = x^2 + 2."""
    return SdeModel.from_polynomials([0.0, 3.0, 0.0, -2.0], [2.0, 0.0, 1.0], name="single-scale")


def ou_model(theta: float = 1.0, sigma2: float = 1.0) -> SdeModel:
    """Ornstein-Uhlenbeck process dX = -theta X dt + sqrt(sigma2) dW."""
    return SdeModel.from_polynomials([0.0, -theta], [sigma2], name="ou")


def model_from_config(model_cfg: dict) -> SdeModel:
    """Build the simulated model from the `model` config section.

    For the multiscale preset this returns the effective coarse-grain model,
    which is what the forward PDE solves and the inference compare against.
    """
    preset = model_cfg["preset"]
    if preset == "single-scale":
        return single_scale_model()
    if preset == "ou":
        return ou_model()
    if preset == "multiscale":
        return effective_model(multiscale_params(model_cfg))
    if preset == "custom":
        return SdeModel.from_polynomials(model_cfg["drift_poly"], model_cfg["diffusion_sq_poly"], name="custom")
    raise ConfigurationError(f"Invalid model preset: '{preset}'. Must be one of: {', '.join(MODEL_PRESETS)}")


def multiscale_params(model_cfg: dict) -> MultiscaleParams:
    ms = model_cfg["multiscale"]
    return MultiscaleParams(epsilon=ms["epsilon"], q1=ms["q1"], q2=ms["q2"], nu=ms["nu"])


def prior_mean_values(mean, component: str, x: np.ndarray) -> np.ndarray:
    """Nodal prior mean for one parameter component.

    Args:
        mean: "ou" or a constant
        component: "drift" or "log_diffusion"
        x: Mesh nodes

    Returns:
        The OU preset gives b(x) = -x for the drift and s = 1 for the log diffusion
    """
    if isinstance(mean, str):
        if mean != "ou":
            raise ConfigurationError(f"Invalid prior mean: '{mean}'. Must be 'ou' or a number")
        return -np.asarray(x, dtype=float) if component == "drift" else np.ones_like(x, dtype=float)
    return np.full_like(np.asarray(x, dtype=float), float(mean))
