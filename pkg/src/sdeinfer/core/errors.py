"""Exception and warning types raised by sdeinfer.

The CLI maps these onto exit codes, so library code raises the most specific
class that applies rather than a bare ValueError.
"""


class SdeInferError(Exception):
    """Base class for all sdeinfer errors."""


class ConfigurationError(SdeInferError, ValueError):
    """Invalid user input: config keys, grids, sites, sample sizes."""


class NumericalDomainError(SdeInferError, ValueError):
    """A state or coefficient left the domain where the model is defined."""


class SolverError(SdeInferError, RuntimeError):
    """A linear solve, eigensolve or derivative evaluation failed."""


class MissingArtifactError(SdeInferError, FileNotFoundError):
    """An upstream pipeline artifact is missing."""


class CensoringWarning(UserWarning):
    """Some trajectories never left the domain within the simulation horizon."""


class BandwidthWarning(UserWarning):
    """The KDE bandwidth is too large for the bias to be negligible."""


class TimeStepWarning(UserWarning):
    """The time step is coarse relative to the fastest time scale."""


class LeakageWarning(UserWarning):
    """Probability density reaches the truncated domain boundary."""
