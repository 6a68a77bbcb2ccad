"""Turn raw simulation output into observations with a Gaussian noise model.

Exit-time samples become first and second MFPT moment estimates with
standard errors from disjoint sub-ensembles; snapshot ensembles become
Gaussian-kernel density estimates with their pointwise KDE variance.
"""

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np

from sdeinfer.core.errors import BandwidthWarning, ConfigurationError
from sdeinfer.core.sde import ExitTimeSample, TrajectoryEnsemble

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-8
KERNEL_SQ_INTEGRAL = 1.0 / (2.0 * np.sqrt(np.pi))
BANDWIDTH_RATIO_MAX = 0.1
KDE_CHUNK = 4096


class MomentEstimate(NamedTuple):
    tau1: float
    tau2: float
    se1: float
    se2: float
    n1: int
    n2: int


@dataclass(frozen=True)
class MomentData:
    """Per-site MFPT moment estimates.

    Attributes:
        sites: Initial sites x_i
        tau1_hat: First moment estimates (time)
        tau2_hat: Second moment estimates (time^2)
        se1: Standard errors of tau1_hat
        se2: Standard errors of tau2_hat
        n1: Sub-ensemble sizes used for tau1_hat
        n2: Sub-ensemble sizes used for tau2_hat
        censored: Censored trajectory count per site
    """

    sites: np.ndarray
    tau1_hat: np.ndarray
    tau2_hat: np.ndarray
    se1: np.ndarray
    se2: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    censored: np.ndarray

    def __post_init__(self):
        if np.any(self.tau1_hat <= 0):
            raise ConfigurationError("First moment estimates must be positive")
        if np.any(self.se1 < 0) or np.any(self.se2 < 0):
            raise ConfigurationError("Standard errors must be non-negative")


@dataclass(frozen=True)
class DensityData:
    """Kernel density estimates on a grid at several snapshot times.

    Attributes:
        grid: Observation locations
        times: Snapshot times
        p_hat: Estimates, shape (n_times, n_grid)
        var_hat: Pointwise KDE variances, same shape
        bandwidth: Kernel bandwidth h
        n_samples: Ensemble size N
    """

    grid: np.ndarray
    times: np.ndarray
    p_hat: np.ndarray
    var_hat: np.ndarray
    bandwidth: float
    n_samples: int

    def __post_init__(self):
        if np.any(self.p_hat < 0) or np.any(self.var_hat < 0):
            raise ConfigurationError("Density estimates and variances must be non-negative")


@dataclass(frozen=True)
class ObservationSet:
    """Stacked data vector with diagonal noise covariance.

    For MFPT data the blocks are moments 1..k (outer) over sites (inner); for
    Fokker-Planck data the blocks are snapshot times (outer) over locations.

    Attributes:
        kind: "mfpt" or "fokker-planck"
        y: Data vector of length n_blocks * len(locations)
        locations: Observation locations shared by every block
        gamma_diag: Diagonal of the noise covariance, strictly positive
        times: Snapshot times (Fokker-Planck only)
        n_moments: Number of moments k (MFPT only)
        metadata: Free-form provenance
    """

    kind: str
    y: np.ndarray
    locations: np.ndarray
    gamma_diag: np.ndarray
    times: Optional[np.ndarray] = None
    n_moments: Optional[int] = None
    metadata: dict = field(default_factory=dict)

    VALID_KINDS = ("mfpt", "fokker-planck")

    def __post_init__(self):
        if self.kind not in self.VALID_KINDS:
            raise ConfigurationError(
                f"Invalid observation kind: '{self.kind}'. Must be one of: {', '.join(self.VALID_KINDS)}"
            )
        if self.kind == "mfpt" and not self.n_moments:
            raise ConfigurationError("MFPT observations need n_moments")
        if self.kind == "fokker-planck" and self.times is None:
            raise ConfigurationError("Fokker-Planck observations need snapshot times")
        expected = self.n_blocks * self.locations.size
        if self.y.size != expected or self.gamma_diag.size != expected:
            raise ConfigurationError(
                f"Observation vector length {self.y.size} (noise {self.gamma_diag.size}) "
                f"does not match {self.n_blocks} blocks x {self.locations.size} locations"
            )
        if not np.all(self.gamma_diag > 0):
            raise ConfigurationError("Noise variances must be strictly positive")

    @property
    def n_blocks(self) -> int:
        return int(self.n_moments) if self.kind == "mfpt" else int(self.times.size)

    @property
    def size(self) -> int:
        return int(self.y.size)

    def block_labels(self) -> np.ndarray:
        """Moment index (1-based) or snapshot time of every entry of y."""
        labels = np.arange(1, self.n_blocks + 1, dtype=float) if self.kind == "mfpt" else self.times
        return np.repeat(labels, self.locations.size)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "y": self.y.tolist(),
            "locations": self.locations.tolist(),
            "gamma_diag": self.gamma_diag.tolist(),
            "times": None if self.times is None else self.times.tolist(),
            "n_moments": self.n_moments,
            "metadata": self.metadata,
        }

    @staticmethod
    def from_dict(data: dict) -> "ObservationSet":
        times = data.get("times")
        return ObservationSet(
            kind=data["kind"],
            y=np.asarray(data["y"], dtype=float),
            locations=np.asarray(data["locations"], dtype=float),
            gamma_diag=np.asarray(data["gamma_diag"], dtype=float),
            times=None if times is None else np.asarray(times, dtype=float),
            n_moments=data.get("n_moments"),
            metadata=data.get("metadata", {}),
        )

    def save(self, path: Path) -> Path:
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @staticmethod
    def load(path: Path) -> "ObservationSet":
        return ObservationSet.from_dict(json.loads(path.read_text()))

    def to_rows(self) -> np.ndarray:
        """Rows (location, time_or_moment, value, std) in stacking order."""
        locations = np.tile(self.locations, self.n_blocks)
        return np.column_stack([locations, self.block_labels(), self.y, np.sqrt(self.gamma_diag)])


def mfpt_moments(sample: ExitTimeSample, drop_odd: bool = False) -> MomentEstimate:
    """Estimate the first two MFPT moments from disjoint halves of a sample.

    The first half of the uncensored exits (in trajectory order) estimates
    tau1, the second half estimates tau2. Standard errors are S / sqrt(N_alpha)
    with S the unbiased sample standard deviation of tau^alpha.

    Args:
        sample: Exit times at one site
        drop_odd: Drop the last exit instead of failing on an odd count

    Returns:
        MomentEstimate for the site

    Raises:
        ConfigurationError: If every trajectory was censored, fewer than four
            exits are available, or the count is odd and drop_odd is False
    """
    times = np.asarray(sample.times, dtype=float)
    if times.size == 0:
        raise ConfigurationError(f"All {sample.censored_count} trajectories from site {sample.site:g} were censored")
    if times.size % 2:
        if not drop_odd:
            raise ConfigurationError(
                f"Exit-time sample at site {sample.site:g} has an odd size {times.size}; "
                "use an even trajectory count or drop_odd"
            )
        warnings.warn(f"Dropping the last exit time at site {sample.site:g} to even the split", UserWarning, stacklevel=2)
        times = times[:-1]
    if times.size < 4:
        raise ConfigurationError(f"Need at least 4 exit times per site, got {times.size} at site {sample.site:g}")

    half = times.size // 2
    first, second = times[:half], times[half:] ** 2
    return MomentEstimate(
        tau1=float(first.mean()),
        tau2=float(second.mean()),
        se1=float(first.std(ddof=1) / np.sqrt(half)),
        se2=float(second.std(ddof=1) / np.sqrt(second.size)),
        n1=half,
        n2=int(second.size),
    )


def collect_moments(samples: list[ExitTimeSample], drop_odd: bool = False) -> MomentData:
    """Run mfpt_moments at every site and stack the results."""
    estimates = [mfpt_moments(s, drop_odd=drop_odd) for s in samples]
    censored = np.array([s.censored_count for s in samples])
    if censored.sum():
        total = sum(s.n_traj for s in samples)
        logger.info("Censored %d of %d trajectories (%.3f%%)", censored.sum(), total, 100 * censored.sum() / total)
    return MomentData(
        sites=np.array([s.site for s in samples]),
        tau1_hat=np.array([e.tau1 for e in estimates]),
        tau2_hat=np.array([e.tau2 for e in estimates]),
        se1=np.array([e.se1 for e in estimates]),
        se2=np.array([e.se2 for e in estimates]),
        n1=np.array([e.n1 for e in estimates]),
        n2=np.array([e.n2 for e in estimates]),
        censored=censored,
    )


def kde_estimate(snapshot: np.ndarray, grid: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian kernel density estimate and its pointwise variance.

    Args:
        snapshot: Sample states X_1..X_N
        grid: Evaluation points
        h: Bandwidth, positive

    Returns:
        Tuple (p_hat, var_hat) with var_hat = p_hat * sigma_K^2 / (N h)
    """
    snapshot = np.asarray(snapshot, dtype=float).ravel()
    grid = np.asarray(grid, dtype=float)
    if not h > 0:
        raise ConfigurationError(f"Bandwidth must be positive, got {h}")
    n = snapshot.size
    if n < 1:
        raise ConfigurationError("KDE needs at least one sample")

    total = np.zeros_like(grid)
    for start in range(0, n, KDE_CHUNK):
        u = (snapshot[start : start + KDE_CHUNK, None] - grid[None, :]) / h
        total += np.exp(-0.5 * u**2).sum(axis=0)
    p_hat = total / (n * h * np.sqrt(2 * np.pi))
    return p_hat, p_hat * KERNEL_SQ_INTEGRAL / (n * h)


def check_bandwidth(n: int, h: float) -> float:
    """Bias-to-variance proxy N h^3; small values mean the KDE bias is negligible."""
    if n < 1 or not h > 0:
        raise ConfigurationError(f"check_bandwidth needs N >= 1 and h > 0, got N={n}, h={h}")
    return n * h**3


def density_data(
    ensemble: TrajectoryEnsemble, grid: np.ndarray, h: float, times: Optional[list[float]] = None
) -> DensityData:
    """KDE of every requested snapshot of an ensemble.

    Args:
        ensemble: Snapshot ensemble
        grid: Observation locations
        h: Bandwidth
        times: Snapshot times to use; defaults to every retained time after 0

    Returns:
        DensityData with one row per time
    """
    ratio = check_bandwidth(ensemble.n_traj, h)
    if ratio > BANDWIDTH_RATIO_MAX:
        warnings.warn(
            f"KDE bandwidth h={h:g} gives N*h^3={ratio:.4g} > {BANDWIDTH_RATIO_MAX}; bias may dominate the variance",
            BandwidthWarning,
            stacklevel=2,
        )
    if times is None:
        times = [t for t in ensemble.snapshot_times if t > 0]
    rows = [kde_estimate(ensemble.snapshot(t), grid, h) for t in times]
    return DensityData(
        grid=np.asarray(grid, dtype=float),
        times=np.asarray(times, dtype=float),
        p_hat=np.array([r[0] for r in rows]).reshape(len(times), len(grid)),
        var_hat=np.array([r[1] for r in rows]).reshape(len(times), len(grid)),
        bandwidth=h,
        n_samples=ensemble.n_traj,
    )


def build_observation_set(
    data: Union[MomentData, DensityData], variance_floor: float = VARIANCE_FLOOR, metadata: Optional[dict] = None
) -> ObservationSet:
    """Stack estimates into an ObservationSet with floored diagonal noise.

    Args:
        data: MomentData (two moments) or DensityData
        variance_floor: Lower bound on every noise variance
        metadata: Provenance recorded with the observations

    Returns:
        ObservationSet with gamma_diag = max(se^2, floor)
    """
    if isinstance(data, MomentData):
        y = np.concatenate([data.tau1_hat, data.tau2_hat])
        var = np.concatenate([data.se1**2, data.se2**2])
        return ObservationSet(
            kind="mfpt",
            y=y,
            locations=np.asarray(data.sites, dtype=float),
            gamma_diag=np.maximum(var, variance_floor),
            n_moments=2,
            metadata=metadata or {},
        )
    if isinstance(data, DensityData):
        return ObservationSet(
            kind="fokker-planck",
            y=data.p_hat.reshape(-1),
            locations=np.asarray(data.grid, dtype=float),
            gamma_diag=np.maximum(data.var_hat.reshape(-1), variance_floor),
            times=np.asarray(data.times, dtype=float),
            metadata={"bandwidth": data.bandwidth, "n_samples": data.n_samples, **(metadata or {})},
        )
    raise TypeError(f"Cannot build observations from {type(data).__name__}")
