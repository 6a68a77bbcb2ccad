"""Euler-Maruyama simulation of 1D Ito diffusions.

Produces the two raw data products used downstream: snapshot ensembles of
trajectory states (for density data) and exit-time samples from an interval
(for mean-first-passage-time data). Trajectories are processed in fixed-size
blocks, each with its own counter-derived random stream, so results do not
depend on how many worker threads run the blocks.
"""

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np
from numpy.polynomial import Polynomial

from sdeinfer.core.errors import (
    CensoringWarning,
    ConfigurationError,
    NumericalDomainError,
    TimeStepWarning,
)

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096
GRID_TOLERANCE = 1e-9

ScalarField = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SdeModel:
    """Scalar Ito SDE dX = b(X) dt + sqrt(sigma2(X)) dW.

    Attributes:
        drift: Vectorized drift b(x)
        diffusion_sq: Vectorized squared diffusion sigma2(x), must be positive
        name: Short label written to manifests
        spec: JSON-serializable description of the coefficients
        allow_degenerate: Accept sigma2 == 0 (deterministic dynamics)
    """

    drift: ScalarField
    diffusion_sq: ScalarField
    name: str = "custom"
    spec: dict = field(default_factory=dict)
    allow_degenerate: bool = False

    @classmethod
    def from_polynomials(
        cls, drift_coeffs: list[float], diffusion_sq_coeffs: list[float], name: str = "custom", **kwargs
    ) -> "SdeModel":
        """Build a model from polynomial coefficients in increasing degree.

        Args:
            drift_coeffs: Coefficients c0, c1, ... of b(x) = c0 + c1 x + ...
            diffusion_sq_coeffs: Coefficients of sigma2(x)
            name: Model label
            **kwargs: Forwarded to the constructor (e.g. allow_degenerate)

        Returns:
            SdeModel evaluating both polynomials
        """
        drift_poly = Polynomial([float(c) for c in drift_coeffs])
        diffusion_poly = Polynomial([float(c) for c in diffusion_sq_coeffs])
        spec = {"drift_poly": list(map(float, drift_coeffs)), "diffusion_sq_poly": list(map(float, diffusion_sq_coeffs))}
        return cls(
            drift=lambda x: drift_poly(np.asarray(x, dtype=float)),
            diffusion_sq=lambda x: diffusion_poly(np.asarray(x, dtype=float)),
            name=name,
            spec=spec,
            **kwargs,
        )

    def evaluate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate drift and squared diffusion, validating the diffusion.

        Args:
            x: States

        Returns:
            Tuple of (b(x), sigma2(x)) broadcast to the shape of x

        Raises:
            NumericalDomainError: If a state is non-finite or sigma2 is not positive
        """
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise NumericalDomainError("Non-finite state encountered during simulation; reduce dt")
        b = np.broadcast_to(np.asarray(self.drift(x), dtype=float), x.shape)
        sigma2 = np.broadcast_to(np.asarray(self.diffusion_sq(x), dtype=float), x.shape)
        bad = sigma2 < 0 if self.allow_degenerate else ~(sigma2 > 0)
        if np.any(bad) or not np.all(np.isfinite(sigma2)):
            where = float(x[np.argmax(bad)]) if np.any(bad) else float("nan")
            raise NumericalDomainError(
                f"Squared diffusion must be positive, got sigma2({where:.6g}) <= 0\n"
                f"Model: {self.name}"
            )
        return b, sigma2


@dataclass(frozen=True)
class InitialCondition:
    """Initial state distribution: a point mass or a normal law.

    Attributes:
        kind: "point" or "normal"
        mean: Location of the point mass / mean of the normal
        variance: Variance of the normal (ignored for point masses)
    """

    kind: str = "point"
    mean: float = 0.0
    variance: float = 0.0

    VALID_KINDS = ("point", "normal")

    def __post_init__(self):
        if self.kind not in self.VALID_KINDS:
            raise ConfigurationError(
                f"Invalid initial condition kind: '{self.kind}'. Must be one of: {', '.join(self.VALID_KINDS)}"
            )
        if self.kind == "normal" and self.variance <= 0:
            raise ConfigurationError(f"Normal initial condition needs a positive variance, got {self.variance}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "point":
            return np.full(n, float(self.mean))
        return self.mean + np.sqrt(self.variance) * rng.standard_normal(n)

    def density(self, x: np.ndarray) -> np.ndarray:
        """Probability density of the normal law (point masses have none)."""
        if self.kind != "normal":
            raise ConfigurationError("A point-mass initial condition has no density")
        return np.exp(-((x - self.mean) ** 2) / (2 * self.variance)) / np.sqrt(2 * np.pi * self.variance)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean": self.mean, "variance": self.variance}


@dataclass(frozen=True)
class TrajectoryEnsemble:
    """Retained snapshots of an ensemble of trajectories.

    Attributes:
        dt: Time step of the Euler-Maruyama scheme
        n_steps: Number of steps each trajectory was integrated for
        snapshot_times: Retained times, integer multiples of dt
        states: Array of shape (n_snapshots, n_traj)
        seed: Seed of the random streams
        model_spec: Description of the simulated model
    """

    dt: float
    n_steps: int
    snapshot_times: np.ndarray
    states: np.ndarray
    seed: int
    model_spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states.setflags(write=False)
        self.snapshot_times.setflags(write=False)

    @property
    def n_traj(self) -> int:
        return self.states.shape[1]

    def snapshot(self, t: float) -> np.ndarray:
        """Return the ensemble states at snapshot time t."""
        idx = np.flatnonzero(np.isclose(self.snapshot_times, t, rtol=0, atol=GRID_TOLERANCE * max(1.0, abs(t))))
        if idx.size == 0:
            raise ConfigurationError(f"Time {t} is not a retained snapshot time")
        return self.states[idx[0]]

    def manifest(self) -> dict:
        return {
            "kind": "ensemble",
            "dt": self.dt,
            "n_steps": self.n_steps,
            "n_traj": self.n_traj,
            "snapshot_times": self.snapshot_times.tolist(),
            "seed": self.seed,
            "model": self.model_spec,
        }

    def save(self, directory: Path) -> list[Path]:
        """Write trajectories.csv (traj_id,time,x) and trajectories.json.

        Args:
            directory: Target directory (created if missing)

        Returns:
            Paths of the written files
        """
        directory.mkdir(parents=True, exist_ok=True)
        n_snap, n_traj = self.states.shape
        rows = np.column_stack(
            [
                np.tile(np.arange(n_traj), n_snap),
                np.repeat(self.snapshot_times, n_traj),
                self.states.reshape(-1),
            ]
        )
        csv_path = directory / "trajectories.csv"
        np.savetxt(csv_path, rows, delimiter=",", header="traj_id,time,x", comments="", fmt=["%d", "%.17g", "%.17g"])
        meta_path = directory / "trajectories.json"
        meta_path.write_text(json.dumps(self.manifest(), indent=2))
        return [csv_path, meta_path]

    @classmethod
    def load(cls, directory: Path) -> "TrajectoryEnsemble":
        meta = json.loads((directory / "trajectories.json").read_text())
        rows = np.loadtxt(directory / "trajectories.csv", delimiter=",", skiprows=1, ndmin=2)
        times = np.asarray(meta["snapshot_times"], dtype=float)
        states = rows[:, 2].reshape(len(times), meta["n_traj"])
        return cls(
            dt=meta["dt"],
            n_steps=meta["n_steps"],
            snapshot_times=times,
            states=states,
            seed=meta["seed"],
            model_spec=meta.get("model", {}),
        )


@dataclass(frozen=True)
class ExitTimeSample:
    """Exit times from an interval for trajectories started at one site.

    Attributes:
        site: Initial state x_i
        domain: Interval (a_left, a_right)
        times: Uncensored exit times in trajectory order
        censored_count: Trajectories still inside after max_steps
        dt: Time step
        max_steps: Simulation horizon in steps
        seed: Seed of the random streams
    """

    site: float
    domain: tuple[float, float]
    times: np.ndarray
    censored_count: int
    dt: float
    max_steps: int
    seed: int

    def __post_init__(self):
        a, b = self.domain
        if not a < self.site < b:
            raise ConfigurationError(f"Site {self.site} must lie strictly inside the domain ({a}, {b})")
        if self.times.size and (np.min(self.times) <= 0 or np.max(self.times) > self.max_steps * self.dt * (1 + 1e-12)):
            raise NumericalDomainError("Exit times must lie in (0, max_steps * dt]")
        self.times.setflags(write=False)

    @property
    def n_traj(self) -> int:
        return int(self.times.size + self.censored_count)

    @property
    def censored_fraction(self) -> float:
        return self.censored_count / self.n_traj if self.n_traj else 0.0

    def to_csv(self, path: Path) -> Path:
        """Write rows site,tau,censored; censored rows carry tau = max_steps * dt."""
        horizon = self.max_steps * self.dt
        tau = np.concatenate([self.times, np.full(self.censored_count, horizon)])
        censored = np.concatenate([np.zeros(self.times.size), np.ones(self.censored_count)])
        rows = np.column_stack([np.full(tau.size, self.site), tau, censored])
        np.savetxt(path, rows, delimiter=",", header="site,tau,censored", comments="", fmt=["%.17g", "%.17g", "%d"])
        return path

    @classmethod
    def from_csv(cls, path: Path, domain: tuple[float, float], dt: float, max_steps: int, seed: int) -> "ExitTimeSample":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        censored = rows[:, 2].astype(bool)
        return cls(
            site=float(rows[0, 0]),
            domain=(float(domain[0]), float(domain[1])),
            times=rows[~censored, 1].copy(),
            censored_count=int(censored.sum()),
            dt=dt,
            max_steps=max_steps,
            seed=seed,
        )


@dataclass(frozen=True)
class MultiscaleParams:
    """Parameters of the fast/slow three-variable benchmark system.

    Attributes:
        epsilon: Scale separation
        q1: Noise amplitude of the first fast variable
        q2: Noise amplitude of the second fast variable
        nu: Linear growth coefficient
    """

    epsilon: float = 0.1
    q1: float = 1.0
    q2: float = 1.0
    nu: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "q1": self.q1, "q2": self.q2, "nu": self.nu}


class EffectiveCoefficients(NamedTuple):
    A: float
    B: float
    sigma_a: float
    sigma_b: float


def em_step(x: np.ndarray, model: SdeModel, dt: float, z: np.ndarray) -> np.ndarray:
    """Advance states by one Euler-Maruyama step.

    Args:
        x: Current states
        model: SDE coefficients
        dt: Time step, positive
        z: Standard normal draws, same shape as x

    Returns:
        x + b(x) dt + sqrt(sigma2(x)) sqrt(dt) z

    Raises:
        NumericalDomainError: On non-finite states or non-positive sigma2
    """
    if not dt > 0:
        raise ConfigurationError(f"Time step must be positive, got {dt}")
    b, sigma2 = model.evaluate(x)
    return x + b * dt + np.sqrt(sigma2) * np.sqrt(dt) * z


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Random stream for one trajectory block, independent of scheduling."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block,))))


def _blocks(n_traj: int, block_size: int) -> list[tuple[int, int, int]]:
    return [(j, start, min(block_size, n_traj - start)) for j, start in enumerate(range(0, n_traj, block_size))]


def _run_blocks(worker, blocks, n_workers: int) -> list:
    if n_workers <= 1 or len(blocks) <= 1:
        return [worker(block) for block in blocks]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(worker, blocks))


def snapshot_indices(snapshot_times: list[float], dt: float, n_steps: int) -> np.ndarray:
    """Map snapshot times to step indices.

    Raises:
        ConfigurationError: If a time is not an integer multiple of dt within [0, n_steps * dt]
    """
    times = np.asarray(snapshot_times, dtype=float)
    steps = np.rint(times / dt).astype(np.int64)
    off_grid = np.abs(steps * dt - times) > GRID_TOLERANCE * np.maximum(1.0, np.abs(times))
    out_of_range = (steps < 0) | (steps > n_steps)
    if np.any(off_grid | out_of_range):
        bad = times[off_grid | out_of_range]
        raise ConfigurationError(
            f"Snapshot times {bad.tolist()} are not on the time grid {{0, {dt}, ..., {n_steps * dt:g}}}"
        )
    if np.any(np.diff(steps) <= 0):
        raise ConfigurationError("Snapshot times must be strictly increasing")
    return steps


def simulate_ensemble(
    model: SdeModel,
    init: InitialCondition,
    n_traj: int,
    n_steps: int,
    dt: float,
    snapshot_times: list[float],
    seed: int,
    n_workers: int = 1,
    block_size: int = BLOCK_SIZE,
) -> TrajectoryEnsemble:
    """Integrate an ensemble and keep only the requested snapshots.

    Args:
        model: SDE coefficients
        init: Initial distribution
        n_traj: Number of trajectories
        n_steps: Number of Euler-Maruyama steps
        dt: Time step
        snapshot_times: Times to retain, multiples of dt
        seed: Seed of the block streams
        n_workers: Threads used to run blocks
        block_size: Trajectories per random stream

    Returns:
        TrajectoryEnsemble with states of shape (len(snapshot_times), n_traj)
    """
    steps = snapshot_indices(snapshot_times, dt, n_steps)
    column = {int(k): i for i, k in enumerate(steps)}
    last = int(steps[-1]) if steps.size else 0

    def worker(block):
        j, _, n = block
        rng = block_rng(seed, j)
        out = np.empty((steps.size, n))
        x = init.sample(rng, n)
        if 0 in column:
            out[column[0]] = x
        for step in range(1, last + 1):
            x = em_step(x, model, dt, rng.standard_normal(n))
            if step in column:
                out[column[step]] = x
        return out

    blocks = _blocks(n_traj, block_size)
    states = np.concatenate(_run_blocks(worker, blocks, n_workers), axis=1) if blocks else np.empty((steps.size, 0))
    logger.info("Simulated %d trajectories (%d snapshots) of model %s", n_traj, steps.size, model.name)
    return TrajectoryEnsemble(
        dt=dt,
        n_steps=n_steps,
        snapshot_times=steps * dt,
        states=states,
        seed=seed,
        model_spec={"name": model.name, **model.spec},
    )


def simulate_exit_times(
    model: SdeModel,
    site: float,
    domain: tuple[float, float],
    n_traj: int,
    dt: float,
    max_steps: int,
    seed: int,
    n_workers: int = 1,
    block_size: int = BLOCK_SIZE,
) -> ExitTimeSample:
    """Sample first exit times from an interval.

    A trajectory exits at the first step index k with X_k outside the open
    interval; its exit time is k * dt. Trajectories still inside after
    max_steps are counted as censored and excluded from the times.

    Raises:
        ConfigurationError: If the site is not strictly inside the domain
    """
    a, b = domain
    if not a < site < b:
        raise ConfigurationError(f"Site {site} must lie strictly inside the domain ({a}, {b})")

    def worker(block):
        j, _, n = block
        rng = block_rng(seed, j)
        exit_step = np.zeros(n, dtype=np.int64)
        active = np.arange(n)
        x = np.full(n, float(site))
        for step in range(1, max_steps + 1):
            x = em_step(x, model, dt, rng.standard_normal(active.size))
            out = (x <= a) | (x >= b)
            if np.any(out):
                exit_step[active[out]] = step
                active = active[~out]
                x = x[~out]
                if active.size == 0:
                    break
        return exit_step

    blocks = _blocks(n_traj, block_size)
    exit_step = np.concatenate(_run_blocks(worker, blocks, n_workers)) if blocks else np.zeros(0, dtype=np.int64)
    exited = exit_step > 0
    censored = int(n_traj - exited.sum())
    if censored:
        warnings.warn(
            f"{censored} of {n_traj} trajectories from site {site:g} did not exit within {max_steps} steps",
            CensoringWarning,
            stacklevel=2,
        )
    return ExitTimeSample(
        site=float(site),
        domain=(float(a), float(b)),
        times=exit_step[exited] * dt,
        censored_count=censored,
        dt=dt,
        max_steps=max_steps,
        seed=seed,
    )


def simulate_site_grid(
    model: SdeModel,
    sites: np.ndarray,
    domain: tuple[float, float],
    n_traj: int,
    dt: float,
    max_steps: int,
    seed: int,
    n_workers: int = 1,
) -> list[ExitTimeSample]:
    """Run simulate_exit_times at every site with per-site derived seeds."""
    children = np.random.SeedSequence(seed).spawn(len(sites))
    samples = []
    for site, child in zip(sites, children, strict=True):
        site_seed = int(child.generate_state(1)[0])
        samples.append(simulate_exit_times(model, float(site), domain, n_traj, dt, max_steps, site_seed, n_workers))
    return samples


def simulate_multiscale(
    p: MultiscaleParams,
    init: InitialCondition,
    n_traj: int,
    n_steps: int,
    dt: float,
    snapshot_times: list[float],
    seed: int,
    n_workers: int = 1,
    block_size: int = BLOCK_SIZE,
) -> TrajectoryEnsemble:
    """Integrate the slow/fast system and retain the slow component.

    dx = (nu x - (x y + y z) / (2 eps)) dt
    dy = (nu y - 3 y / eps^2 - (2 x z - x^2) / (2 eps)) dt + q1 / eps dV1
    dz = (nu z - 8 z / eps^2 + 3 x y / (2 eps)) dt + q2 / eps dV2

    The fast variables start at zero; x starts from init.
    """
    eps = p.epsilon
    if dt > eps**2 / 10:
        warnings.warn(
            f"dt={dt:g} is large relative to the fast time scale eps^2={eps**2:g}",
            TimeStepWarning,
            stacklevel=2,
        )
    steps = snapshot_indices(snapshot_times, dt, n_steps)
    column = {int(k): i for i, k in enumerate(steps)}
    last = int(steps[-1]) if steps.size else 0
    sqrt_dt = np.sqrt(dt)

    def worker(block):
        j, _, n = block
        rng = block_rng(seed, j)
        out = np.empty((steps.size, n))
        x = init.sample(rng, n)
        y = np.zeros(n)
        z = np.zeros(n)
        if 0 in column:
            out[column[0]] = x
        for step in range(1, last + 1):
            dv = rng.standard_normal((2, n))
            fx = p.nu * x - (x * y + y * z) / (2 * eps)
            fy = p.nu * y - 3 * y / eps**2 - (2 * x * z - x**2) / (2 * eps)
            fz = p.nu * z - 8 * z / eps**2 + 3 * x * y / (2 * eps)
            x, y, z = (
                x + fx * dt,
                y + fy * dt + p.q1 / eps * sqrt_dt * dv[0],
                z + fz * dt + p.q2 / eps * sqrt_dt * dv[1],
            )
            if step in column:
                if not np.all(np.isfinite(x)):
                    raise NumericalDomainError("Non-finite slow state in the multiscale system; reduce dt")
                out[column[step]] = x
        return out

    blocks = _blocks(n_traj, block_size)
    states = np.concatenate(_run_blocks(worker, blocks, n_workers), axis=1) if blocks else np.empty((steps.size, 0))
    return TrajectoryEnsemble(
        dt=dt,
        n_steps=n_steps,
        snapshot_times=steps * dt,
        states=states,
        seed=seed,
        model_spec={"name": "multiscale", **p.to_dict()},
    )


def effective_coefficients(p: MultiscaleParams) -> EffectiveCoefficients:
    """Coefficients of the coarse-grained limit dX = (A X - B X^3) dt + sqrt(sa + sb X^2) dW."""
    return EffectiveCoefficients(
        A=p.nu + p.q1**2 / 396 + p.q2**2 / 352,
        B=1 / 12,
        sigma_a=p.q1**2 * p.q2**2 / 2112,
        sigma_b=p.q1**2 / 36,
    )


def effective_model(p: MultiscaleParams) -> SdeModel:
    """Effective single-scale model of the slow variable."""
    c = effective_coefficients(p)
    return SdeModel.from_polynomials([0.0, c.A, 0.0, -c.B], [c.sigma_a, 0.0, c.sigma_b], name="multiscale-effective")


def save_exit_time_samples(samples: list[ExitTimeSample], directory: Path, model_spec: Optional[dict] = None) -> list[Path]:
    """Write one site_XXX.csv per sample plus an exit_times.json manifest."""
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    entries = []
    for i, sample in enumerate(samples):
        path = sample.to_csv(directory / f"site_{i:03d}.csv")
        written.append(path)
        entries.append(
            {
                "file": path.name,
                "site": sample.site,
                "n_traj": sample.n_traj,
                "censored": sample.censored_count,
                "seed": sample.seed,
            }
        )
    first = samples[0] if samples else None
    manifest = {
        "kind": "exit_times",
        "domain": list(first.domain) if first else None,
        "dt": first.dt if first else None,
        "max_steps": first.max_steps if first else None,
        "model": model_spec or {},
        "sites": entries,
    }
    meta_path = directory / "exit_times.json"
    meta_path.write_text(json.dumps(manifest, indent=2))
    written.append(meta_path)
    return written


def load_exit_time_samples(directory: Path) -> list[ExitTimeSample]:
    meta = json.loads((directory / "exit_times.json").read_text())
    domain = tuple(meta["domain"])
    return [
        ExitTimeSample.from_csv(directory / entry["file"], domain, meta["dt"], meta["max_steps"], entry["seed"])
        for entry in meta["sites"]
    ]
