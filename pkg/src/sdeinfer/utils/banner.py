"""Startup banner: a sample path of a double-well diffusion over the stage list."""

from typing import Optional

import numpy as np
from rich.console import Console
from rich.panel import Panel
from rich.text import Text

from sdeinfer.__version__ import __version__

LEVELS = " ▁▂▃▄▅▆▇█"
STAGES = ("simulate", "prepare", "infer", "sample", "predict")


def sample_path(width: int = 48, seed: int = 3) -> str:
    """Euler-Maruyama path of dX = (X - X^3) dt + 0.6 dW rendered as block characters."""
    rng = np.random.default_rng(seed)
    x = np.empty(width)
    x[0] = -1.0
    dt = 0.1
    for i in range(1, width):
        x[i] = x[i - 1] + (x[i - 1] - x[i - 1] ** 3) * dt + 0.6 * np.sqrt(dt) * rng.standard_normal()
    scaled = (x - x.min()) / max(np.ptp(x), 1e-12)
    return "".join(LEVELS[int(round(v * (len(LEVELS) - 1)))] for v in scaled)


def display_banner(console: Optional[Console] = None) -> None:
    """Print the banner with the version line."""
    console = console or Console()
    body = Text()
    body.append(sample_path() + "\n", style="bold cyan")
    body.append(" → ".join(STAGES) + "\n", style="magenta")
    body.append(f"sdeinfer v{__version__}", style="dim")
    console.print(Panel(body, title="[bold]sdeinfer[/bold]", subtitle="drift and diffusion of 1D SDEs", expand=False))
