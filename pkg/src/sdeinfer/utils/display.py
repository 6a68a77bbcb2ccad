"""Rich tables summarising stage results."""

from typing import Optional

import numpy as np
from rich.console import Console
from rich.table import Table

from sdeinfer.core.mcmc import ChainResult
from sdeinfer.core.optimize import TERMINATION_REASONS, MapResult


def _console(console: Optional[Console]) -> Console:
    return console if console is not None else Console()


def display_map_summary(result: MapResult, console: Optional[Console] = None) -> None:
    """Print the Newton-CG outcome: termination, costs and iteration counts."""
    table = Table(title="MAP estimate", show_header=True, header_style="bold cyan")
    table.add_column("Quantity", style="cyan", no_wrap=True)
    table.add_column("Value", justify="right")

    status = "[green]converged[/green]" if result.converged else "[yellow]not converged[/yellow]"
    table.add_row("Status", status)
    table.add_row("Reason", TERMINATION_REASONS[result.reason])
    table.add_row("Newton iterations", str(result.newton_iters))
    table.add_row("CG iterations", str(result.total_cg_iters))
    if result.final is not None:
        table.add_row("Cost", f"{result.final.cost:.6e}")
        table.add_row("Misfit", f"{result.final.misfit:.6e}")
        table.add_row("Prior term", f"{result.final.reg:.6e}")
    if result.grad_norm_history:
        table.add_row("|g| initial", f"{result.grad_norm_history[0]:.3e}")
        table.add_row("|g| final", f"{result.grad_norm_history[-1]:.3e}")

    _console(console).print(table)


def display_spectrum(eigvals: np.ndarray, retained: int, limit: int = 10, console: Optional[Console] = None) -> None:
    """Print the leading generalized eigenvalues and the retained rank."""
    table = Table(title=f"Hessian spectrum (rank {retained} of {eigvals.size})", header_style="bold cyan")
    table.add_column("#", style="dim", justify="right")
    table.add_column("lambda", justify="right")
    table.add_column("lambda / (lambda + 1)", justify="right")

    for i, lam in enumerate(eigvals[:limit]):
        style = None if i < retained else "dim"
        table.add_row(str(i + 1), f"{lam:.4e}", f"{lam / (lam + 1.0):.4f}", style=style)
    if eigvals.size > limit:
        table.add_row("...", f"{eigvals[-1]:.4e}", f"{eigvals[-1] / (eigvals[-1] + 1.0):.4f}", style="dim")

    _console(console).print(table)


def display_chain_summary(chain: ChainResult, n_nodes: int, console: Optional[Console] = None) -> None:
    """Print acceptance rate and the largest Monte Carlo standard errors."""
    table = Table(title="MCMC chain", header_style="bold cyan")
    table.add_column("Quantity", style="cyan", no_wrap=True)
    table.add_column("Value", justify="right")

    table.add_row("Step size h", f"{chain.h:.4g}")
    table.add_row("Acceptance rate", f"{chain.acceptance_rate:.3f}")
    table.add_row("Retained samples", str(chain.samples.shape[0]))
    if chain.samples.shape[0] >= 4:
        mcse = chain.mcse()
        table.add_row("Max MCSE drift", f"{np.max(mcse[:n_nodes]):.3e}")
        table.add_row("Max MCSE log diffusion", f"{np.max(mcse[n_nodes:]):.3e}")

    _console(console).print(table)
