"""Volterra-equation solvers for psi and the quantities derived from it."""

from .psi_grid import PsiGrid, optimal_wealth, phi_table
from .volterra import (
    optimal_control_curve,
    pde_residual,
    solve,
    solve_general,
    solve_reduced,
    step_count,
)

__all__ = [
    "PsiGrid",
    "optimal_control_curve",
    "optimal_wealth",
    "pde_residual",
    "phi_table",
    "solve",
    "solve_general",
    "solve_reduced",
    "step_count",
]
