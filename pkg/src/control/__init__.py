"""Pointwise minimisation of the risk-sensitive Hamiltonian."""

from .hamiltonian import (
    Hamiltonian,
    HamiltonianResult,
    big_h,
    g_theta,
    g_theta_gradient,
    lower_bound,
    merton_fraction,
    minimize,
)

__all__ = [
    "Hamiltonian",
    "HamiltonianResult",
    "big_h",
    "g_theta",
    "g_theta_gradient",
    "lower_bound",
    "merton_fraction",
    "minimize",
]
