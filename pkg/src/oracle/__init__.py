"""Monte-Carlo verification of the solver."""

from .mc_oracle import (
    FeedbackControl,
    McEstimate,
    SuboptimalityReport,
    WealthPath,
    estimate_cost,
    estimate_psi,
    project_admissible,
    simulate_wealth,
    verify_suboptimality,
)

__all__ = [
    "FeedbackControl",
    "McEstimate",
    "SuboptimalityReport",
    "WealthPath",
    "estimate_cost",
    "estimate_psi",
    "project_admissible",
    "simulate_wealth",
    "verify_suboptimality",
]
