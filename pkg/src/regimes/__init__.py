"""Age-dependent semi-Markov regime components."""

from .semi_markov import (
    ChainState,
    PathSegment,
    RegimeChain,
    conditional_jump_cdf,
    conditional_jump_pdf,
    conditional_residual_cdf,
    cumulative_hazard,
    embedded_matrix_irreducible,
    holding_cdf,
    holding_pdf,
    next_component_prob,
    sample_residual,
    simulate_chain,
)

__all__ = [
    "ChainState",
    "PathSegment",
    "RegimeChain",
    "conditional_jump_cdf",
    "conditional_jump_pdf",
    "conditional_residual_cdf",
    "cumulative_hazard",
    "embedded_matrix_irreducible",
    "holding_cdf",
    "holding_pdf",
    "next_component_prob",
    "sample_residual",
    "simulate_chain",
]
