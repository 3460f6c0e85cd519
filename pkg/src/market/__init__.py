"""Market coefficient model and portfolio constraints."""

from .jumps import JumpMeasure, JumpSize
from .market import (
    MarketSpec,
    PortfolioSet,
    ValidationReport,
    admissible_interval,
    diffusion_matrix,
    excess_drift,
    membership,
    three_regime_market,
    validate,
)
from .profiles import DrivenCoefficient, TimeProfile

__all__ = [
    "DrivenCoefficient",
    "JumpMeasure",
    "JumpSize",
    "MarketSpec",
    "PortfolioSet",
    "TimeProfile",
    "ValidationReport",
    "admissible_interval",
    "diffusion_matrix",
    "excess_drift",
    "membership",
    "three_regime_market",
    "validate",
]
