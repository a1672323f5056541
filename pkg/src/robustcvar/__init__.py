"""Robust CVaR and NCVaR value iteration for tabular MDPs."""

from .errors import DomainError, NumericError, ParseError, ValidationError
from .riskcore import (
    DiscreteDistribution,
    cvar,
    cvar_dual,
    empirical_distribution,
    evar,
    kl_reduction,
    ncvar,
    rn_reduction,
)

__version__ = "0.1.0"

__all__ = [
    "DiscreteDistribution",
    "DomainError",
    "NumericError",
    "ParseError",
    "ValidationError",
    "cvar",
    "cvar_dual",
    "empirical_distribution",
    "evar",
    "kl_reduction",
    "ncvar",
    "rn_reduction",
]
