"""Solvers, Monte Carlo and verification tools for the N-bank lending game
with delayed repayment."""

__version__ = "0.1.0"

from .core import (GameLabError, GameParams, NoConvergence, NumericalError,
                   SystemicRiskQuery, ValidationError, load_params, validate_params)

__all__ = ["GameLabError", "GameParams", "NoConvergence", "NumericalError",
           "SystemicRiskQuery", "ValidationError", "load_params", "validate_params",
           "__version__"]
