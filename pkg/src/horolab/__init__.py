"""Sparse-orbit and sieve numerics on products of SL(2,R) mod a lattice."""

from . import experiments, observables, presets, quotient, sampling, sieve, sl2
from .errors import BudgetExhausted, ConfigError, ToleranceFailure

__version__ = "0.1.0"

__all__ = [
    "BudgetExhausted", "ConfigError", "ToleranceFailure",
    "experiments", "observables", "presets", "quotient",
    "sampling", "sieve", "sl2",
]
