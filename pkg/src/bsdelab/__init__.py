"""Numerical laboratory for non-linear expectations defined by backward SDEs
with constrained neural-network drivers."""

from . import drivers, engine, learning, meanfield, merton, nets, stochastic
from .stochastic import (
    BrownianBundle,
    ForwardModel,
    PathEnsemble,
    TimeGrid,
    make_time_grid,
    sample_brownian,
    simulate_forward,
    split_seed,
    wasserstein2_1d,
)

__all__ = [
    "drivers",
    "engine",
    "learning",
    "meanfield",
    "merton",
    "nets",
    "stochastic",
    "BrownianBundle",
    "ForwardModel",
    "PathEnsemble",
    "TimeGrid",
    "make_time_grid",
    "sample_brownian",
    "simulate_forward",
    "split_seed",
    "wasserstein2_1d",
]

__version__ = "0.1.0"
